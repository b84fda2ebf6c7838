//! Sliding-window visual-inertial filter.
//!
//! Per frame: propagate (QR deferred), clone the pose, re-anchor features
//! whose anchor is leaving, marginalize (the one QR), then build gated
//! measurement blocks for the three paths (out-of-state feature
//! constraints, delayed initialization, re-observations) and apply them in
//! a single batch update.
//!
//! Besides the square-root engine the same loop can run a dense
//! Joseph-form EKF and a square-root information filter over identical
//! measurement decisions; the references support the out-of-state feature
//! path only and exist for the numerical comparison studies.

use crate::chi2::Chi2Table;
use crate::dense;
use crate::error::SrfError;
use crate::geom::V3;
use crate::imu::{preintegrate, propagate_mean, transition_blocks, Gravity, ImuSample, NavState, NoiseSpec};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::srf::{Backend, BlockKind, BlockTag, CloneId, FeatureId, LinearizedMeasurement, SqrtState};
use crate::tri;
use crate::vision::{
    anchor_change, assemble_update, clone_cam_pose, global_to_anchored, linearize_obs,
    msckf_project, slam_delayed_init, triangulate, CamPose, CameraModel, TrackObs,
};
use std::collections::BTreeMap;

/// Which uncertainty representation drives the filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    /// Upper-triangular square-root covariance (the supported estimator).
    Sqrt(Backend),
    /// Dense Joseph-form EKF reference.
    DenseEkf,
    /// Square-root information fixture.
    InfoSqrt,
}

#[derive(Clone, Debug)]
pub struct VioConfig {
    pub num_clones: usize,
    pub max_slam: usize,
    pub max_msckf: usize,
    pub pixel_sigma: f64,
    pub chi2_confidence: f64,
    pub chi2_inflation: f64,
    pub parallax_floor_rad: f64,
    pub engine: EngineKind,
    /// Accept every gated block (used when runs must share decisions).
    pub force_accept: bool,
    /// Evaluate cond(C) (or the information-factor condition) per update.
    pub track_cond: bool,
    /// Minimum observations before a lost track is used as a constraint.
    pub min_msckf_obs: usize,
}

impl Default for VioConfig {
    fn default() -> Self {
        VioConfig {
            num_clones: 11,
            max_slam: 50,
            max_msckf: 40,
            pixel_sigma: 1.0,
            chi2_confidence: 0.95,
            chi2_inflation: 1.0,
            parallax_floor_rad: 1.0f64.to_radians(),
            engine: EngineKind::Sqrt(Backend::Llt),
            force_accept: false,
            track_cond: false,
            min_msckf_obs: 3,
        }
    }
}

/// Per-update diagnostic record (one CSV row).
#[derive(Clone, Copy, Debug)]
pub struct UpdateDiag {
    pub t_ns: i64,
    pub rows: usize,
    pub state_dim: usize,
    pub cond_c: f64,
    pub flops: u64,
    pub accepted: usize,
    pub rejected: usize,
}

struct TrackState {
    obs: Vec<TrackObs>,
    in_state: bool,
    /// Observations at or before this stamp are spent.
    consumed_until: i64,
}

/// The filter. Mean bookkeeping always lives in the block-structured
/// square-root state; the reference engines maintain their own uncertainty
/// alongside it.
pub struct Filter<T: Scalar> {
    pub state: SqrtState<T>,
    pub cam: CameraModel<T>,
    pub noise: NoiseSpec,
    pub gravity: Gravity<T>,
    pub cfg: VioConfig,
    chi2: Chi2Table,
    tracks: BTreeMap<FeatureId, TrackState>,
    feature_anchor: BTreeMap<FeatureId, CloneId>,
    last_t: f64,
    dense_cov: Option<Mat<T>>,
    info_factor: Option<Mat<T>>,
    pub diags: Vec<UpdateDiag>,
    pub max_info_cond: f64,
}

impl<T: Scalar> Filter<T> {
    /// Start from a known navigation state and diagonal std-devs (used by
    /// the simulation studies which initialize from perturbed truth).
    pub fn from_nav_prior(
        nav: NavState<T>,
        prior_sigmas: &[f64; 15],
        cam: CameraModel<T>,
        noise: NoiseSpec,
        t0: f64,
        cfg: VioConfig,
    ) -> Self {
        let parts = [
            (BlockKind::Quat, BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
        ];
        let mut factor = Mat::<T>::zeros(15, 15);
        for i in 0..15 {
            factor[(i, i)] = T::of(prior_sigmas[i]);
        }
        let state = SqrtState::from_blocks(&parts, nav.to_mean(), factor.clone());
        let dense_cov = matches!(cfg.engine, EngineKind::DenseEkf)
            .then(|| factor.tr_mul(&factor));
        let info_factor = matches!(cfg.engine, EngineKind::InfoSqrt).then(|| {
            let inv = tri::solve_upper(&factor, &Mat::identity(15)).expect("prior invertible");
            // R = U^{-T} gives R^T R = (U^T U)^{-1}
            tri::qr_triangularize(&inv.transpose()).into_mat()
        });
        Filter {
            state,
            cam,
            noise,
            gravity: Gravity::standard(),
            chi2: Chi2Table::new(cfg.chi2_confidence),
            cfg,
            tracks: BTreeMap::new(),
            feature_anchor: BTreeMap::new(),
            last_t: t0,
            dense_cov,
            info_factor,
            diags: Vec::new(),
            max_info_cond: 0.0,
        }
    }

    /// Hand over an initializer solution: the last keyframe becomes the
    /// navigation state, earlier keyframes become clones (their velocity
    /// and bias sub-blocks marginalized), and key features are re-anchored
    /// to the camera frame of the newest clone observing them.
    pub fn from_init(
        init: crate::init::InitSolution<T>,
        tracks_hint: &[crate::vision::FeatureTrack],
        cam: CameraModel<T>,
        noise: NoiseSpec,
        cfg: VioConfig,
    ) -> Result<Self, SrfError> {
        assert!(
            matches!(cfg.engine, EngineKind::Sqrt(_)),
            "only the square-root engine consumes an initializer state"
        );
        let kf = init.keyframes.clone();
        let last = *kf.last().unwrap();
        let st = init.state;
        // marginalize v/bg/ba of all but the last keyframe by splitting
        // each keyframe's Lin(12) block; the refine layout interleaves
        // [Quat, Lin(12)] per keyframe, so rebuild into filter layout
        let nk = kf.len();
        let old_dim = st.err_dim();
        // column selection realizes the re-ordering, the marginalization of
        // old keyframe velocity/bias blocks, and the cloning of the newest
        // pose (it appears once inside the nav block and once as a clone):
        // new order = [nav (last kf, 15) | clone poses newest..oldest | features]
        let pose_off = |k: usize| 15 * k;
        let last_k = nk - 1;
        let mut perm: Vec<usize> = Vec::with_capacity(old_dim);
        perm.extend(pose_off(last_k)..pose_off(last_k) + 15);
        for k in (0..nk).rev() {
            perm.extend(pose_off(k)..pose_off(k) + 6);
        }
        let feat_dims = old_dim - 15 * nk;
        perm.extend(15 * nk..old_dim);
        let factor_old = st.factor();
        let fnew = Mat::<T>::from_fn(factor_old.rows(), perm.len(), |r, c| {
            factor_old[(r, perm[c])]
        });
        // build the mean/blocks for the filter layout
        let mut parts: Vec<(BlockKind, BlockTag)> = vec![
            (BlockKind::Quat, BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
            (BlockKind::Lin(3), BlockTag::Nav),
        ];
        let mut mean: Vec<T> = Vec::new();
        let navm = {
            let qi = 2 * last_k;
            let q = st.quat_at(qi);
            let base = st.blocks()[2 * last_k + 1].mean_off;
            let mut m = q.0.to_vec();
            m.extend_from_slice(&st.mean()[base..base + 12]);
            m
        };
        mean.extend_from_slice(&navm);
        for k in (0..nk).rev() {
            parts.push((BlockKind::Quat, BlockTag::Clone(kf[k])));
            parts.push((BlockKind::Lin(3), BlockTag::Clone(kf[k])));
            let q = st.quat_at(2 * k);
            mean.extend_from_slice(&q.0);
            let base = st.blocks()[2 * k + 1].mean_off;
            mean.extend_from_slice(&st.mean()[base..base + 3]);
        }
        // features stay global in the refine state: convert to anchored
        let mut feat_ids: Vec<FeatureId> = Vec::new();
        for b in st.blocks() {
            if let BlockTag::Feature(id) = b.tag {
                feat_ids.push(id);
            }
        }
        let mut feature_anchor = BTreeMap::new();
        // first pass: build the state with global features, then re-anchor
        for &id in &feat_ids {
            parts.push((BlockKind::Lin(3), BlockTag::Feature(id)));
            let bi = st.blocks().iter().position(|b| b.tag == BlockTag::Feature(id)).unwrap();
            let f = st.vec3_at(bi);
            mean.extend_from_slice(&f.0);
        }
        assert_eq!(feat_dims, 3 * feat_ids.len());
        let fq = tri::qr_triangularize(&fnew).into_mat();
        let mut state = SqrtState::from_blocks(&parts, mean, fq);

        // anchored parameterization: re-express each feature in its anchor
        // clone camera frame through the linearized map
        for &id in &feat_ids {
            let anchor = tracks_hint
                .iter()
                .find(|t| t.id == id)
                .and_then(|t| t.obs.iter().map(|o| o.t_ns).filter(|t| kf.contains(t)).max())
                .unwrap_or(last);
            convert_global_feature_to_anchored(&mut state, &cam, id, anchor)?;
            feature_anchor.insert(id, anchor);
        }
        let chi2 = Chi2Table::new(cfg.chi2_confidence);
        let mut tracks: BTreeMap<FeatureId, TrackState> = BTreeMap::new();
        for t in tracks_hint {
            tracks.insert(
                t.id,
                TrackState {
                    obs: t.obs.clone(),
                    in_state: feat_ids.contains(&t.id),
                    consumed_until: last,
                },
            );
        }
        Ok(Filter {
            state,
            cam,
            noise,
            gravity: Gravity::standard(),
            chi2,
            cfg,
            tracks,
            feature_anchor,
            last_t: last as f64 * 1e-9,
            dense_cov: None,
            info_factor: None,
            diags: Vec::new(),
            max_info_cond: 0.0,
        })
    }

    pub fn anchor_of(&self, fid: FeatureId) -> Option<CloneId> {
        self.feature_anchor.get(&fid).copied()
    }

    pub fn nav(&self) -> NavState<T> {
        NavState::from_mean(&self.state.mean()[0..16])
    }

    pub fn covariance(&self) -> Mat<T> {
        match self.cfg.engine {
            EngineKind::Sqrt(_) => self.state.covariance(),
            EngineKind::DenseEkf => self.dense_cov.clone().unwrap(),
            EngineKind::InfoSqrt => {
                let r = self.info_factor.as_ref().unwrap();
                let inv = tri::solve_upper(r, &Mat::identity(r.rows())).unwrap();
                inv.mul_tr(&inv)
            }
        }
    }

    /// Advance to the frame at `t_frame` and process its observations.
    pub fn process_frame(
        &mut self,
        imu: &[ImuSample],
        t_frame: f64,
        frame_obs: &[(FeatureId, f64, f64)],
    ) -> Result<UpdateDiag, SrfError> {
        let t_ns = (t_frame * 1e9).round() as i64;
        self.propagate_and_clone(imu, t_frame, t_ns)?;
        self.ingest(t_ns, frame_obs);
        self.slide_window(t_ns)?;
        let diag = self.measurement_update(t_ns)?;
        self.diags.push(diag);
        Ok(diag)
    }

    fn propagate_and_clone(
        &mut self,
        imu: &[ImuSample],
        t_frame: f64,
        t_ns: i64,
    ) -> Result<(), SrfError> {
        let nav = self.nav();
        let seg: Vec<ImuSample> = imu
            .iter()
            .copied()
            .filter(|s| s.t >= self.last_t - 1e-9 && s.t <= t_frame + 1e-9)
            .collect();
        if seg.len() >= 2 {
            let pre = preintegrate(&seg, nav.bg, nav.ba, &self.noise)
                .map_err(|e| SrfError::UnknownBlock(format!("imu: {e}")))?;
            let (phi, wsq) = transition_blocks(&nav, &pre);
            let new_nav = propagate_mean(&nav, &pre, &self.gravity);
            match self.cfg.engine {
                EngineKind::Sqrt(_) => {
                    self.state.propagate(&phi, &wsq, &new_nav.to_mean(), true)?;
                }
                EngineKind::DenseEkf => {
                    let p = self.dense_cov.take().unwrap();
                    let w_full = {
                        let n = p.rows();
                        let mut w = Mat::zeros(n, n);
                        let w15 = wsq.tr_mul(&wsq);
                        w.set_block(0, 0, &w15);
                        w
                    };
                    self.dense_cov = Some(dense::propagate_cov(&p, &phi, &w_full));
                    self.state.mean_mut()[0..16].copy_from_slice(&new_nav.to_mean());
                }
                EngineKind::InfoSqrt => {
                    self.info_propagate(&phi, &wsq)?;
                    self.state.mean_mut()[0..16].copy_from_slice(&new_nav.to_mean());
                }
            }
        }
        self.last_t = t_frame;
        // stochastic cloning of the post-propagation pose
        match self.cfg.engine {
            EngineKind::Sqrt(_) => self.state.clone_leading_pose(t_ns),
            EngineKind::DenseEkf => {
                let p = self.dense_cov.take().unwrap();
                self.dense_cov = Some(dense::clone_cov(&p, 0, 6, 15));
                self.clone_mean_only(t_ns);
            }
            EngineKind::InfoSqrt => {
                self.info_clone()?;
                self.clone_mean_only(t_ns);
            }
        }
        Ok(())
    }

    /// Clone the pose in the mean bookkeeping without touching the factor
    /// (reference engines keep their own uncertainty).
    fn clone_mean_only(&mut self, id: CloneId) {
        let saved = self.state.factor().clone();
        self.state.clone_leading_pose(id);
        // rebuild a placeholder factor of the right width
        let n = self.state.err_dim();
        let mut f = Mat::zeros(n, n);
        let take = saved.rows().min(n);
        let _ = take;
        f.set_block(0, 0, &Mat::identity(n));
        self.state.replace_factor(f);
    }

    fn ingest(&mut self, t_ns: i64, frame_obs: &[(FeatureId, f64, f64)]) {
        for &(fid, u, v) in frame_obs {
            let e = self.tracks.entry(fid).or_insert_with(|| TrackState {
                obs: Vec::new(),
                in_state: false,
                consumed_until: i64::MIN,
            });
            e.obs.push(TrackObs { t_ns, uv: [u, v], sigma: self.cfg.pixel_sigma });
        }
    }

    fn clone_ids(&self) -> Vec<CloneId> {
        let mut ids = Vec::new();
        for b in self.state.blocks() {
            if let BlockTag::Clone(id) = b.tag {
                if ids.last() != Some(&id) {
                    ids.push(id);
                }
            }
        }
        ids
    }

    fn slide_window(&mut self, _t_ns: i64) -> Result<(), SrfError> {
        let ids = self.clone_ids();
        let mut victims: Vec<BlockTag> = Vec::new();
        let mut victim_clone: Option<CloneId> = None;
        if ids.len() > self.cfg.num_clones {
            let oldest = *ids.last().unwrap();
            victim_clone = Some(oldest);
            victims.push(BlockTag::Clone(oldest));
        }
        // in-state features whose track died: marginalize
        let dead: Vec<FeatureId> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.in_state)
            .filter(|(_, t)| t.obs.last().map(|o| o.t_ns).unwrap_or(i64::MIN) < _t_ns)
            .map(|(id, _)| *id)
            .collect();
        for id in &dead {
            victims.push(BlockTag::Feature(*id));
            self.tracks.get_mut(id).unwrap().in_state = false;
            self.feature_anchor.remove(id);
        }
        // re-anchor surviving features anchored to the departing clone
        if let Some(oldest) = victim_clone {
            if matches!(self.cfg.engine, EngineKind::Sqrt(_)) {
                let remaining: Vec<CloneId> =
                    ids.iter().copied().filter(|&c| c != oldest).collect();
                let moves: Vec<(FeatureId, CloneId)> = self
                    .feature_anchor
                    .iter()
                    .filter(|(id, &a)| a == oldest && !dead.contains(id))
                    .map(|(&id, _)| {
                        let new_anchor = self
                            .tracks
                            .get(&id)
                            .and_then(|t| {
                                t.obs
                                    .iter()
                                    .map(|o| o.t_ns)
                                    .filter(|t| remaining.contains(t))
                                    .max()
                            })
                            .unwrap_or(remaining[0]);
                        (id, new_anchor)
                    })
                    .collect();
                for (id, new_anchor) in moves {
                    anchor_change(&mut self.state, &self.cam, id, oldest, new_anchor)
                        .map_err(|e| SrfError::UnknownBlock(format!("anchor: {e}")))?;
                    self.feature_anchor.insert(id, new_anchor);
                }
            }
        }
        match self.cfg.engine {
            EngineKind::Sqrt(_) => {
                if victims.is_empty() {
                    self.state.triangularize();
                } else {
                    self.state.marginalize(&victims)?;
                }
            }
            EngineKind::DenseEkf => {
                if !victims.is_empty() {
                    let drop = self.err_cols_of(&victims);
                    let p = self.dense_cov.take().unwrap();
                    self.dense_cov = Some(dense::marginal_cov(&p, &drop));
                    self.marginalize_mean_only(&victims)?;
                }
            }
            EngineKind::InfoSqrt => {
                if !victims.is_empty() {
                    let drop = self.err_cols_of(&victims);
                    self.info_marginalize(&drop)?;
                    self.marginalize_mean_only(&victims)?;
                }
            }
        }
        // drop tracks that can no longer produce measurements
        let live: Vec<CloneId> = self.clone_ids();
        let oldest_live = live.iter().copied().min().unwrap_or(i64::MIN);
        self.tracks.retain(|_, t| {
            t.obs.retain(|o| o.t_ns >= oldest_live);
            t.in_state || !t.obs.is_empty()
        });
        Ok(())
    }

    fn err_cols_of(&self, victims: &[BlockTag]) -> Vec<usize> {
        let mut cols = Vec::new();
        for b in self.state.blocks() {
            if victims.contains(&b.tag) {
                cols.extend(b.err_off..b.err_off + b.kind.err_dim());
            }
        }
        cols.sort_unstable();
        cols
    }

    fn marginalize_mean_only(&mut self, victims: &[BlockTag]) -> Result<(), SrfError> {
        // keep a placeholder identity factor aligned to the new layout
        self.state.marginalize(victims)?;
        let n = self.state.err_dim();
        self.state.replace_factor(Mat::identity(n));
        Ok(())
    }

    fn clone_pose_of(&self, id: CloneId) -> Option<(crate::geom::M3<T>, V3<T>)> {
        for (i, b) in self.state.blocks().iter().enumerate() {
            if b.tag == BlockTag::Clone(id) && b.kind == BlockKind::Quat {
                return Some((self.state.quat_at(i).rot(), self.state.vec3_at(i + 1)));
            }
        }
        None
    }

    fn measurement_update(&mut self, t_ns: i64) -> Result<UpdateDiag, SrfError> {
        let clone_ids = self.clone_ids();
        let window: Vec<CloneId> = clone_ids.clone();
        let n_before_init = self.state.err_dim();
        let mut blocks: Vec<LinearizedMeasurement<T>> = Vec::new();
        let mut accepted = 0usize;
        let mut rejected = 0usize;

        // --- re-observations of in-state features (newest obs only)
        let in_state: Vec<FeatureId> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.in_state)
            .filter(|(_, t)| t.obs.iter().any(|o| o.t_ns == t_ns))
            .map(|(id, _)| *id)
            .collect();
        for fid in in_state {
            if let Some(meas) = self.linearize_slam_reobs(fid, t_ns)? {
                if self.gate_block(&meas)? {
                    accepted += 1;
                    self.mark_consumed(fid, t_ns);
                    blocks.push(meas);
                } else {
                    rejected += 1;
                }
            }
        }

        // --- candidate partition for out-of-state tracks
        let mut msckf_used = 0usize;
        let slam_in_state = self.tracks.values().filter(|t| t.in_state).count();
        let mut slam_budget = self.cfg.max_slam.saturating_sub(slam_in_state);
        let candidate_ids: Vec<FeatureId> =
            self.tracks.iter().filter(|(_, t)| !t.in_state).map(|(id, _)| *id).collect();
        let mut delayed: Vec<(FeatureId, V3<T>, Vec<TrackObs>)> = Vec::new();
        for fid in candidate_ids {
            let (window_obs, track_alive, span) = {
                let t = &self.tracks[&fid];
                let wobs: Vec<TrackObs> = t
                    .obs
                    .iter()
                    .copied()
                    .filter(|o| window.contains(&o.t_ns) && o.t_ns > t.consumed_until)
                    .collect();
                (wobs, t.obs.last().map(|o| o.t_ns) == Some(t_ns), t.obs.len())
            };
            if window_obs.len() < 2 {
                continue;
            }
            let matured = span >= self.cfg.num_clones && track_alive;
            if matured && slam_budget > 0 && matches!(self.cfg.engine, EngineKind::Sqrt(_)) {
                if let Some(point) = self.try_triangulate(&window_obs) {
                    slam_budget -= 1;
                    delayed.push((fid, point, window_obs));
                    continue;
                }
            }
            // terminal or overflowing tracks become stateless constraints
            let terminal = !track_alive;
            if (terminal || span >= self.cfg.num_clones)
                && msckf_used < self.cfg.max_msckf
                && window_obs.len() >= (self.cfg.min_msckf_obs.max(3))
            {
                if let Some(meas) = self.build_msckf_block(&window_obs)? {
                    if self.gate_block(&meas)? {
                        accepted += 1;
                        msckf_used += 1;
                        self.mark_consumed(fid, t_ns);
                        blocks.push(meas);
                    } else {
                        rejected += 1;
                        self.mark_consumed(fid, t_ns);
                    }
                }
            }
            // everything else stays deferred for a later frame
        }

        // --- delayed initialization extends the state; do it after all
        // H blocks against the pre-extension dimension are built
        for (fid, point, wobs) in delayed {
            match self.delayed_init_feature(fid, point, &wobs)? {
                Some(gamma) => {
                    if self.gate_block(&gamma)? {
                        accepted += 1;
                        blocks.push(gamma);
                    } else {
                        rejected += 1;
                    }
                    self.tracks.get_mut(&fid).unwrap().in_state = true;
                    self.mark_consumed(fid, t_ns);
                }
                None => {
                    self.tracks.get_mut(&fid).unwrap().in_state = true;
                    self.mark_consumed(fid, t_ns);
                }
            }
        }

        let n = self.state.err_dim();
        let _ = n_before_init;
        let stacked = assemble_update(&blocks, n);
        let rows = stacked.rows();
        let (flops_used, cond_c) = match self.cfg.engine {
            EngineKind::Sqrt(Backend::Llt) => {
                let info = self.state.update_llt_ext(&stacked, self.cfg.track_cond)?;
                (info.flops, info.cond_c)
            }
            EngineKind::Sqrt(b) => {
                let info = self.state.update_with(&stacked, b)?;
                (info.flops, info.cond_c)
            }
            EngineKind::DenseEkf => {
                if rows > 0 {
                    let p = self.dense_cov.take().unwrap();
                    let (p2, dx) = dense::joseph_update(
                        &p,
                        &stacked.jacobian,
                        &stacked.residual,
                        &stacked.sigmas,
                    )
                    .map_err(SrfError::Kernel)?;
                    self.dense_cov = Some(p2);
                    self.state.apply_correction(&dx);
                } else if self.dense_cov.is_none() {
                    unreachable!()
                }
                (0, f64::NAN)
            }
            EngineKind::InfoSqrt => {
                let cond = self.info_update(&stacked)?;
                (0, cond)
            }
        };
        Ok(UpdateDiag {
            t_ns,
            rows,
            state_dim: n,
            cond_c,
            flops: flops_used,
            accepted,
            rejected,
        })
    }

    fn mark_consumed(&mut self, fid: FeatureId, t_ns: i64) {
        if let Some(t) = self.tracks.get_mut(&fid) {
            t.consumed_until = t_ns;
        }
    }

    fn gate_block(&self, meas: &LinearizedMeasurement<T>) -> Result<bool, SrfError> {
        if self.cfg.force_accept {
            return Ok(true);
        }
        match self.cfg.engine {
            EngineKind::Sqrt(_) => {
                self.state.gate(meas, &self.chi2, self.cfg.chi2_inflation)
            }
            EngineKind::DenseEkf => {
                let p = self.dense_cov.as_ref().unwrap();
                let m = meas.rows();
                let pht = p.mul_tr(&meas.jacobian);
                let mut s = meas.jacobian.mul(&pht);
                for i in 0..m {
                    s[(i, i)] = s[(i, i)] + meas.sigmas[i] * meas.sigmas[i];
                }
                let sol = tri::solve_spd(&s, &Mat::col_vec(&meas.residual))
                    .map_err(SrfError::Kernel)?;
                let mut d = T::zero();
                for i in 0..m {
                    d = d + meas.residual[i] * sol[(i, 0)];
                }
                Ok(d.f64() <= self.cfg.chi2_inflation * self.chi2.threshold(m))
            }
            // the information fixture runs with forced decisions
            EngineKind::InfoSqrt => Ok(true),
        }
    }

    fn try_triangulate(&self, obs: &[TrackObs]) -> Option<V3<T>> {
        let mut poses: Vec<CamPose<T>> = Vec::new();
        let mut bearings: Vec<[T; 2]> = Vec::new();
        for o in obs {
            let pose = clone_cam_pose(&self.state, &self.cam, o.t_ns).ok()?;
            poses.push(pose);
            bearings.push(self.cam.pixel_to_normalized([T::of(o.uv[0]), T::of(o.uv[1])]));
        }
        triangulate(&poses, &bearings, self.cfg.parallax_floor_rad)
            .ok()
            .map(|t| t.point)
    }

    /// Stacked rows of one out-of-state track, nullspace-projected.
    fn build_msckf_block(
        &self,
        obs: &[TrackObs],
    ) -> Result<Option<LinearizedMeasurement<T>>, SrfError> {
        let point = match self.try_triangulate(obs) {
            Some(p) => p,
            None => return Ok(None),
        };
        let n = self.state.err_dim();
        let rows = 2 * obs.len();
        let mut h_x = Mat::<T>::zeros(rows, n);
        let mut h_f = Mat::<T>::zeros(rows, 3);
        let mut r = vec![T::zero(); rows];
        let mut pattern: Vec<std::ops::Range<usize>> = Vec::new();
        for (oi, o) in obs.iter().enumerate() {
            let pose = self
                .clone_pose_of(o.t_ns)
                .ok_or_else(|| SrfError::UnknownBlock(format!("clone {}", o.t_ns)))?;
            let lin = crate::vision::linearize_obs_global(
                &self.cam,
                pose,
                point,
                [T::of(o.uv[0]), T::of(o.uv[1])],
            );
            let (res, d_pose, d_feat) = match lin {
                Ok(v) => v,
                Err(_) => return Ok(None),
            };
            let range = self
                .state
                .block_err_range(BlockTag::Clone(o.t_ns))
                .ok_or_else(|| SrfError::UnknownBlock("clone range".into()))?;
            let s = T::of(o.sigma);
            for c in 0..2 {
                r[2 * oi + c] = res[c] / s;
            }
            for rr in 0..2 {
                for cc in 0..6 {
                    h_x[(2 * oi + rr, range.start + cc)] = d_pose[(rr, cc)] / s;
                }
                for cc in 0..3 {
                    h_f[(2 * oi + rr, cc)] = d_feat[(rr, cc)] / s;
                }
            }
            pattern.push(range);
        }
        let (gamma, big_gamma) = match msckf_project(&r, &h_x, &h_f) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        let m = gamma.len();
        Ok(Some(LinearizedMeasurement {
            residual: gamma,
            jacobian: big_gamma,
            sigmas: vec![T::one(); m],
            touched: LinearizedMeasurement::<T>::normalize_pattern(pattern),
        }))
    }

    fn linearize_slam_reobs(
        &self,
        fid: FeatureId,
        t_ns: i64,
    ) -> Result<Option<LinearizedMeasurement<T>>, SrfError> {
        let anchor = *self.feature_anchor.get(&fid).unwrap_or(&t_ns);
        let obs = match self.tracks.get(&fid).and_then(|t| t.obs.iter().find(|o| o.t_ns == t_ns))
        {
            Some(o) => *o,
            None => return Ok(None),
        };
        let fb = match self.state.blocks().iter().position(|b| b.tag == BlockTag::Feature(fid)) {
            Some(i) => i,
            None => return Ok(None),
        };
        let f_a = self.state.vec3_at(fb);
        let obs_pose = self
            .clone_pose_of(t_ns)
            .ok_or_else(|| SrfError::UnknownBlock("obs clone".into()))?;
        let anchor_pose = self
            .clone_pose_of(anchor)
            .ok_or_else(|| SrfError::UnknownBlock("anchor clone".into()))?;
        let lin = match linearize_obs(
            &self.cam,
            obs_pose,
            anchor_pose,
            f_a,
            [T::of(obs.uv[0]), T::of(obs.uv[1])],
        ) {
            Ok(l) => l,
            Err(_) => return Ok(None),
        };
        let n = self.state.err_dim();
        let mut h = Mat::<T>::zeros(2, n);
        let obs_range = self.state.block_err_range(BlockTag::Clone(t_ns)).unwrap();
        let anc_range = self.state.block_err_range(BlockTag::Clone(anchor)).unwrap();
        let f_range = self.state.block_err_range(BlockTag::Feature(fid)).unwrap();
        let s = T::of(obs.sigma);
        for rr in 0..2 {
            for cc in 0..6 {
                h[(rr, obs_range.start + cc)] = h[(rr, obs_range.start + cc)]
                    + lin.d_obs_pose[(rr, cc)] / s;
                h[(rr, anc_range.start + cc)] = h[(rr, anc_range.start + cc)]
                    + lin.d_anchor_pose[(rr, cc)] / s;
            }
            for cc in 0..3 {
                h[(rr, f_range.start + cc)] = lin.d_feat[(rr, cc)] / s;
            }
        }
        let pattern = LinearizedMeasurement::<T>::normalize_pattern(vec![
            obs_range,
            anc_range,
            f_range,
        ]);
        Ok(Some(LinearizedMeasurement {
            residual: vec![lin.residual[0] / s, lin.residual[1] / s],
            jacobian: h,
            sigmas: vec![T::one(); 2],
            touched: pattern,
        }))
    }

    fn delayed_init_feature(
        &mut self,
        fid: FeatureId,
        point_global: V3<T>,
        obs: &[TrackObs],
    ) -> Result<Option<LinearizedMeasurement<T>>, SrfError> {
        // anchor: newest clone observing the feature
        let anchor = obs.iter().map(|o| o.t_ns).max().unwrap();
        let anchor_pose = clone_cam_pose(&self.state, &self.cam, anchor)
            .map_err(|e| SrfError::UnknownBlock(format!("{e}")))?;
        let f_anchor = global_to_anchored(&anchor_pose, point_global);
        let n = self.state.err_dim();
        let rows = 2 * obs.len();
        let mut h_x = Mat::<T>::zeros(rows, n);
        let mut h_f = Mat::<T>::zeros(rows, 3);
        let mut r = vec![T::zero(); rows];
        let mut pattern: Vec<std::ops::Range<usize>> = Vec::new();
        let anc_imu_pose = self.clone_pose_of(anchor).unwrap();
        for (oi, o) in obs.iter().enumerate() {
            let obs_pose = self
                .clone_pose_of(o.t_ns)
                .ok_or_else(|| SrfError::UnknownBlock("clone".into()))?;
            let lin = match linearize_obs(
                &self.cam,
                obs_pose,
                anc_imu_pose,
                f_anchor,
                [T::of(o.uv[0]), T::of(o.uv[1])],
            ) {
                Ok(l) => l,
                Err(_) => return Ok(None),
            };
            let obs_range = self.state.block_err_range(BlockTag::Clone(o.t_ns)).unwrap();
            let anc_range = self.state.block_err_range(BlockTag::Clone(anchor)).unwrap();
            for c in 0..2 {
                r[2 * oi + c] = lin.residual[c];
            }
            for rr in 0..2 {
                for cc in 0..6 {
                    h_x[(2 * oi + rr, obs_range.start + cc)] = h_x
                        [(2 * oi + rr, obs_range.start + cc)]
                        + lin.d_obs_pose[(rr, cc)];
                    h_x[(2 * oi + rr, anc_range.start + cc)] = h_x
                        [(2 * oi + rr, anc_range.start + cc)]
                        + lin.d_anchor_pose[(rr, cc)];
                }
                for cc in 0..3 {
                    h_f[(2 * oi + rr, cc)] = lin.d_feat[(rr, cc)];
                }
            }
            pattern.push(obs_range);
            pattern.push(anc_range);
        }
        let sigmas = vec![T::of(obs[0].sigma); rows];
        let pattern = LinearizedMeasurement::<T>::normalize_pattern(pattern);
        let out = slam_delayed_init(
            &mut self.state,
            fid,
            f_anchor,
            &r,
            &h_x,
            &h_f,
            &sigmas,
            pattern,
        );
        match out {
            Ok(d) => {
                self.feature_anchor.insert(fid, anchor);
                Ok(d.nullspace_meas)
            }
            Err(_) => Ok(None),
        }
    }

    // ---- square-root information fixture internals ----

    fn info_propagate(&mut self, phi: &Mat<T>, wsq: &Mat<T>) -> Result<(), SrfError> {
        let r = self.info_factor.take().unwrap();
        let n = r.rows();
        // invert the leading block of phi through its normal equations
        let d = phi.rows();
        let gram = phi.tr_mul(phi);
        let phi_inv =
            tri::solve_spd(&gram, &phi.transpose()).map_err(SrfError::Kernel)?;
        let mut phi_inv_full = Mat::identity(n);
        phi_inv_full.set_block(0, 0, &phi_inv);
        // W^{-1/2}: inverse of the triangularized noise factor
        let wtri = tri::qr_triangularize(wsq).into_mat();
        let w_inv =
            tri::solve_upper(&wtri, &Mat::identity(d)).map_err(SrfError::Kernel)?;
        let r_phi = r.mul(&phi_inv_full);
        // stack [W^{-1/2}, 0; -R Phi^{-1} G, R Phi^{-1}] over (w, dx')
        let mut stack = Mat::zeros(d + n, d + n);
        stack.set_block(0, 0, &w_inv.transpose()); // any valid sqrt of W^{-1}
        let rg = r_phi.block(0, 0, n, d);
        stack.set_block(d, 0, &rg.scale(-T::one()));
        stack.set_block(d, d, &r_phi);
        let tri_all = tri::qr_triangularize(&stack).into_mat();
        self.info_factor = Some(tri_all.block(d, d, n, n));
        Ok(())
    }

    fn info_clone(&mut self) -> Result<(), SrfError> {
        // pose copy as a soft equality constraint with tiny noise; keeps
        // the information factor full rank
        let r = self.info_factor.take().unwrap();
        let n = r.rows();
        let mut r_aug = Mat::zeros(n + 6, n + 6);
        // existing columns shift: new clone block inserted at 15..21
        for i in 0..n {
            for j in 0..n {
                let jj = if j < 15 { j } else { j + 6 };
                r_aug[(i, jj)] = r[(i, j)];
            }
        }
        let w = T::of(1.0 / 1e-7);
        for c in 0..6 {
            r_aug[(n + c, c)] = w;
            r_aug[(n + c, 15 + c)] = -w;
        }
        let tri_all = tri::qr_triangularize(&r_aug).into_mat();
        self.info_factor = Some(tri_all);
        Ok(())
    }

    fn info_marginalize(&mut self, drop_cols: &[usize]) -> Result<(), SrfError> {
        let r = self.info_factor.take().unwrap();
        let n = r.rows();
        let keep: Vec<usize> = (0..n).filter(|c| !drop_cols.contains(c)).collect();
        // permute victims first, re-triangularize, drop the leading block
        let mut perm = Mat::zeros(n, n);
        for (j, &c) in drop_cols.iter().chain(keep.iter()).enumerate() {
            for i in 0..n {
                perm[(i, j)] = r[(i, c)];
            }
        }
        let tri_all = tri::qr_triangularize(&perm).into_mat();
        let k = drop_cols.len();
        self.info_factor = Some(tri_all.block(k, k, n - k, n - k));
        Ok(())
    }

    fn info_update(&mut self, meas: &LinearizedMeasurement<T>) -> Result<f64, SrfError> {
        let r = self.info_factor.take().unwrap();
        let n = r.rows();
        let cond = if self.cfg.track_cond {
            let c = tri::cond_triangular(&r, true);
            self.max_info_cond = self.max_info_cond.max(c);
            c
        } else {
            f64::NAN
        };
        if meas.rows() == 0 {
            self.info_factor = Some(r);
            return Ok(cond);
        }
        let (hw, rw) = {
            let m = meas.rows();
            let mut h = meas.jacobian.clone();
            let mut rz = meas.residual.clone();
            for i in 0..m {
                let inv = T::one() / meas.sigmas[i];
                rz[i] = rz[i] * inv;
                for j in 0..n {
                    h[(i, j)] = h[(i, j)] * inv;
                }
            }
            (h, rz)
        };
        let stacked = r.vstack(&hw);
        let r_new = tri::qr_triangularize(&stacked).into_mat();
        // dx = (R^T R)^{-1} H^T r: the numerically fragile solve pair this
        // fixture exists to exercise
        let rhs = hw.tr_mul_vec(&rw);
        let y = tri::solve_lower(&r_new.transpose(), &Mat::col_vec(&rhs))
            .map_err(SrfError::Kernel)?;
        let dx_m = tri::solve_upper(&r_new, &y).map_err(SrfError::Kernel)?;
        let dx: Vec<T> = (0..n).map(|i| dx_m[(i, 0)]).collect();
        self.state.apply_correction(&dx);
        self.info_factor = Some(r_new);
        Ok(cond)
    }
}

/// Re-express a global-frame feature block in the camera frame of an
/// anchor clone, transforming the factor columns accordingly.
fn convert_global_feature_to_anchored<T: Scalar>(
    state: &mut SqrtState<T>,
    cam: &CameraModel<T>,
    fid: FeatureId,
    anchor: CloneId,
) -> Result<(), SrfError> {
    let fb = state
        .blocks()
        .iter()
        .position(|b| b.tag == BlockTag::Feature(fid))
        .ok_or_else(|| SrfError::UnknownBlock(format!("feature {fid}")))?;
    let f_g = state.vec3_at(fb);
    let pose = clone_cam_pose(state, cam, anchor)
        .map_err(|e| SrfError::UnknownBlock(format!("{e}")))?;
    let f_a = global_to_anchored(&pose, f_g);
    let qi = state
        .blocks()
        .iter()
        .position(|b| b.tag == BlockTag::Clone(anchor) && b.kind == BlockKind::Quat)
        .unwrap();
    let r_a = state.quat_at(qi).rot();
    let p_a = state.vec3_at(qi + 1);
    // f_A = R_CI R_A (f_G - p_A) + p_IinC: linearize over (theta_A, p_A, f_G)
    let w = r_a.mul_vec(f_g - p_a);
    let d_th = cam.r_cam_imu.mul(crate::geom::M3::skew(w));
    let d_p = cam.r_cam_imu.mul(r_a).scale(-T::one());
    let d_fg = cam.r_cam_imu.mul(r_a);
    let a_range = state.block_err_range(BlockTag::Clone(anchor)).unwrap();
    let f_range = state.block_err_range(BlockTag::Feature(fid)).unwrap();
    let u = state.factor().clone();
    let rows = u.rows();
    let col = |start: usize, j: &crate::geom::M3<T>| -> Mat<T> {
        u.block(0, start, rows, 3).mul_tr(&j.to_mat())
    };
    let new_cols = col(a_range.start, &d_th)
        .add(&col(a_range.start + 3, &d_p))
        .add(&col(f_range.start, &d_fg));
    let mut factor = u;
    for i in 0..rows {
        for c in 0..3 {
            factor[(i, f_range.start + c)] = new_cols[(i, c)];
        }
    }
    let fs = f_range.start;
    let tail = factor.block(fs, fs, 3.min(rows - fs), factor.cols() - fs);
    let tail_tri = tri::triangularize_block(&tail);
    factor.set_block(fs, fs, &tail_tri);
    state.replace_factor(factor);
    state.set_vec3_at(fb, f_a);
    Ok(())
}
