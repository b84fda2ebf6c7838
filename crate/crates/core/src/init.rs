//! Feature-less dynamic initialization.
//!
//! Two stages: (i) a linear recovery of the minimal states (initial
//! velocity and local gravity) that never triangulates a 3D point — the
//! relative translation direction comes from an eigen-solve over epipolar
//! normals, and projecting the position constraints onto its orthogonal
//! complement eliminates the unknown scale; (ii) iterative square-root
//! refinement of the full keyframe states and key features, producing a
//! state and factor the filter can start from directly.

use crate::error::InitError;
use crate::geom::{so3_exp, Quat, M3, V3};
use crate::imu::{preintegrate, propagate_mean, transition_blocks, Gravity, ImuSample, NavState, NoiseSpec, Preintegration};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::srf::{BlockKind, BlockTag, LinearizedMeasurement, SqrtState};
use crate::tri;
use crate::vision::{
    linearize_obs_global, slam_delayed_init, triangulate, CamPose, CameraModel, FeatureTrack,
};

/// Minimal recovered state: local velocity plus gravity direction angles.
#[derive(Clone, Copy, Debug)]
pub struct MinimalInitState<T: Scalar> {
    pub v0: V3<T>,
    pub alpha: T,
    pub beta: T,
    pub gravity_mag: T,
}

impl<T: Scalar> MinimalInitState<T> {
    /// Gravity in the first IMU frame at the configured magnitude.
    pub fn gravity_local(&self) -> V3<T> {
        let (sa, ca) = (self.alpha.sin(), self.alpha.cos());
        let (sb, cb) = (self.beta.sin(), self.beta.cos());
        V3::new(ca * sb, sa * sb, cb) * self.gravity_mag
    }

    pub fn from_vectors(v0: V3<T>, g_raw: V3<T>, gravity_mag: T) -> Self {
        let g_dir = g_raw.normalized();
        MinimalInitState {
            v0,
            alpha: g_dir.y().atan2(g_dir.x()),
            beta: g_dir.z().max(-T::one()).min(T::one()).acos(),
            gravity_mag,
        }
    }
}

/// Running sum of epipolar-normal outer products.
#[derive(Clone, Debug)]
pub struct EpipolarAccumulator<T: Scalar> {
    pub m: M3<T>,
    pub count: usize,
}

impl<T: Scalar> Default for EpipolarAccumulator<T> {
    fn default() -> Self {
        EpipolarAccumulator { m: M3::zero(), count: 0 }
    }
}

impl<T: Scalar> EpipolarAccumulator<T> {
    /// Add one feature seen from two frames; both bearings must already be
    /// rotated into the reference frame.
    pub fn add_pair(&mut self, b1: V3<T>, b2: V3<T>) {
        let n = b1.cross(b2);
        self.m = self.m.add(M3::outer(n, n));
        self.count += 1;
    }

    pub fn trace(&self) -> T {
        self.m.0[0][0] + self.m.0[1][1] + self.m.0[2][2]
    }
}

/// Relative translation direction and its orthogonal complement.
#[derive(Clone, Debug)]
pub struct RelativeDirection<T: Scalar> {
    pub t: V3<T>,
    pub e: [V3<T>; 2],
    pub eigenvalues: [T; 3],
}

/// Eigen-solve of the accumulated normal matrix without the degeneracy
/// gate; returns the direction estimate and the eigenvalue-gap ratio.
pub fn direction_unchecked<T: Scalar>(
    acc: &EpipolarAccumulator<T>,
) -> (RelativeDirection<T>, f64) {
    let (vals, vecs) = tri::eig3_symmetric(acc.m);
    let lam_t = vals[0].f64();
    let lam_1 = vals[1].f64();
    let ratio = lam_1 / lam_t.max(1e-300 * vals[2].f64().max(1e-300));
    (RelativeDirection { t: vecs[0], e: [vecs[1], vecs[2]], eigenvalues: vals }, ratio)
}

/// Smallest-eigenvalue eigenvector of the accumulated normal matrix; the
/// two remaining eigenvectors span the plane orthogonal to the motion.
/// Fails when the eigenvalue gap marks the direction as unresolved (pure
/// rotation, or every epipolar plane containing the baseline).
pub fn relative_direction<T: Scalar>(
    acc: &EpipolarAccumulator<T>,
    degeneracy_ratio: f64,
) -> Result<RelativeDirection<T>, InitError> {
    if acc.count < 2 {
        return Err(InitError::InsufficientData(format!(
            "{} epipolar pairs",
            acc.count
        )));
    }
    let (dir, ratio) = direction_unchecked(acc);
    if !ratio.is_finite() || ratio < degeneracy_ratio {
        return Err(InitError::DegenerateGeometry(ratio));
    }
    Ok(dir)
}

/// Per-keyframe quantities entering the linear system (all expressed in
/// the first IMU frame of the window).
#[derive(Clone, Debug)]
pub struct KeyframeMotion<T: Scalar> {
    pub dt: T,
    /// Preintegrated position term for [t0, tk].
    pub alpha: V3<T>,
    /// Preintegrated velocity term for [t0, tk].
    pub beta: V3<T>,
    /// Rotation I_0 <- I_k.
    pub r_from_k: M3<T>,
}

/// One keyframe pair entering the linear system: indices into the motion
/// list plus the pair's own translation direction and projector.
#[derive(Clone, Debug)]
pub struct PairConstraint<T: Scalar> {
    pub i: usize,
    pub j: usize,
    pub dir: RelativeDirection<T>,
}

/// Solve the scale-eliminated linear system stacked over keyframe pairs
/// for the initial velocity and gravity. Each pair eliminates its own
/// unknown scale by projecting onto the complement of its translation
/// direction.
///
/// With the minimal three keyframes the stacked system carries an exact
/// one-dimensional null space: a joint (velocity, gravity) change can
/// reproduce uniformly rescaled baselines, which every projector is blind
/// to. The known gravity magnitude resolves that coordinate up to a
/// two-fold root ambiguity; both sphere intersections are returned
/// (hint-ranked) so the caller can disambiguate by refinement.
pub fn featureless_solve_candidates<T: Scalar>(
    motions: &[KeyframeMotion<T>],
    pairs: &[PairConstraint<T>],
    p_cam_in_imu: V3<T>,
    gravity_mag: T,
    cond_limit: f64,
) -> Result<Vec<MinimalInitState<T>>, InitError> {
    if motions.len() < 3 || pairs.len() < 3 {
        return Err(InitError::InsufficientData(format!(
            "{} keyframes, {} pairs",
            motions.len(),
            pairs.len()
        )));
    }
    let mut a = Mat::<T>::zeros(2 * pairs.len(), 6);
    let mut b = vec![T::zero(); 2 * pairs.len()];
    for (pi, pc) in pairs.iter().enumerate() {
        let (mi, mj) = (&motions[pc.i], &motions[pc.j]);
        let dt_d = mj.dt - mi.dt;
        let dt2_d = (mj.dt * mj.dt - mi.dt * mi.dt) * T::of(0.5);
        // rows of e^T A x = e^T b with A = -[dT I | 1/2 dT^2 I]
        let lever = mj.r_from_k.sub(mi.r_from_k).mul_vec(p_cam_in_imu);
        let rhs = mj.alpha - mi.alpha + lever;
        for (r, e) in pc.dir.e.iter().enumerate() {
            let row = 2 * pi + r;
            for c in 0..3 {
                a[(row, c)] = -e.0[c] * dt_d;
                a[(row, 3 + c)] = -e.0[c] * dt2_d;
            }
            b[row] = e.dot(rhs);
        }
    }
    let normal = a.tr_mul(&a);
    let rhs = a.tr_mul_vec(&b);
    let (vals, vecs) = tri::eig_symmetric(&normal);
    let lam_max = vals[5].f64().max(1e-300);
    // one weak direction is structural; a second marks true degeneracy
    // (constant-velocity straight-line motion)
    let cond_eff = lam_max / vals[1].f64().max(1e-300);
    if !cond_eff.is_finite() || cond_eff > cond_limit {
        return Err(InitError::IllConditioned(cond_eff));
    }
    // with a structurally weak direction, restrict the least squares to
    // the five stronger spectral directions and recover the last
    // coordinate from the gravity-magnitude constraint; otherwise solve
    // the full-rank system directly
    let structural_null = vals[0].f64() < 1e-5 * lam_max;
    let lo = if structural_null { 1 } else { 0 };
    let mut x_ls = vec![T::zero(); 6];
    for i in lo..6 {
        let u: Vec<T> = (0..6).map(|r| vecs[(r, i)]).collect();
        let coef = crate::mat::dot(&u, &rhs) / vals[i];
        for r in 0..6 {
            x_ls[r] = x_ls[r] + u[r] * coef;
        }
    }
    if !structural_null {
        let v0 = V3::new(x_ls[0], x_ls[1], x_ls[2]);
        let g_raw = V3::new(x_ls[3], x_ls[4], x_ls[5]);
        return Ok(vec![MinimalInitState::from_vectors(v0, g_raw, gravity_mag)]);
    }
    let u0: Vec<T> = (0..6).map(|r| vecs[(r, 0)]).collect();
    // fix the null coordinate so |g| matches: quadratic in lambda
    let g_ls = V3::new(x_ls[3], x_ls[4], x_ls[5]);
    let u_g = V3::new(u0[3], u0[4], u0[5]);
    let aa = u_g.dot(u_g);
    let bb = T::of(2.0) * g_ls.dot(u_g);
    let cc = g_ls.dot(g_ls) - gravity_mag * gravity_mag;
    let lambdas: Vec<T> = if aa.f64() < 1e-12 {
        vec![T::zero()]
    } else {
        let disc = bb * bb - T::of(4.0) * aa * cc;
        if disc.f64() >= 0.0 {
            let sq = disc.sqrt();
            vec![(-bb + sq) / (T::of(2.0) * aa), (-bb - sq) / (T::of(2.0) * aa)]
        } else {
            vec![T::zero()]
        }
    };
    // rank by alignment with the integrated specific force: over a short
    // window g ~ -beta/dT up to the (unknown) velocity change
    let last = motions.last().unwrap();
    let hint = -last.beta * (T::one() / last.dt.max(T::of(1e-6)));
    let mut cands: Vec<MinimalInitState<T>> = lambdas
        .iter()
        .map(|&l| {
            let v0 = V3::new(
                x_ls[0] + l * u0[0],
                x_ls[1] + l * u0[1],
                x_ls[2] + l * u0[2],
            );
            MinimalInitState::from_vectors(v0, g_ls + u_g * l, gravity_mag)
        })
        .collect();
    cands.sort_by(|a, b| {
        let sa = a.gravity_local().dot(hint).f64();
        let sb = b.gravity_local().dot(hint).f64();
        sb.partial_cmp(&sa).unwrap()
    });
    Ok(cands)
}

/// Best single candidate of [`featureless_solve_candidates`] by the
/// specific-force alignment ranking.
pub fn featureless_solve<T: Scalar>(
    motions: &[KeyframeMotion<T>],
    pairs: &[PairConstraint<T>],
    p_cam_in_imu: V3<T>,
    gravity_mag: T,
    cond_limit: f64,
) -> Result<MinimalInitState<T>, InitError> {
    featureless_solve_candidates(motions, pairs, p_cam_in_imu, gravity_mag, cond_limit)
        .map(|mut c| c.remove(0))
}

/// Keyframe timestamps chosen to equalize cumulative average parallax;
/// first and last frames are always included and the interior subset is
/// the exhaustive best-equalizer.
pub fn select_keyframes(
    tracks: &[FeatureTrack],
    imu: &[ImuSample],
    count: usize,
) -> Result<Vec<i64>, InitError> {
    let mut frames: Vec<i64> = tracks.iter().flat_map(|t| t.obs.iter().map(|o| o.t_ns)).collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.len() < count || count < 2 {
        return Err(InitError::InsufficientData(format!(
            "{} frames for {} keyframes",
            frames.len(),
            count
        )));
    }
    if let (Some(first), Some(last)) = (frames.first(), frames.last()) {
        let t0 = *first as f64 * 1e-9;
        let t1 = *last as f64 * 1e-9;
        if imu.is_empty() || imu[0].t > t0 + 1e-6 || imu.last().unwrap().t < t1 - 1e-6 {
            return Err(InitError::InsufficientData("imu does not cover window".into()));
        }
    }
    if frames.len() == count {
        return Ok(frames);
    }
    // average angular change of common bearings between consecutive frames
    let mut parallax = vec![0.0f64; frames.len() - 1];
    for (fi, w) in frames.windows(2).enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for tr in tracks {
            let a = tr.obs.iter().find(|o| o.t_ns == w[0]);
            let b = tr.obs.iter().find(|o| o.t_ns == w[1]);
            if let (Some(a), Some(b)) = (a, b) {
                let da = ((a.uv[0] - b.uv[0]).powi(2) + (a.uv[1] - b.uv[1]).powi(2)).sqrt();
                sum += da;
                n += 1;
            }
        }
        parallax[fi] = if n > 0 { sum / n as f64 } else { 0.0 };
    }
    let total: f64 = parallax.iter().sum();
    let cum: Vec<f64> = parallax
        .iter()
        .scan(0.0, |s, p| {
            *s += p;
            Some(*s)
        })
        .collect();
    // cumulative parallax at frame boundaries: frame 0 has 0
    let cum_at = |idx: usize| -> f64 {
        if idx == 0 {
            0.0
        } else {
            cum[idx - 1]
        }
    };
    let interior = count - 2;
    let candidates: Vec<usize> = (1..frames.len() - 1).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut chosen = vec![0usize; interior];
    fn search(
        cands: &[usize],
        start: usize,
        slot: usize,
        chosen: &mut Vec<usize>,
        eval: &mut dyn FnMut(&[usize]),
    ) {
        if slot == chosen.len() {
            eval(chosen);
            return;
        }
        for i in start..cands.len() {
            chosen[slot] = cands[i];
            search(cands, i + 1, slot + 1, chosen, eval);
        }
    }
    {
        let mut eval = |sel: &[usize]| {
            // squared deviation of segment parallax from the equal share
            let mut nodes = Vec::with_capacity(count);
            nodes.push(0usize);
            nodes.extend_from_slice(sel);
            nodes.push(frames.len() - 1);
            let share = total / (count - 1) as f64;
            let mut cost = 0.0;
            for w in nodes.windows(2) {
                let seg = cum_at(w[1]) - cum_at(w[0]);
                cost += (seg - share) * (seg - share);
            }
            if best.as_ref().map(|(c, _)| cost < *c).unwrap_or(true) {
                best = Some((cost, sel.to_vec()));
            }
        };
        search(&candidates, 0, 0, &mut chosen, &mut eval);
    }
    let (_, sel) = best.unwrap();
    let mut out = vec![frames[0]];
    out.extend(sel.iter().map(|&i| frames[i]));
    out.push(*frames.last().unwrap());
    Ok(out)
}

/// Tuning knobs for the initializer.
#[derive(Clone, Debug)]
pub struct InitConfig {
    pub gravity_mag: f64,
    pub degeneracy_ratio: f64,
    pub cond_limit: f64,
    pub max_iterations: usize,
    pub step_tol: f64,
    pub parallax_floor_rad: f64,
    pub max_features: usize,
    pub refine: bool,
    /// Prior std-devs for the first keyframe [roll/pitch, yaw, pos, vel,
    /// gyro bias, accel bias].
    pub prior_att_rp: f64,
    pub prior_att_yaw: f64,
    pub prior_pos: f64,
    pub prior_vel: f64,
    pub prior_bg: f64,
    pub prior_ba: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            gravity_mag: 9.81,
            degeneracy_ratio: 10.0,
            cond_limit: 1e9,
            max_iterations: 5,
            step_tol: 1e-6,
            parallax_floor_rad: 1.0f64.to_radians(),
            max_features: 50,
            refine: true,
            prior_att_rp: 0.5,
            prior_att_yaw: 1e-5,
            prior_pos: 1e-5,
            prior_vel: 3.0,
            prior_bg: 0.01,
            prior_ba: 0.05,
        }
    }
}

/// Full-state refinement output.
pub struct InitSolution<T: Scalar> {
    /// Keyframe states plus key features over the gravity-aligned frame.
    pub state: SqrtState<T>,
    pub keyframes: Vec<i64>,
    pub minimal: MinimalInitState<T>,
    pub features: Vec<u64>,
    pub eigenvalues: [f64; 3],
    pub iterations: usize,
    pub final_residual: f64,
    pub dropped_features: Vec<u64>,
}

/// Run the complete initialization pipeline over one window of IMU
/// samples and feature tracks, returning every surviving refined
/// candidate ranked by in-window fit.
pub fn initialize_candidates<T: Scalar>(
    imu: &[ImuSample],
    tracks: &[FeatureTrack],
    cam: &CameraModel<T>,
    noise: &NoiseSpec,
    bg_prior: V3<T>,
    ba_prior: V3<T>,
    keyframe_count: usize,
    cfg: &InitConfig,
) -> Result<Vec<InitSolution<T>>, InitError> {
    let keyframes = select_keyframes(tracks, imu, keyframe_count)?;
    let kf_times: Vec<f64> = keyframes.iter().map(|&t| t as f64 * 1e-9).collect();

    // preintegrations from the window start to every keyframe
    let mut to_kf: Vec<Preintegration<T>> = Vec::with_capacity(keyframes.len());
    for (k, &tk) in kf_times.iter().enumerate() {
        if k == 0 {
            // zero-length stand-in
            let samples = clip_imu(imu, tk, tk + 1e-4);
            let mut p = preintegrate(&samples, bg_prior, ba_prior, noise)
                .map_err(|_| InitError::InsufficientData("imu segment".into()))?;
            p.delta_r = M3::identity();
            p.alpha = V3::zero();
            p.beta = V3::zero();
            p.dt = 0.0;
            to_kf.push(p);
        } else {
            let samples = clip_imu(imu, kf_times[0], tk);
            let p = preintegrate(&samples, bg_prior, ba_prior, noise)
                .map_err(|_| InitError::InsufficientData("imu segment".into()))?;
            to_kf.push(p);
        }
    }

    // per-pair epipolar normals (bearings rotated into the first IMU
    // frame via the gyro-only preintegrated rotations and the extrinsics)
    let r_ic = cam.r_cam_imu.transpose();
    let nk = keyframes.len();
    let mut all_pairs: Vec<(PairConstraint<T>, f64)> = Vec::new();
    for ia in 0..nk {
        for ib in ia + 1..nk {
            let (ka, kb) = (keyframes[ia], keyframes[ib]);
            let r_0a = to_kf[ia].delta_r.transpose(); // I0 <- Ia
            let r_0b = to_kf[ib].delta_r.transpose();
            let mut acc = EpipolarAccumulator::<T>::default();
            for tr in tracks {
                let oa = tr.obs.iter().find(|o| o.t_ns == ka);
                let ob = tr.obs.iter().find(|o| o.t_ns == kb);
                if let (Some(oa), Some(ob)) = (oa, ob) {
                    let na = cam.pixel_to_normalized([T::of(oa.uv[0]), T::of(oa.uv[1])]);
                    let nb = cam.pixel_to_normalized([T::of(ob.uv[0]), T::of(ob.uv[1])]);
                    let b1 = r_0a.mul(r_ic).mul_vec(V3::new(na[0], na[1], T::one())).normalized();
                    let b2 = r_0b.mul(r_ic).mul_vec(V3::new(nb[0], nb[1], T::one())).normalized();
                    acc.add_pair(b1, b2);
                }
            }
            if acc.count < 2 {
                continue;
            }
            let (dir, ratio) = direction_unchecked(&acc);
            all_pairs.push((PairConstraint { i: ia, j: ib, dir }, ratio));
        }
    }
    if all_pairs.is_empty() {
        return Err(InitError::InsufficientData("no keyframe pairs with shared tracks".into()));
    }
    let resolved: Vec<PairConstraint<T>> = all_pairs
        .iter()
        .filter(|(_, r)| r.is_finite() && *r >= cfg.degeneracy_ratio)
        .map(|(p, _)| p.clone())
        .collect();
    // near-static windows resolve no direction anywhere; the scales are
    // then tiny and all pairs can be used with their arbitrary projectors
    let pairs: Vec<PairConstraint<T>> = if resolved.len() >= 3 {
        resolved
    } else {
        all_pairs.iter().map(|(p, _)| p.clone()).collect()
    };
    let diag_dir = pairs[0].dir.clone();

    let motions: Vec<KeyframeMotion<T>> = to_kf
        .iter()
        .map(|p| KeyframeMotion {
            dt: T::of(p.dt),
            alpha: p.alpha,
            beta: p.beta,
            r_from_k: p.delta_r.transpose(),
        })
        .collect();
    let p_cam_in_imu = -cam.r_cam_imu.transpose().mul_vec(cam.p_imu_in_cam);
    let candidates = featureless_solve_candidates(
        &motions,
        &pairs,
        p_cam_in_imu,
        T::of(cfg.gravity_mag),
        cfg.cond_limit,
    )?;

    // the gravity-sphere intersection is two-fold at the minimal keyframe
    // count: refine every candidate; in-window scores can tie exactly, so
    // the ranked list is returned for the caller to validate externally
    let mut solutions: Vec<InitSolution<T>> = Vec::new();
    let mut last_err: Option<InitError> = None;
    for minimal in &candidates {
        match refine(imu, tracks, cam, noise, bg_prior, ba_prior, &keyframes, minimal, cfg) {
            Ok(mut sol) => {
                sol.eigenvalues = [
                    diag_dir.eigenvalues[0].f64(),
                    diag_dir.eigenvalues[1].f64(),
                    diag_dir.eigenvalues[2].f64(),
                ];
                solutions.push(sol);
            }
            Err(e) => last_err = Some(e),
        }
    }
    if solutions.is_empty() {
        return Err(last_err.unwrap_or_else(|| InitError::InsufficientData("refine".into())));
    }
    let score = |s: &InitSolution<T>| {
        (-(s.features.len() as f64), s.final_residual / (s.features.len().max(1) as f64).sqrt())
    };
    solutions.sort_by(|a, b| score(a).partial_cmp(&score(b)).unwrap());
    Ok(solutions)
}

/// Single-solution form of [`initialize_candidates`]: the top-ranked
/// in-window candidate.
#[allow(clippy::too_many_arguments)]
pub fn initialize<T: Scalar>(
    imu: &[ImuSample],
    tracks: &[FeatureTrack],
    cam: &CameraModel<T>,
    noise: &NoiseSpec,
    bg_prior: V3<T>,
    ba_prior: V3<T>,
    keyframe_count: usize,
    cfg: &InitConfig,
) -> Result<InitSolution<T>, InitError> {
    initialize_candidates(imu, tracks, cam, noise, bg_prior, ba_prior, keyframe_count, cfg)
        .map(|mut v| v.remove(0))
}

/// Mean reprojection error of a refined solution against one frame beyond
/// the initialization window: the last keyframe state is propagated with
/// the IMU to the frame time and the retained features are projected.
/// Disambiguates refined candidates that tie inside the window.
pub fn score_against_frame<T: Scalar>(
    sol: &InitSolution<T>,
    imu: &[ImuSample],
    cam: &CameraModel<T>,
    noise: &NoiseSpec,
    frame_t: f64,
    frame_obs: &[(u64, f64, f64)],
) -> f64 {
    let nk = sol.keyframes.len();
    let t_last = *sol.keyframes.last().unwrap() as f64 * 1e-9;
    let last_nav = {
        let q = sol.state.quat_at(2 * (nk - 1));
        let base = sol.state.blocks()[2 * (nk - 1) + 1].mean_off;
        let m = sol.state.mean();
        NavState {
            q,
            p: V3::new(m[base], m[base + 1], m[base + 2]),
            v: V3::new(m[base + 3], m[base + 4], m[base + 5]),
            bg: V3::new(m[base + 6], m[base + 7], m[base + 8]),
            ba: V3::new(m[base + 9], m[base + 10], m[base + 11]),
        }
    };
    let seg: Vec<ImuSample> = imu
        .iter()
        .copied()
        .filter(|s| s.t >= t_last - 1e-9 && s.t <= frame_t + 1e-9)
        .collect();
    if seg.len() < 2 {
        return f64::INFINITY;
    }
    let pre = match preintegrate(&seg, last_nav.bg, last_nav.ba, noise) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    let gmag = sol.minimal.gravity_mag;
    let nav = propagate_mean(
        &last_nav,
        &pre,
        &Gravity(V3::new(T::zero(), T::zero(), -gmag)),
    );
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in sol.state.blocks() {
        if let BlockTag::Feature(fid) = b.tag {
            if let Some(&(_, u, v)) = frame_obs.iter().find(|o| o.0 == fid) {
                let f_g = V3::new(
                    sol.state.mean()[b.mean_off],
                    sol.state.mean()[b.mean_off + 1],
                    sol.state.mean()[b.mean_off + 2],
                );
                if let Ok((res, _, _)) = linearize_obs_global(
                    cam,
                    (nav.q.rot(), nav.p),
                    f_g,
                    [T::of(u), T::of(v)],
                ) {
                    total += (res[0].f64().powi(2) + res[1].f64().powi(2)).sqrt();
                    count += 1;
                }
            }
        }
    }
    if count < 3 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

fn clip_imu(imu: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let mut out: Vec<ImuSample> =
        imu.iter().copied().filter(|s| s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9).collect();
    if out.len() < 2 {
        // synthesize a two-sample stand-in from the nearest sample
        if let Some(s) = imu.first() {
            out = vec![
                ImuSample { t: t0, ..*s },
                ImuSample { t: t0 + 1e-4, ..*s },
            ];
        }
    }
    out
}

/// Gravity-aligned global frame: rotation taking global vectors into the
/// first IMU frame such that the local gravity maps to (0,0,-|g|).
fn gravity_aligned_q0<T: Scalar>(g_local: V3<T>) -> Quat<T> {
    let down = V3::new(T::zero(), T::zero(), -T::one());
    let gd = g_local.normalized();
    let axis = down.cross(gd);
    let s = axis.norm();
    let c = down.dot(gd);
    let r = if s.f64() < 1e-12 {
        if c > T::zero() {
            M3::identity()
        } else {
            so3_exp(V3::new(T::of(std::f64::consts::PI), T::zero(), T::zero()))
        }
    } else {
        let angle = s.f64().atan2(c.f64());
        so3_exp(axis.normalized() * T::of(angle))
    };
    // r maps -e_z to g_dir, i.e. takes G vectors into I0
    Quat::from_rot(r)
}

struct FeatureWork<T: Scalar> {
    id: u64,
    point: V3<T>,
    obs: Vec<(usize, [T; 2])>, // (keyframe index, undistorted pixel)
}

#[allow(clippy::too_many_arguments)]
fn refine<T: Scalar>(
    imu: &[ImuSample],
    tracks: &[FeatureTrack],
    cam: &CameraModel<T>,
    noise: &NoiseSpec,
    bg_prior: V3<T>,
    ba_prior: V3<T>,
    keyframes: &[i64],
    minimal: &MinimalInitState<T>,
    cfg: &InitConfig,
) -> Result<InitSolution<T>, InitError> {
    let kf_times: Vec<f64> = keyframes.iter().map(|&t| t as f64 * 1e-9).collect();
    let nk = keyframes.len();
    let gravity = Gravity::<T>(V3::new(T::zero(), T::zero(), -T::of(cfg.gravity_mag)));

    // IMU sample slices between consecutive keyframes, re-preintegrated at
    // every relinearization with the current bias estimates
    let segments: Vec<Vec<ImuSample>> = (1..nk)
        .map(|k| clip_imu(imu, kf_times[k - 1], kf_times[k]))
        .collect();

    // keyframe state seed from the minimal solve in the gravity-aligned
    // frame
    let q0 = gravity_aligned_q0(minimal.gravity_local());
    let r0 = q0.rot(); // I0 <- G
    let mut x0 = NavState {
        q: q0,
        p: V3::zero(),
        v: r0.transpose().mul_vec(minimal.v0),
        bg: bg_prior,
        ba: ba_prior,
    };

    let parts: Vec<(BlockKind, BlockTag)> = keyframes
        .iter()
        .flat_map(|&k| {
            [(BlockKind::Quat, BlockTag::Clone(k)), (BlockKind::Lin(12), BlockTag::Clone(k))]
        })
        .collect();
    let sig = [
        cfg.prior_att_rp,
        cfg.prior_att_rp,
        cfg.prior_att_yaw,
        cfg.prior_pos,
        cfg.prior_pos,
        cfg.prior_pos,
        cfg.prior_vel,
        cfg.prior_vel,
        cfg.prior_vel,
        cfg.prior_bg,
        cfg.prior_bg,
        cfg.prior_bg,
        cfg.prior_ba,
        cfg.prior_ba,
        cfg.prior_ba,
    ];

    // propagate the keyframe chain from x0: the preintegration acts as
    // hard propagation, so the chain (means, per-step transitions and the
    // joint factor) is a function of the first keyframe state alone
    struct Chain<T: Scalar> {
        navs: Vec<NavState<T>>,
        /// d x_k / d x_0 through the step transitions.
        jac_from_0: Vec<Mat<T>>,
        state: SqrtState<T>,
    }
    let build_chain = |x0: &NavState<T>, head_factor: &Mat<T>| -> Result<Chain<T>, InitError> {
        let mut factor = Mat::<T>::zeros(15 * nk, 15 * nk);
        factor.set_block(0, 0, head_factor);
        let mut navs = vec![*x0];
        let mut jac_from_0 = vec![Mat::<T>::identity(15)];
        let mut mean: Vec<T> = x0.to_mean();
        let mut nav = *x0;
        for k in 1..nk {
            let pre = preintegrate(&segments[k - 1], nav.bg, nav.ba, noise)
                .map_err(|_| InitError::InsufficientData("imu segment".into()))?;
            let (phi, wsq) = transition_blocks(&nav, &pre);
            nav = propagate_mean(&nav, &pre, &gravity);
            navs.push(nav);
            jac_from_0.push(phi.mul(&jac_from_0[k - 1]));
            mean.extend_from_slice(&nav.to_mean());
            let prev = 15 * (k - 1);
            let cur = 15 * k;
            let rows = 15 * k;
            let ublock = factor.block(0, prev, rows, 15);
            let newcols = ublock.mul_tr(&phi);
            factor.set_block(0, cur, &newcols);
            let wtri = tri::qr_triangularize(&wsq).into_mat();
            factor.set_block(cur, cur, &wtri);
        }
        Ok(Chain { navs, jac_from_0, state: SqrtState::from_blocks(&parts, mean, factor) })
    };

    // gather per-feature keyframe observations once
    let mut feats: Vec<FeatureWork<T>> = Vec::new();
    let mut dropped: Vec<u64> = Vec::new();
    for tr in tracks {
        if feats.len() >= cfg.max_features {
            break;
        }
        let mut obs: Vec<(usize, [T; 2])> = Vec::new();
        for (k, &tk) in keyframes.iter().enumerate() {
            if let Some(o) = tr.obs.iter().find(|o| o.t_ns == tk) {
                obs.push((k, [T::of(o.uv[0]), T::of(o.uv[1])]));
            }
        }
        if obs.len() >= 2 {
            feats.push(FeatureWork { id: tr.id, point: V3::zero(), obs });
        }
    }
    if feats.is_empty() {
        return Err(InitError::InsufficientData("no multi-view tracks".into()));
    }

    // the free variables during iteration are the first keyframe state and
    // the (eliminated) features; a mild fixed prior anchors the gauge and
    // biases while the chain carries the inertial information exactly
    let x0_seed = x0;
    let mut head_prior = Mat::<T>::zeros(15, 15);
    for i in 0..15 {
        head_prior[(i, i)] = T::of(sig[i]);
    }
    let head_parts =
        [(BlockKind::Quat, BlockTag::Clone(keyframes[0])), (BlockKind::Lin(12), BlockTag::Clone(keyframes[0]))];

    let px_sigma = T::of(1.0);
    let mut iterations = 0usize;
    let mut last_residual = f64::INFINITY;
    let max_iter = if cfg.refine { cfg.max_iterations } else { 1 };
    let mut head_posterior = head_prior.clone();
    // backtracking state: on residual growth, retry from the previous
    // iterate with a halved step before declaring divergence
    let mut backtracks = 0usize;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let chain = build_chain(&x0, &head_prior)?;
        // triangulate from the current poses during the basin-entry
        // iterations; afterwards features follow the keyframe step by
        // back-substitution of their range-space systems
        let cur_poses: Vec<CamPose<T>> = chain
            .navs
            .iter()
            .map(|n| crate::vision::cam_pose_from_imu(cam, n.q.rot(), n.p))
            .collect();
        let retriangulate = true;
        let mut live = vec![true; feats.len()];
        for (fi, f) in feats.iter_mut().enumerate() {
            if !retriangulate {
                // keep the back-solved estimate unless it became invalid
                let behind = f.obs.iter().any(|(k, _)| {
                    cur_poses[*k].r_cg.mul_vec(f.point - cur_poses[*k].p_c).z().f64() <= 1e-3
                });
                if !behind {
                    continue;
                }
            }
            let poses: Vec<CamPose<T>> = f.obs.iter().map(|(k, _)| cur_poses[*k]).collect();
            let bearings: Vec<[T; 2]> =
                f.obs.iter().map(|(_, uv)| cam.pixel_to_normalized(*uv)).collect();
            match triangulate(&poses, &bearings, cfg.parallax_floor_rad) {
                Ok(t) => f.point = t.point,
                Err(_) => live[fi] = false,
            }
        }
        if !live.iter().any(|l| *l) {
            return Err(InitError::InsufficientData("no triangulated features".into()));
        }

        // reduced visual system over the first keyframe state: pose rows
        // chain through d x_k / d x_0
        let mut bottom_blocks: Vec<LinearizedMeasurement<T>> = Vec::new();
        let mut residual_sq = 0.0f64;
        for (fi, f) in feats.iter().enumerate() {
            if !live[fi] {
                continue;
            }
            let rows = 2 * f.obs.len();
            let mut h_red = Mat::<T>::zeros(rows, 15);
            let mut h_f = Mat::<T>::zeros(rows, 3);
            let mut r = vec![T::zero(); rows];
            let mut ok = true;
            for (oi, (k, uv)) in f.obs.iter().enumerate() {
                let nav_k = &chain.navs[*k];
                match linearize_obs_global(cam, (nav_k.q.rot(), nav_k.p), f.point, *uv) {
                    Ok((res, d_pose, d_feat)) => {
                        let inv = T::one() / px_sigma;
                        // 2x15 = (2x6 pose) * (6x15 chain rows)
                        let chain_pose = chain.jac_from_0[*k].block(0, 0, 6, 15);
                        let hrow = d_pose.mul(&chain_pose);
                        for c in 0..2 {
                            r[2 * oi + c] = res[c] * inv;
                        }
                        for rr in 0..2 {
                            for cc in 0..15 {
                                h_red[(2 * oi + rr, cc)] = hrow[(rr, cc)] * inv;
                            }
                            for cc in 0..3 {
                                h_f[(2 * oi + rr, cc)] = d_feat[(rr, cc)] * inv;
                            }
                        }
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            residual_sq += r.iter().map(|x| x.f64() * x.f64()).sum::<f64>();
            let split = match tri::permuted_qr_lower(&h_f) {
                Ok(s) => s,
                Err(_) => continue,
            };
            if rows > 3 {
                let gamma = split.q1.tr_mul_vec(&r);
                let big = split.q1.tr_mul(&h_red);
                bottom_blocks.push(LinearizedMeasurement {
                    residual: gamma,
                    jacobian: big,
                    sigmas: vec![T::one(); rows - 3],
                    touched: vec![0..15],
                });
            }
        }
        let resid = residual_sq.sqrt();
        // re-triangulation jitters the cost between iterations; count
        // only sustained growth toward divergence
        if resid > last_residual * 1.05 {
            backtracks += 1;
            if backtracks >= 3 {
                return Err(InitError::Diverged(iterations));
            }
        } else {
            backtracks = 0;
        }
        last_residual = resid.min(last_residual);
        if bottom_blocks.is_empty() {
            break;
        }
        // iterated update against the fixed prior on the first keyframe
        let mut stacked = LinearizedMeasurement::stack(&bottom_blocks, 15);
        let mut head_state = SqrtState::from_blocks(
            &head_parts,
            x0_seed.to_mean(),
            head_prior.clone(),
        );
        let xi = {
            let cur = SqrtState::from_blocks(&head_parts, x0.to_mean(), head_prior.clone());
            cur.boxminus(&head_state)
        };
        let shift = stacked.jacobian.mul_vec(&xi);
        for (rr, sh) in stacked.residual.iter_mut().zip(shift) {
            *rr = *rr + sh;
        }
        head_state.update_llt(&stacked).map_err(InitError::Srf)?;
        head_posterior = head_state.factor().clone();

        // applied step: capped in attitude so a poor linear seed cannot
        // fling the iteration out of the basin
        let step: Vec<T> = {
            let raw = NavState::from_mean(&head_state.mean()[0..16]);
            let a = SqrtState::from_blocks(&head_parts, raw.to_mean(), head_prior.clone());
            let b = SqrtState::from_blocks(&head_parts, x0.to_mean(), head_prior.clone());
            let mut step = a.boxminus(&b);
            let dth = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
            let cap = T::of(0.3);
            if dth > cap {
                let scale = cap / dth;
                for v in step.iter_mut() {
                    *v = *v * scale;
                }
            }
            step
        };
        let x0_new = {
            let mut st = SqrtState::from_blocks(&head_parts, x0.to_mean(), head_prior.clone());
            st.apply_correction(&step);
            NavState::from_mean(&st.mean()[0..16])
        };
        let step_norm = step.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        x0 = x0_new;
        if step_norm < cfg.step_tol {
            break;
        }
    }

    // reconstruct the full keyframe chain at the converged head state with
    // the head posterior as its leading factor block
    let chain = build_chain(&x0, &head_posterior)?;
    let mut state = chain.state;
    {
        // final feature positions from the converged poses
        let cur_poses: Vec<CamPose<T>> = chain
            .navs
            .iter()
            .map(|n| crate::vision::cam_pose_from_imu(cam, n.q.rot(), n.p))
            .collect();
        let mut kept_feats: Vec<FeatureWork<T>> = Vec::new();
        for f in feats.into_iter() {
            let poses: Vec<CamPose<T>> = f.obs.iter().map(|(k, _)| cur_poses[*k]).collect();
            let bearings: Vec<[T; 2]> =
                f.obs.iter().map(|(_, uv)| cam.pixel_to_normalized(*uv)).collect();
            match triangulate(&poses, &bearings, cfg.parallax_floor_rad) {
                Ok(t) => {
                    let mut f2 = f;
                    f2.point = t.point;
                    kept_feats.push(f2);
                }
                Err(_) => dropped.push(f.id),
            }
        }
        feats = kept_feats;
    }
    if feats.is_empty() {
        return Err(InitError::InsufficientData("no triangulated features".into()));
    }

    // append key features with their delayed-initialization covariance at
    // the converged linearization
    let kf_poses: Vec<(M3<T>, V3<T>)> = (0..nk)
        .map(|k| (state.quat_at(2 * k).rot(), state.vec3_at(2 * k + 1)))
        .collect();
    let mut kept: Vec<u64> = Vec::new();
    for f in &feats {
        let rows = 2 * f.obs.len();
        let mut h_k = Mat::<T>::zeros(rows, state.err_dim());
        let mut h_f = Mat::<T>::zeros(rows, 3);
        let mut r = vec![T::zero(); rows];
        let mut ok = true;
        for (oi, (k, uv)) in f.obs.iter().enumerate() {
            match linearize_obs_global(cam, kf_poses[*k], f.point, *uv) {
                Ok((res, d_pose, d_feat)) => {
                    for c in 0..2 {
                        r[2 * oi + c] = res[c];
                    }
                    for rr in 0..2 {
                        for cc in 0..6 {
                            h_k[(2 * oi + rr, 15 * k + cc)] = d_pose[(rr, cc)];
                        }
                        for cc in 0..3 {
                            h_f[(2 * oi + rr, cc)] = d_feat[(rr, cc)];
                        }
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            dropped.push(f.id);
            continue;
        }
        let sig = vec![px_sigma; rows];
        match slam_delayed_init(
            &mut state,
            f.id,
            f.point,
            &r,
            &h_k,
            &h_f,
            &sig,
            vec![0..15 * nk],
        ) {
            // the feature-free information was consumed by the iterations;
            // only the range part defines the appended block here
            Ok(_) => kept.push(f.id),
            Err(_) => dropped.push(f.id),
        }
    }

    Ok(InitSolution {
        state,
        keyframes: keyframes.to_vec(),
        minimal: *minimal,
        features: kept,
        eigenvalues: [0.0; 3],
        iterations,
        final_residual: last_residual,
        dropped_features: dropped,
    })
}
