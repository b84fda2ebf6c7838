//! Synthetic visual-inertial world: analytic trajectories, noisy
//! measurement synthesis, Monte Carlo execution and the metric suite.

use crate::geom::{so3_exp, Quat, M3, V3};
use crate::imu::{Gravity, ImuSample, NoiseSpec};
use crate::mat::Mat;
use crate::scalar::{Precision, Scalar};
use crate::srf::{Backend, CLONE_ERR_DIM};
use crate::tri;
use crate::vio::{EngineKind, Filter, VioConfig};
use crate::vision::{CameraModel, FeatureTrack, TrackCategory, TrackObs};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Analytic trajectory: per-axis position sinusoids plus a single-axis
/// orientation oscillation, so angular velocity and acceleration are exact.
#[derive(Clone, Debug)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub pos_base: V3<f64>,
    pub pos_amp: V3<f64>,
    pub pos_freq: V3<f64>,
    pub pos_phase: V3<f64>,
    /// Second position tone (high-frequency excitation on top of the
    /// sweep); zero amplitude disables it.
    pub pos_amp2: V3<f64>,
    pub pos_freq2: V3<f64>,
    pub pos_phase2: V3<f64>,
    pub rot_axis: V3<f64>,
    pub rot_amp: f64,
    pub rot_freq: f64,
    pub rot_phase: f64,
    pub features: FeatureCloud,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum FeatureCloud {
    /// Uniform inside an axis-aligned box.
    Box { center: V3<f64>, half: V3<f64>, count: usize },
    /// Uniform on the four vertical walls of a box.
    Walls { center: V3<f64>, half: V3<f64>, count: usize },
}

impl TrajectorySpec {
    /// Well-excited default: sinusoidal sway on all axes with rotation
    /// about a skewed axis, features on surrounding walls.
    pub fn excited(duration: f64, seed: u64) -> Self {
        TrajectorySpec {
            duration,
            pos_base: V3::of(0.0, 0.0, 1.5),
            pos_amp: V3::of(0.3, 0.3, 0.15),
            pos_freq: V3::of(0.6, 0.6, 0.45),
            pos_phase: V3::of(0.0, std::f64::consts::FRAC_PI_2, 0.9),
            pos_amp2: V3::of(0.02, 0.02, 0.06),
            pos_freq2: V3::of(2.6, 2.4, 2.8),
            pos_phase2: V3::of(0.3, 1.7, 0.8),
            rot_axis: V3::of(0.25, 0.2, 0.95).normalized(),
            rot_amp: 0.25,
            rot_freq: 1.2,
            rot_phase: 0.5,
            features: FeatureCloud::Walls {
                center: V3::of(0.0, 0.0, 1.5),
                half: V3::of(2.0, 2.0, 1.1),
                count: 600,
            },
            seed,
        }
    }

    pub fn position(&self, t: f64) -> V3<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        let p = |base: f64, a1: f64, f1: f64, ph1: f64, a2: f64, f2: f64, ph2: f64| {
            base + a1 * (tau * f1 * t + ph1).sin() + a2 * (tau * f2 * t + ph2).sin()
        };
        V3::of(
            p(self.pos_base.x(), self.pos_amp.x(), self.pos_freq.x(), self.pos_phase.x(), self.pos_amp2.x(), self.pos_freq2.x(), self.pos_phase2.x()),
            p(self.pos_base.y(), self.pos_amp.y(), self.pos_freq.y(), self.pos_phase.y(), self.pos_amp2.y(), self.pos_freq2.y(), self.pos_phase2.y()),
            p(self.pos_base.z(), self.pos_amp.z(), self.pos_freq.z(), self.pos_phase.z(), self.pos_amp2.z(), self.pos_freq2.z(), self.pos_phase2.z()),
        )
    }

    pub fn velocity(&self, t: f64) -> V3<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        let w = |a1: f64, f1: f64, ph1: f64, a2: f64, f2: f64, ph2: f64| {
            a1 * tau * f1 * (tau * f1 * t + ph1).cos() + a2 * tau * f2 * (tau * f2 * t + ph2).cos()
        };
        V3::of(
            w(self.pos_amp.x(), self.pos_freq.x(), self.pos_phase.x(), self.pos_amp2.x(), self.pos_freq2.x(), self.pos_phase2.x()),
            w(self.pos_amp.y(), self.pos_freq.y(), self.pos_phase.y(), self.pos_amp2.y(), self.pos_freq2.y(), self.pos_phase2.y()),
            w(self.pos_amp.z(), self.pos_freq.z(), self.pos_phase.z(), self.pos_amp2.z(), self.pos_freq2.z(), self.pos_phase2.z()),
        )
    }

    pub fn acceleration(&self, t: f64) -> V3<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        let a = |a1: f64, f1: f64, ph1: f64, a2: f64, f2: f64, ph2: f64| {
            -a1 * (tau * f1) * (tau * f1) * (tau * f1 * t + ph1).sin()
                - a2 * (tau * f2) * (tau * f2) * (tau * f2 * t + ph2).sin()
        };
        V3::of(
            a(self.pos_amp.x(), self.pos_freq.x(), self.pos_phase.x(), self.pos_amp2.x(), self.pos_freq2.x(), self.pos_phase2.x()),
            a(self.pos_amp.y(), self.pos_freq.y(), self.pos_phase.y(), self.pos_amp2.y(), self.pos_freq2.y(), self.pos_phase2.y()),
            a(self.pos_amp.z(), self.pos_freq.z(), self.pos_phase.z(), self.pos_amp2.z(), self.pos_freq2.z(), self.pos_phase2.z()),
        )
    }

    fn rot_angle(&self, t: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        self.rot_amp * (tau * self.rot_freq * t + self.rot_phase).sin()
    }

    fn rot_rate(&self, t: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        self.rot_amp * tau * self.rot_freq * (tau * self.rot_freq * t + self.rot_phase).cos()
    }

    /// Global-to-IMU rotation.
    pub fn orientation(&self, t: f64) -> M3<f64> {
        so3_exp(-self.rot_axis * self.rot_angle(t))
    }

    /// Body angular rate consistent with [`orientation`].
    ///
    /// [`orientation`]: TrajectorySpec::orientation
    pub fn omega(&self, t: f64) -> V3<f64> {
        self.rot_axis * self.rot_rate(t)
    }

    pub fn generate_features(&self, rng: &mut Xoshiro256PlusPlus) -> Vec<V3<f64>> {
        match self.features {
            FeatureCloud::Box { center, half, count } => (0..count)
                .map(|_| {
                    V3::of(
                        center.x() + rng.gen_range(-half.x()..half.x()),
                        center.y() + rng.gen_range(-half.y()..half.y()),
                        center.z() + rng.gen_range(-half.z()..half.z()),
                    )
                })
                .collect(),
            FeatureCloud::Walls { center, half, count } => (0..count)
                .map(|_| {
                    let wall = rng.gen_range(0..4u8);
                    let u = rng.gen_range(-1.0..1.0);
                    let v = rng.gen_range(-1.0..1.0);
                    match wall {
                        0 => V3::of(center.x() + half.x(), center.y() + u * half.y(), center.z() + v * half.z()),
                        1 => V3::of(center.x() - half.x(), center.y() + u * half.y(), center.z() + v * half.z()),
                        2 => V3::of(center.x() + u * half.x(), center.y() + half.y(), center.z() + v * half.z()),
                        _ => V3::of(center.x() + u * half.x(), center.y() - half.y(), center.z() + v * half.z()),
                    }
                })
                .collect(),
        }
    }
}

/// Simulation parameters (defaults follow the simulation study: 400 Hz
/// IMU, 10 Hz camera, 11 clones, 100 tracked features, 40 MSCKF / 50 SLAM
/// budgets, and the listed noise densities).
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub noise: NoiseSpec,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub num_clones: usize,
    pub tracked_features: usize,
    pub max_msckf: usize,
    pub max_slam: usize,
    pub pixel_sigma: f64,
    pub seed: u64,
    pub bias_g0: V3<f64>,
    pub bias_a0: V3<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            noise: NoiseSpec { sigma_g: 2.0e-4, sigma_a: 5.0e-4, sigma_wg: 2.0e-5, sigma_wa: 4.0e-4 },
            imu_rate: 400.0,
            cam_rate: 10.0,
            num_clones: 11,
            tracked_features: 100,
            max_msckf: 40,
            max_slam: 50,
            pixel_sigma: 1.0,
            seed: 0,
            bias_g0: V3::of(0.002, -0.0015, 0.001),
            bias_a0: V3::of(0.02, 0.01, -0.015),
        }
    }
}

impl SimConfig {
    pub fn assert_valid(&self) {
        self.noise.assert_valid();
        assert!(self.imu_rate > 0.0 && self.cam_rate > 0.0);
        let ratio = self.imu_rate / self.cam_rate;
        assert!(
            (ratio - ratio.round()).abs() < 1e-9,
            "camera rate must divide the IMU rate"
        );
    }
}

/// Ground truth at one camera frame.
#[derive(Clone, Copy, Debug)]
pub struct TruthSample {
    pub t_ns: i64,
    pub q: Quat<f64>,
    pub p: V3<f64>,
    pub v: V3<f64>,
    pub bg: V3<f64>,
    pub ba: V3<f64>,
}

/// One camera frame of synthetic observations.
#[derive(Clone, Debug)]
pub struct FrameObs {
    pub t_ns: i64,
    pub obs: Vec<(u64, f64, f64)>,
}

/// Full synthetic dataset for one run.
#[derive(Clone, Debug)]
pub struct SimData {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameObs>,
    pub truth: Vec<TruthSample>,
    pub features: Vec<V3<f64>>,
}

pub fn t_to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

/// Forward-looking pinhole camera used by the synthetic studies: optical
/// z along IMU x, slight lever arm.
pub fn default_camera() -> CameraModel<f64> {
    let mut c = CameraModel::pinhole(450.0, 320.0, 240.0, 640, 480);
    c.r_cam_imu = M3::from_rows(
        V3::of(0.0, -1.0, 0.0),
        V3::of(0.0, 0.0, -1.0),
        V3::of(1.0, 0.0, 0.0),
    );
    c.p_imu_in_cam = V3::of(0.0, 0.0, 0.05);
    c
}

/// Generate IMU samples, visibility-culled pixel tracks and ground truth.
/// Deterministic for a fixed spec/config seed.
pub fn synthesize(spec: &TrajectorySpec, cfg: &SimConfig, cam: &CameraModel<f64>) -> SimData {
    cfg.assert_valid();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ spec.seed.rotate_left(17));
    let gravity = Gravity::<f64>::standard();
    let features = spec.generate_features(&mut rng);

    let dt = 1.0 / cfg.imu_rate;
    let n_imu = (spec.duration * cfg.imu_rate).round() as usize;
    let mut imu = Vec::with_capacity(n_imu + 1);
    let mut bg = cfg.bias_g0;
    let mut ba = cfg.bias_a0;
    let mut bias_track: Vec<(V3<f64>, V3<f64>)> = Vec::with_capacity(n_imu + 1);
    let normal = |r: &mut Xoshiro256PlusPlus| -> f64 { StandardNormal.sample(r) };
    for i in 0..=n_imu {
        let t = i as f64 * dt;
        let r = spec.orientation(t);
        let omega = spec.omega(t);
        let accel_body = r.mul_vec(spec.acceleration(t) - gravity.0);
        let ng = V3::of(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (cfg.noise.sigma_g / dt.sqrt());
        let na = V3::of(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (cfg.noise.sigma_a / dt.sqrt());
        bias_track.push((bg, ba));
        imu.push(ImuSample { t, gyro: omega + bg + ng, accel: accel_body + ba + na });
        bg = bg + V3::of(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * (cfg.noise.sigma_wg * dt.sqrt());
        ba = ba + V3::of(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * (cfg.noise.sigma_wa * dt.sqrt());
    }

    let frame_stride = (cfg.imu_rate / cfg.cam_rate).round() as usize;
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let mut active: Vec<u64> = Vec::new();
    for i in (0..=n_imu).step_by(frame_stride) {
        let t = i as f64 * dt;
        let r_ig = spec.orientation(t);
        let p = spec.position(t);
        let (bg_t, ba_t) = bias_track[i];
        truth.push(TruthSample {
            t_ns: t_to_ns(t),
            q: Quat::from_rot(r_ig),
            p,
            v: spec.velocity(t),
            bg: bg_t,
            ba: ba_t,
        });
        // visible set this frame
        let mut visible: Vec<(u64, f64, f64)> = Vec::new();
        for (fid, f) in features.iter().enumerate() {
            let f_imu = r_ig.mul_vec(*f - p);
            let f_cam = cam.r_cam_imu.mul_vec(f_imu) + cam.p_imu_in_cam;
            if f_cam.z() < 0.3 || f_cam.z() > 40.0 {
                continue;
            }
            if let Ok(px) = cam.project(f_cam) {
                if cam.in_view(px) {
                    visible.push((fid as u64, px[0], px[1]));
                }
            }
        }
        // persistence-first selection up to the budget, then lowest id
        let mut chosen: Vec<(u64, f64, f64)> = Vec::with_capacity(cfg.tracked_features);
        for &(fid, u, v) in &visible {
            if chosen.len() >= cfg.tracked_features {
                break;
            }
            if active.contains(&fid) {
                chosen.push((fid, u, v));
            }
        }
        for &(fid, u, v) in &visible {
            if chosen.len() >= cfg.tracked_features {
                break;
            }
            if !chosen.iter().any(|c| c.0 == fid) {
                chosen.push((fid, u, v));
            }
        }
        chosen.sort_by_key(|c| c.0);
        active = chosen.iter().map(|c| c.0).collect();
        let obs = chosen
            .into_iter()
            .map(|(fid, u, v)| {
                (
                    fid,
                    u + cfg.pixel_sigma * normal(&mut rng),
                    v + cfg.pixel_sigma * normal(&mut rng),
                )
            })
            .collect();
        frames.push(FrameObs { t_ns: t_to_ns(t), obs });
    }
    SimData { imu, frames, truth, features }
}

/// Convert a frame span into per-feature tracks (for the initializer).
pub fn tracks_in_window(data: &SimData, t0_ns: i64, t1_ns: i64, pixel_sigma: f64) -> Vec<FeatureTrack> {
    let mut map: std::collections::BTreeMap<u64, FeatureTrack> = std::collections::BTreeMap::new();
    for fr in &data.frames {
        if fr.t_ns < t0_ns || fr.t_ns > t1_ns {
            continue;
        }
        for &(fid, u, v) in &fr.obs {
            map.entry(fid)
                .or_insert_with(|| FeatureTrack { id: fid, obs: Vec::new(), category: TrackCategory::Deferred })
                .obs
                .push(TrackObs { t_ns: fr.t_ns, uv: [u, v], sigma: pixel_sigma });
        }
    }
    map.into_values().filter(|t| t.obs.len() >= 2).collect()
}

pub fn imu_in_window(data: &SimData, t0: f64, t1: f64) -> Vec<ImuSample> {
    data.imu.iter().copied().filter(|s| s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9).collect()
}

/// Per-run aggregate metrics.
#[derive(Clone, Debug, Default)]
pub struct RunMetrics {
    pub steps: Vec<StepMetric>,
    pub rmse_ori_deg: f64,
    pub rmse_pos_m: f64,
    pub mean_nees: f64,
    pub max_cond_c: f64,
    pub total_flops: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetric {
    pub t_ns: i64,
    pub ori_err_deg: f64,
    pub pos_err_m: f64,
    pub nees: f64,
    pub rows: usize,
    pub state_dim: usize,
    pub cond_c: f64,
    pub flops: u64,
    pub accepted: usize,
    pub rejected: usize,
}

impl RunMetrics {
    pub fn finalize(&mut self) {
        let n = self.steps.len().max(1) as f64;
        self.rmse_ori_deg =
            (self.steps.iter().map(|s| s.ori_err_deg * s.ori_err_deg).sum::<f64>() / n).sqrt();
        self.rmse_pos_m =
            (self.steps.iter().map(|s| s.pos_err_m * s.pos_err_m).sum::<f64>() / n).sqrt();
        let nees: Vec<f64> = self.steps.iter().map(|s| s.nees).filter(|x| x.is_finite()).collect();
        self.mean_nees = nees.iter().sum::<f64>() / nees.len().max(1) as f64;
        self.max_cond_c = self.steps.iter().map(|s| s.cond_c).fold(0.0, f64::max);
        self.total_flops = self.steps.iter().map(|s| s.flops).sum();
    }
}

/// NEES of an error vector against a square-root factor: e^T (U^T U)^{-1} e.
pub fn nees_from_factor<T: Scalar>(factor: &Mat<T>, err: &[T]) -> f64 {
    // solve U^T y = e, then nees = y^T y
    let ut = factor.transpose();
    match tri::solve_lower(&ut, &Mat::col_vec(err)) {
        Ok(y) => (0..err.len()).map(|i| y[(i, 0)].f64() * y[(i, 0)].f64()).sum(),
        Err(_) => f64::NAN,
    }
}

/// One estimator column of the study matrix.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorSpec {
    pub engine: EngineKind,
    pub precision: Precision,
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        let e = match self.engine {
            EngineKind::Sqrt(b) => format!("srf-{}", b.label()),
            EngineKind::DenseEkf => "ekf".to_string(),
            EngineKind::InfoSqrt => "srif".to_string(),
        };
        format!("{e}-{}", self.precision.label())
    }
}

/// Options for a filter run over synthesized data.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub vio: VioConfig,
    /// Std-devs used both to seed the initial perturbation and as the
    /// prior factor diagonal.
    pub prior_sigmas: [f64; 15],
    /// Draw the initial error from the prior (consistent initialization);
    /// otherwise start exactly at the truth.
    pub perturb_init: bool,
    pub compute_nees: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            vio: VioConfig::default(),
            prior_sigmas: [
                0.02, 0.02, 0.02, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.002, 0.002, 0.002,
                0.02, 0.02, 0.02,
            ],
            perturb_init: true,
            compute_nees: true,
        }
    }
}

/// Run one estimator over a synthesized dataset, starting from a
/// (possibly perturbed) truth state, and score it against ground truth.
pub fn run_filter<T: Scalar>(
    data: &SimData,
    cam64: &CameraModel<f64>,
    cfg: &SimConfig,
    opts: &RunOptions,
) -> RunMetrics {
    let start = std::time::Instant::now();
    let cam: CameraModel<T> = cam64.cast();
    let truth0 = data.truth[0];
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ 0xA5A5);
    let mut nav = crate::imu::NavState::<T> {
        q: truth0.q.cast(),
        p: truth0.p.cast(),
        v: truth0.v.cast(),
        bg: truth0.bg.cast(),
        ba: truth0.ba.cast(),
    };
    if opts.perturb_init {
        let mut dx = [0.0f64; 15];
        for (i, d) in dx.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *d = z * opts.prior_sigmas[i];
        }
        nav.q = nav.q.boxplus(V3::<f64>::of(dx[0], dx[1], dx[2]).cast());
        nav.p = nav.p + V3::<f64>::of(dx[3], dx[4], dx[5]).cast();
        nav.v = nav.v + V3::<f64>::of(dx[6], dx[7], dx[8]).cast();
        nav.bg = nav.bg + V3::<f64>::of(dx[9], dx[10], dx[11]).cast();
        nav.ba = nav.ba + V3::<f64>::of(dx[12], dx[13], dx[14]).cast();
    }
    let t0 = data.truth[0].t_ns as f64 * 1e-9;
    let mut filter = Filter::from_nav_prior(
        nav,
        &opts.prior_sigmas,
        cam,
        cfg.noise,
        t0,
        opts.vio.clone(),
    );
    // the initial frame is consumed as the first clone
    let mut metrics = RunMetrics::default();
    let truth_by_ns: std::collections::BTreeMap<i64, &TruthSample> =
        data.truth.iter().map(|t| (t.t_ns, t)).collect();
    for frame in &data.frames {
        let t = frame.t_ns as f64 * 1e-9;
        let obs: Vec<(u64, f64, f64)> = frame.obs.clone();
        let diag = match filter.process_frame(&data.imu, t, &obs) {
            Ok(d) => d,
            Err(_) => break,
        };
        let truth = truth_by_ns[&frame.t_ns];
        let nav_est = filter.nav();
        let ori_err = crate::geom::rotation_angle(
            nav_est.q.rot().cast::<f64>(),
            truth.q.rot(),
        )
        .to_degrees();
        let pos_err = (nav_est.p.map64() - truth.p).norm();
        let nees = if opts.compute_nees && matches!(opts.vio.engine, EngineKind::Sqrt(_)) {
            full_state_nees(&filter, data, &truth_by_ns, frame.t_ns)
        } else {
            f64::NAN
        };
        metrics.steps.push(StepMetric {
            t_ns: frame.t_ns,
            ori_err_deg: ori_err,
            pos_err_m: pos_err,
            nees,
            rows: diag.rows,
            state_dim: diag.state_dim,
            cond_c: diag.cond_c,
            flops: diag.flops,
            accepted: diag.accepted,
            rejected: diag.rejected,
        });
    }
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    if matches!(opts.vio.engine, EngineKind::InfoSqrt) {
        metrics.max_cond_c = filter.max_info_cond;
    }
    metrics.finalize();
    if matches!(opts.vio.engine, EngineKind::InfoSqrt) {
        metrics.max_cond_c = filter.max_info_cond;
    }
    metrics
}

/// Full-error-state NEES: navigation, clone and (anchored) feature blocks
/// against the reconstructed covariance.
fn full_state_nees<T: Scalar>(
    filter: &Filter<T>,
    data: &SimData,
    truth_by_ns: &std::collections::BTreeMap<i64, &TruthSample>,
    t_now_ns: i64,
) -> f64 {
    use crate::srf::{BlockKind, BlockTag};
    let st = &filter.state;
    let n = st.err_dim();
    let mut err = vec![T::zero(); n];
    let blocks = st.blocks().to_vec();
    // nav block against the current frame's truth
    let nav_truth = truth_by_ns[&t_now_ns];
    let nav_est = filter.nav();
    let dth = -crate::geom::so3_log(
        nav_est.q.rot().cast::<f64>().mul(nav_truth.q.rot().transpose()),
    );
    for c in 0..3 {
        err[c] = T::of(dth.0[c]);
        err[3 + c] = T::of((nav_est.p.map64() - nav_truth.p).0[c]);
        err[6 + c] = T::of((nav_est.v.map64() - nav_truth.v).0[c]);
        err[9 + c] = T::of((nav_est.bg.map64() - nav_truth.bg).0[c]);
        err[12 + c] = T::of((nav_est.ba.map64() - nav_truth.ba).0[c]);
    }
    for (bi, b) in blocks.iter().enumerate() {
        match b.tag {
            BlockTag::Clone(ts) => {
                if b.kind != BlockKind::Quat {
                    continue;
                }
                let truth = match truth_by_ns.get(&ts) {
                    Some(t) => t,
                    None => return f64::NAN,
                };
                let q_est = st.quat_at(bi);
                let p_est = st.vec3_at(bi + 1);
                let dth = -crate::geom::so3_log(
                    q_est.rot().cast::<f64>().mul(truth.q.rot().transpose()),
                );
                for c in 0..3 {
                    err[b.err_off + c] = T::of(dth.0[c]);
                    err[b.err_off + 3 + c] = T::of((p_est.map64() - truth.p).0[c]);
                }
            }
            BlockTag::Feature(fid) => {
                let f_true = data.features[fid as usize];
                let anchor = match filter.anchor_of(fid) {
                    Some(a) => a,
                    None => return f64::NAN,
                };
                let truth = match truth_by_ns.get(&anchor) {
                    Some(t) => t,
                    None => return f64::NAN,
                };
                // true anchored coordinates via the true anchor pose
                let cam64 = filter.cam.cast::<f64>();
                let pose = crate::vision::cam_pose_from_imu(&cam64, truth.q.rot(), truth.p);
                let f_a_true = crate::vision::global_to_anchored(&pose, f_true);
                let f_est = st.vec3_at(bi);
                for c in 0..3 {
                    err[b.err_off + c] = T::of((f_est.map64() - f_a_true).0[c]);
                }
            }
            _ => {}
        }
    }
    // the newest clone is an exact copy of the navigation pose, leaving
    // the joint covariance singular along the duplicated direction until
    // the next propagation; evaluate NEES on the complement
    let newest_clone = blocks
        .iter()
        .filter(|b| matches!(b.tag, BlockTag::Clone(_)))
        .min_by_key(|b| match b.tag {
            BlockTag::Clone(ts) => -ts,
            _ => 0,
        });
    let drop: Vec<usize> = match newest_clone {
        Some(b) => (b.err_off..b.err_off + CLONE_ERR_DIM).collect(),
        None => Vec::new(),
    };
    let err_sub: Vec<T> = err
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, v)| *v)
        .collect();
    let p = st.covariance();
    let p_sub = crate::dense::marginal_cov(&p, &drop);
    match tri::solve_spd(&p_sub, &Mat::col_vec(&err_sub)) {
        Ok(sol) => (0..err_sub.len()).map(|i| (err_sub[i] * sol[(i, 0)]).f64()).sum(),
        Err(_) => f64::NAN,
    }
}

/// Aggregate of a Monte Carlo batch for one estimator.
#[derive(Clone, Debug)]
pub struct MonteCarloSummary {
    pub label: String,
    pub trials: usize,
    pub failures: usize,
    pub mean_rmse_ori_deg: f64,
    pub mean_rmse_pos_m: f64,
    pub mean_nees: f64,
    pub max_cond_c: f64,
    pub mean_wall_s: f64,
    pub per_trial: Vec<RunMetrics>,
}

/// Independent seeded runs of the full filter for each estimator spec.
pub fn run_monte_carlo(
    spec: &TrajectorySpec,
    cfg: &SimConfig,
    cam: &CameraModel<f64>,
    estimators: &[EstimatorSpec],
    opts: &RunOptions,
    trials: usize,
) -> Vec<MonteCarloSummary> {
    assert!(trials >= 1);
    let mut out = Vec::new();
    for est in estimators {
        let mut summary = MonteCarloSummary {
            label: est.label(),
            trials,
            failures: 0,
            mean_rmse_ori_deg: 0.0,
            mean_rmse_pos_m: 0.0,
            mean_nees: 0.0,
            max_cond_c: 0.0,
            mean_wall_s: 0.0,
            per_trial: Vec::new(),
        };
        for trial in 0..trials {
            let mut cfg_t = cfg.clone();
            cfg_t.seed = cfg.seed.wrapping_add(trial as u64);
            let mut spec_t = spec.clone();
            spec_t.seed = spec.seed.wrapping_add(trial as u64);
            let data = synthesize(&spec_t, &cfg_t, cam);
            let mut opts_t = opts.clone();
            opts_t.vio.engine = est.engine;
            let metrics = match est.precision {
                Precision::Double => run_filter::<f64>(&data, cam, &cfg_t, &opts_t),
                Precision::Single => run_filter::<f32>(&data, cam, &cfg_t, &opts_t),
            };
            if metrics.steps.len() < data.frames.len() {
                summary.failures += 1;
            }
            summary.mean_rmse_ori_deg += metrics.rmse_ori_deg;
            summary.mean_rmse_pos_m += metrics.rmse_pos_m;
            summary.mean_nees += metrics.mean_nees;
            summary.max_cond_c = summary.max_cond_c.max(metrics.max_cond_c);
            summary.mean_wall_s += metrics.wall_time_s;
            summary.per_trial.push(metrics);
        }
        let n = trials as f64;
        summary.mean_rmse_ori_deg /= n;
        summary.mean_rmse_pos_m /= n;
        summary.mean_nees /= n;
        summary.mean_wall_s /= n;
        out.push(summary);
    }
    out
}

/// Similarity (or rigid) alignment of an estimated trajectory onto ground
/// truth: returns (scale, rotation, translation) minimizing
/// sum |gt - (s R est + t)|^2.
pub fn align_umeyama(est: &[V3<f64>], gt: &[V3<f64>], with_scale: bool) -> (f64, M3<f64>, V3<f64>) {
    assert_eq!(est.len(), gt.len());
    assert!(est.len() >= 3);
    let n = est.len() as f64;
    let mean = |pts: &[V3<f64>]| pts.iter().fold(V3::zero(), |a, p| a + *p) * (1.0 / n);
    let me = mean(est);
    let mg = mean(gt);
    let mut cov = M3::<f64>::zero();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = *e - me;
        let dg = *g - mg;
        cov = cov.add(M3::outer(dg, de));
        var_e += de.dot(de);
    }
    cov = cov.scale(1.0 / n);
    var_e /= n;
    // SVD of cov via the symmetric eigen-decompositions of cov^T cov
    let ctc = cov.transpose().mul(cov);
    let (vals, vecs) = tri::eig3_symmetric(ctc);
    // descending singular values
    let sv: Vec<f64> = vals.iter().rev().map(|l| l.max(0.0).sqrt()).collect();
    let v_cols = [vecs[2], vecs[1], vecs[0]];
    let mut u_cols = [V3::<f64>::zero(); 3];
    for i in 0..3 {
        let cv = cov.mul_vec(v_cols[i]);
        u_cols[i] = if sv[i] > 1e-12 { cv * (1.0 / sv[i]) } else { V3::zero() };
    }
    // complete degenerate columns orthonormally
    if sv[2] <= 1e-12 {
        u_cols[2] = u_cols[0].cross(u_cols[1]).normalized();
    }
    let build = |cols: &[V3<f64>; 3]| {
        M3([
            [cols[0].x(), cols[1].x(), cols[2].x()],
            [cols[0].y(), cols[1].y(), cols[2].y()],
            [cols[0].z(), cols[1].z(), cols[2].z()],
        ])
    };
    let u = build(&u_cols);
    let v = build(&v_cols);
    let det_uv = {
        let r = u.mul(v.transpose());
        r.0[0][0] * (r.0[1][1] * r.0[2][2] - r.0[1][2] * r.0[2][1])
            - r.0[0][1] * (r.0[1][0] * r.0[2][2] - r.0[1][2] * r.0[2][0])
            + r.0[0][2] * (r.0[1][0] * r.0[2][1] - r.0[1][1] * r.0[2][0])
    };
    let mut d = M3::<f64>::identity();
    if det_uv < 0.0 {
        d.0[2][2] = -1.0;
    }
    let r = u.mul(d).mul(v.transpose());
    let s = if with_scale {
        let trace_ds = sv[0] + sv[1] + d.0[2][2] * sv[2];
        trace_ds / var_e.max(1e-300)
    } else {
        1.0
    };
    let t = mg - r.mul_vec(me) * s;
    (s, r, t)
}

/// Absolute trajectory error after alignment; scale error follows the
/// 100*(max(s,1/s)-1) convention.
pub fn ate_after_alignment(
    est: &[V3<f64>],
    gt: &[V3<f64>],
    with_scale: bool,
) -> (f64, f64) {
    let (s, r, t) = align_umeyama(est, gt, with_scale);
    let mut sq = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let m = r.mul_vec(*e) * s + t;
        sq += (m - *g).dot(m - *g);
    }
    let ate = (sq / est.len() as f64).sqrt();
    let scale_err = 100.0 * (s.max(1.0 / s) - 1.0);
    (ate, scale_err)
}

/// One row of the update benchmark table.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub backend: Backend,
    pub flops: u64,
    pub median_ns: u64,
}

/// Measure per-update flops and median wall time over a grid of state and
/// measurement sizes.
pub fn bench_updates(
    n_grid: &[usize],
    m_grid: &[usize],
    backends: &[Backend],
    reps: usize,
    seed: u64,
) -> Vec<BenchRow> {
    use crate::srf::{BlockTag as BT, LinearizedMeasurement as LM, SqrtState as SS};
    let mut rows = Vec::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for &n in n_grid {
        for &m in m_grid {
            // shared random system
            let a = Mat::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
                .add(&Mat::identity(n).scale(3.0));
            let u = tri::qr_triangularize(&a).into_mat();
            let mean = vec![0.0f64; n];
            let h = Mat::<f64>::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let r: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let meas = LM::new_dense(r, h, 1.0);
            for &backend in backends {
                let mut flops_count = 0u64;
                let mut times: Vec<u64> = Vec::with_capacity(reps);
                for _ in 0..reps.max(1) {
                    let mut st = SS::from_blocks(
                        &[(crate::srf::BlockKind::Lin(n), BT::Generic(0))],
                        mean.clone(),
                        u.clone(),
                    );
                    let t0 = std::time::Instant::now();
                    let info = st.update_with(&meas, backend).expect("bench update");
                    times.push(t0.elapsed().as_nanos() as u64);
                    flops_count = info.flops;
                }
                times.sort_unstable();
                rows.push(BenchRow {
                    n,
                    m,
                    backend,
                    flops: flops_count,
                    median_ns: times[times.len() / 2],
                });
            }
        }
    }
    rows
}
