//! Initializer-to-filter handoff: the refined window state seeds the
//! sliding-window filter directly, including key features.

mod common;

use srfvio::geom::{M3, V3};
use srfvio::imu::NoiseSpec;
use srfvio::init::{initialize, InitConfig};
use srfvio::sim::*;
use srfvio::vio::{Filter, VioConfig};
use srfvio::vision::CameraModel;

fn cam() -> CameraModel<f64> {
    let mut c = CameraModel::pinhole(450.0, 320.0, 240.0, 640, 480);
    c.r_cam_imu = M3::from_rows(
        V3::of(0.0, -1.0, 0.0),
        V3::of(0.0, 0.0, -1.0),
        V3::of(1.0, 0.0, 0.0),
    );
    c.p_imu_in_cam = V3::of(0.0, 0.0, 0.05);
    c
}

#[test]
fn init_seeds_filter_that_keeps_tracking() {
    let spec = TrajectorySpec::excited(8.0, 21);
    let cfg = SimConfig {
        cam_rate: 20.0,
        tracked_features: 50,
        num_clones: 10,
        max_msckf: 20,
        max_slam: 15,
        seed: 13,
        noise: NoiseSpec { sigma_g: 1e-6, sigma_a: 1e-6, sigma_wg: 1e-9, sigma_wa: 1e-9 },
        pixel_sigma: 0.02,
        bias_g0: V3::zero(),
        bias_a0: V3::zero(),
        ..Default::default()
    };
    let data = synthesize(&spec, &cfg, &cam());
    let w0 = 0.0;
    let w1 = 0.5;
    let tracks = tracks_in_window(&data, (w0 * 1e9) as i64, (w1 * 1e9) as i64, cfg.pixel_sigma);
    let imu = imu_in_window(&data, w0, w1);
    let sol = initialize::<f64>(
        &imu,
        &tracks,
        &cam(),
        &cfg.noise,
        V3::zero(),
        V3::zero(),
        5,
        &InitConfig::default(),
    )
    .expect("initialization");
    assert!(!sol.features.is_empty(), "no key features retained");

    let mut vio_cfg = VioConfig::default();
    vio_cfg.num_clones = cfg.num_clones;
    vio_cfg.max_slam = cfg.max_slam;
    vio_cfg.max_msckf = cfg.max_msckf;
    vio_cfg.pixel_sigma = cfg.pixel_sigma;
    vio_cfg.force_accept = true;
    let mut filter =
        Filter::from_init(sol, &tracks, cam(), cfg.noise, vio_cfg).expect("handoff");

    // continue over the rest of the sequence
    let mut est_traj: Vec<V3<f64>> = Vec::new();
    let mut gt_traj: Vec<V3<f64>> = Vec::new();
    let tmap: std::collections::BTreeMap<i64, &TruthSample> =
        data.truth.iter().map(|t| (t.t_ns, t)).collect();
    for frame in data.frames.iter().filter(|f| f.t_ns as f64 * 1e-9 > w1) {
        let t = frame.t_ns as f64 * 1e-9;
        filter
            .process_frame(&data.imu, t, &frame.obs)
            .unwrap_or_else(|e| panic!("frame at {t}: {e}"));
        est_traj.push(filter.nav().p);
        gt_traj.push(tmap[&frame.t_ns].p);
    }
    // the initializer's frame is gauge-shifted; compare after rigid
    // alignment
    let (ate, _) = ate_after_alignment(&est_traj, &gt_traj, false);
    assert!(ate < 0.05, "post-init ATE {ate:.4} m");
    let (_, scale_err) = ate_after_alignment(&est_traj, &gt_traj, true);
    assert!(scale_err < 2.0, "scale error {scale_err:.2}%");
}
