//! Subcommand implementations. Artifact layout per command:
//!
//! simulate: config.txt, summary.csv, metrics.csv, cond_trace.csv,
//!           timing.csv, plot.gp
//! bench:    config.txt, bench.csv, ratio.csv, timing.csv, plot.gp
//! init-eval: config.txt, init_trials.csv, init_windows.csv, timing.csv,
//!           plot.gp
//! replay:   config.txt, trajectory.csv, summary.txt

use crate::config::RunConfig;
use srfvio::geom::V3;
use srfvio::init::{initialize, initialize_candidates, score_against_frame, InitConfig};
use srfvio::scalar::Precision;
use srfvio::sim::{
    self, ate_after_alignment, bench_updates, run_monte_carlo, synthesize, EstimatorSpec,
    RunOptions, TrajectorySpec,
};
use srfvio::srf::Backend;
use srfvio::vio::{EngineKind, Filter, VioConfig};
use srfvio::Scalar;
use std::fmt::Write as _;
use std::path::Path;

type CmdResult = Result<(), String>;

fn write_file(path: &Path, content: &str) -> CmdResult {
    std::fs::write(path, content).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse::<Backend>()
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<Precision>()
}

fn vio_config(cfg: &RunConfig, engine: EngineKind, force_accept: bool, slam: usize) -> VioConfig {
    VioConfig {
        num_clones: cfg.clones,
        max_slam: slam,
        max_msckf: cfg.max_msckf,
        pixel_sigma: cfg.pixel_sigma_px,
        chi2_confidence: cfg.chi2_confidence,
        chi2_inflation: cfg.chi2_inflation,
        engine,
        force_accept,
        track_cond: true,
        ..Default::default()
    }
}

pub fn simulate(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    trials: usize,
    backend: &str,
    precision: &str,
    matrix: bool,
) -> CmdResult {
    let backend = parse_backend(backend)?;
    let precision = parse_precision(precision)?;
    let estimators: Vec<EstimatorSpec> = if matrix {
        let engines = [
            EngineKind::DenseEkf,
            EngineKind::Sqrt(Backend::Llt),
            EngineKind::Sqrt(Backend::Pqr),
            EngineKind::Sqrt(Backend::Potter),
            EngineKind::Sqrt(Backend::Carlson),
            EngineKind::InfoSqrt,
        ];
        engines
            .iter()
            .flat_map(|&e| {
                [Precision::Single, Precision::Double]
                    .into_iter()
                    .map(move |p| EstimatorSpec { engine: e, precision: p })
            })
            .collect()
    } else {
        vec![EstimatorSpec { engine: EngineKind::Sqrt(backend), precision }]
    };
    let spec = TrajectorySpec::excited(cfg.duration_s, seed);
    let sim_cfg = cfg.sim_config(seed);
    let cam = sim::default_camera();
    // the estimator matrix runs the common stateless-feature configuration
    // with shared gating decisions so rows are comparable
    let slam = if matrix { 0 } else { cfg.max_slam };
    let mut opts = RunOptions::default();
    opts.vio = vio_config(cfg, EngineKind::Sqrt(backend), matrix, slam);
    let summaries = run_monte_carlo(&spec, &sim_cfg, &cam, &estimators, &opts, trials);

    let mut summary = String::from(
        "estimator,trial,steps,rmse_ori_deg,rmse_pos_m,mean_nees,max_cond\n",
    );
    let mut timing = String::from("estimator,trial,wall_s\n");
    let mut metrics = String::from(
        "estimator,t_ns,ori_err_deg,pos_err_m,nees,rows,cond_c,flops,accepted,rejected,state_dim\n",
    );
    let mut cond_trace = String::from("estimator,t_ns,cond_c\n");
    for s in &summaries {
        for (i, t) in s.per_trial.iter().enumerate() {
            writeln!(
                summary,
                "{},{},{},{},{},{},{}",
                s.label,
                i,
                t.steps.len(),
                t.rmse_ori_deg,
                t.rmse_pos_m,
                t.mean_nees,
                t.max_cond_c
            )
            .unwrap();
            writeln!(timing, "{},{},{}", s.label, i, t.wall_time_s).unwrap();
        }
        writeln!(
            summary,
            "{},mean,{},{},{},{},{}",
            s.label,
            s.per_trial.first().map(|t| t.steps.len()).unwrap_or(0),
            s.mean_rmse_ori_deg,
            s.mean_rmse_pos_m,
            s.mean_nees,
            s.max_cond_c
        )
        .unwrap();
        if let Some(t0) = s.per_trial.first() {
            for st in &t0.steps {
                writeln!(
                    metrics,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    s.label,
                    st.t_ns,
                    st.ori_err_deg,
                    st.pos_err_m,
                    st.nees,
                    st.rows,
                    st.cond_c,
                    st.flops,
                    st.accepted,
                    st.rejected,
                    st.state_dim
                )
                .unwrap();
                if st.cond_c.is_finite() {
                    writeln!(cond_trace, "{},{},{}", s.label, st.t_ns, st.cond_c).unwrap();
                }
            }
        }
    }
    write_file(&out.join("summary.csv"), &summary)?;
    write_file(&out.join("metrics.csv"), &metrics)?;
    write_file(&out.join("cond_trace.csv"), &cond_trace)?;
    write_file(&out.join("timing.csv"), &timing)?;
    write_file(
        &out.join("config.txt"),
        &cfg.echo(
            seed,
            &[
                ("command", "simulate".into()),
                ("trials", trials.to_string()),
                ("backend", backend.label().into()),
                ("precision", precision.label().into()),
                ("matrix", matrix.to_string()),
            ],
        ),
    )?;
    write_file(
        &out.join("plot.gp"),
        "set datafile separator ','\n\
         set key outside\n\
         set logscale y\n\
         plot 'cond_trace.csv' every ::1 using 2:3 with lines title 'cond(C)'\n\
         pause -1\n",
    )?;
    Ok(())
}

pub fn bench(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    n: &str,
    m: &str,
    backends: &str,
    reps: usize,
) -> CmdResult {
    let parse_list = |s: &str| -> Result<Vec<usize>, String> {
        s.split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|_| format!("bad size '{x}'")))
            .collect()
    };
    let n_grid = parse_list(n)?;
    let m_grid = parse_list(m)?;
    let backend_list: Vec<Backend> = if backends == "all" {
        Backend::ALL.to_vec()
    } else {
        backends
            .split(',')
            .map(|b| parse_backend(b.trim()))
            .collect::<Result<_, _>>()?
    };
    let rows = bench_updates(&n_grid, &m_grid, &backend_list, reps, seed);
    let mut bench_csv = String::from("n,m,backend,flops\n");
    let mut timing = String::from("n,m,backend,median_ns\n");
    for r in &rows {
        writeln!(bench_csv, "{},{},{},{}", r.n, r.m, r.backend.label(), r.flops).unwrap();
        writeln!(timing, "{},{},{},{}", r.n, r.m, r.backend.label(), r.median_ns).unwrap();
    }
    let mut ratio = String::from("n,m,llt_flops,pqr_flops,flop_ratio\n");
    for &nn in &n_grid {
        for &mm in &m_grid {
            let find = |b: Backend| rows.iter().find(|r| r.n == nn && r.m == mm && r.backend == b);
            if let (Some(l), Some(p)) = (find(Backend::Llt), find(Backend::Pqr)) {
                writeln!(
                    ratio,
                    "{},{},{},{},{}",
                    nn,
                    mm,
                    l.flops,
                    p.flops,
                    l.flops as f64 / p.flops as f64,
                )
                .unwrap();
                writeln!(
                    timing,
                    "{},{},llt-over-pqr,{}",
                    nn,
                    mm,
                    l.median_ns as f64 / p.median_ns.max(1) as f64
                )
                .unwrap();
            }
        }
    }
    write_file(&out.join("bench.csv"), &bench_csv)?;
    write_file(&out.join("ratio.csv"), &ratio)?;
    write_file(&out.join("timing.csv"), &timing)?;
    write_file(
        &out.join("config.txt"),
        &cfg.echo(
            seed,
            &[
                ("command", "bench".into()),
                ("n", n.into()),
                ("m", m.into()),
                ("backends", backends.into()),
                ("reps", reps.to_string()),
            ],
        ),
    )?;
    write_file(
        &out.join("plot.gp"),
        "set datafile separator ','\n\
         set xlabel 'measurements m'\n\
         set ylabel 'flop ratio'\n\
         plot 'ratio.csv' every ::1 using 2:5 with linespoints title 'llt/pqr'\n\
         pause -1\n",
    )?;
    Ok(())
}

struct InitTrialRow {
    window_s: f64,
    trial: usize,
    solved: bool,
    keyframes: usize,
    eig: [f64; 3],
    grav_err_deg: f64,
    vel_err_ms: f64,
    iterations: usize,
    ate_m: f64,
    scale_err_pct: f64,
    wall_ms: f64,
}

pub fn init_eval(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    trials: usize,
    no_refine: bool,
    windows: &str,
    horizon: f64,
) -> CmdResult {
    let window_list: Vec<f64> = windows
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad window '{x}'")))
        .collect::<Result<_, _>>()?;
    // sub-second windows need a camera rate that puts enough frames in
    // the window; 20 Hz matches the minimal three-keyframe case
    let mut eval_cfg = cfg.clone();
    eval_cfg.cam_rate_hz = eval_cfg.cam_rate_hz.max(20.0);
    let cam = sim::default_camera();
    let mut rows: Vec<InitTrialRow> = Vec::new();
    for (wi, &w) in window_list.iter().enumerate() {
        for trial in 0..trials {
            let trial_seed = seed
                .wrapping_add(1000 * wi as u64)
                .wrapping_add(trial as u64)
                .wrapping_mul(2654435761);
            let row = run_init_trial(&eval_cfg, trial_seed, w, horizon, no_refine, &cam);
            rows.push(InitTrialRow { window_s: w, trial, ..row });
        }
    }
    let mut per_trial = String::from(
        "window_s,trial,solved,keyframes,eig_t,eig_1,eig_2,grav_err_deg,vel_err_ms,iterations,ate_m,scale_err_pct\n",
    );
    let mut timing = String::from("window_s,trial,wall_ms\n");
    for r in &rows {
        writeln!(
            per_trial,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.window_s,
            r.trial,
            r.solved as u8,
            r.keyframes,
            r.eig[0],
            r.eig[1],
            r.eig[2],
            r.grav_err_deg,
            r.vel_err_ms,
            r.iterations,
            r.ate_m,
            r.scale_err_pct
        )
        .unwrap();
        writeln!(timing, "{},{},{}", r.window_s, r.trial, r.wall_ms).unwrap();
    }
    let mut per_window = String::from(
        "window_s,trials,rate_solved,rate_grav3deg_vel02,rate_pos_0.1m,rate_pos_0.3m,rate_pos_0.5m,mean_grav_err_deg,mean_vel_err_ms,mean_scale_err_pct,mean_iterations\n",
    );
    for &w in &window_list {
        let sel: Vec<&InitTrialRow> = rows.iter().filter(|r| r.window_s == w).collect();
        let nt = sel.len().max(1) as f64;
        let solved = sel.iter().filter(|r| r.solved).count() as f64;
        let succ = sel
            .iter()
            .filter(|r| r.solved && r.grav_err_deg < 3.0 && r.vel_err_ms < 0.2)
            .count() as f64;
        let pos_rate = |thr: f64| {
            sel.iter().filter(|r| r.solved && r.ate_m.is_finite() && r.ate_m < thr).count() as f64
                / nt
        };
        let mean = |f: &dyn Fn(&InitTrialRow) -> f64| {
            let vals: Vec<f64> =
                sel.iter().filter(|r| r.solved).map(|r| f(r)).filter(|x| x.is_finite()).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        writeln!(
            per_window,
            "{},{},{},{},{},{},{},{},{},{},{}",
            w,
            sel.len(),
            solved / nt,
            succ / nt,
            pos_rate(0.1),
            pos_rate(0.3),
            pos_rate(0.5),
            mean(&|r| r.grav_err_deg),
            mean(&|r| r.vel_err_ms),
            mean(&|r| r.scale_err_pct),
            mean(&|r| r.iterations as f64),
        )
        .unwrap();
    }
    write_file(&out.join("init_trials.csv"), &per_trial)?;
    write_file(&out.join("init_windows.csv"), &per_window)?;
    write_file(&out.join("timing.csv"), &timing)?;
    write_file(
        &out.join("config.txt"),
        &eval_cfg.echo(
            seed,
            &[
                ("command", "init-eval".into()),
                ("trials", trials.to_string()),
                ("no_refine", no_refine.to_string()),
                ("windows", windows.into()),
                ("horizon_s", horizon.to_string()),
            ],
        ),
    )?;
    write_file(
        &out.join("plot.gp"),
        "set datafile separator ','\n\
         set xlabel 'window (s)'\n\
         set ylabel 'success rate'\n\
         plot 'init_windows.csv' every ::1 using 1:4 with linespoints title 'grav<3deg & vel<0.2',\\\n\
              '' every ::1 using 1:6 with linespoints title 'pos<0.3m'\n\
         pause -1\n",
    )?;
    Ok(())
}

fn run_init_trial(
    cfg: &RunConfig,
    trial_seed: u64,
    window_s: f64,
    horizon: f64,
    no_refine: bool,
    cam: &srfvio::vision::CameraModel<f64>,
) -> InitTrialRow {
    let t_begin = std::time::Instant::now();
    let failed = |wall: f64| InitTrialRow {
        window_s,
        trial: 0,
        solved: false,
        keyframes: 0,
        eig: [f64::NAN; 3],
        grav_err_deg: f64::NAN,
        vel_err_ms: f64::NAN,
        iterations: 0,
        ate_m: f64::NAN,
        scale_err_pct: f64::NAN,
        wall_ms: wall,
    };
    // randomize the window phase so trials sample different geometry
    let mut spec = TrajectorySpec::excited(window_s + horizon + 1.5, trial_seed);
    spec.seed = trial_seed;
    let sim_cfg = cfg.sim_config(trial_seed);
    let data = synthesize(&spec, &sim_cfg, cam);
    let frame_dt = 1.0 / sim_cfg.cam_rate;
    let phase_steps = (0.8 / frame_dt) as u64;
    let t0 = 0.1 + ((trial_seed >> 3) % phase_steps.max(1)) as f64 * frame_dt;
    let t1 = t0 + window_s;
    let tracks =
        sim::tracks_in_window(&data, sim::t_to_ns(t0), sim::t_to_ns(t1), cfg.pixel_sigma_px);
    let imu = sim::imu_in_window(&data, t0, t1);
    let keyframes = if window_s < 0.3 {
        3
    } else if window_s < 0.5 {
        4
    } else {
        cfg.init_keyframes
    };
    // study settings: more refinement headroom than the runtime default
    let init_cfg = InitConfig {
        refine: !no_refine,
        max_iterations: 15,
        max_features: 80,
        ..Default::default()
    };
    // the study assumes reasonably accurate prior biases
    let candidates = match initialize_candidates::<f64>(
        &imu,
        &tracks,
        cam,
        &sim_cfg.noise,
        sim_cfg.bias_g0,
        sim_cfg.bias_a0,
        keyframes,
        &init_cfg,
    ) {
        Ok(c) => c,
        Err(_) => return failed(t_begin.elapsed().as_secs_f64() * 1e3),
    };
    // disambiguate tied refinements against the first post-window frame
    let sol = {
        let val_frame = data.frames.iter().find(|f| f.t_ns as f64 * 1e-9 > t1 + 1e-9);
        match (candidates.len(), val_frame) {
            (1, _) | (_, None) => candidates.into_iter().next().unwrap(),
            (_, Some(fr)) => {
                let tf = fr.t_ns as f64 * 1e-9;
                let imu_ext = sim::imu_in_window(&data, t0, tf);
                candidates
                    .into_iter()
                    .min_by(|a, b| {
                        let sa = score_against_frame(a, &imu_ext, cam, &sim_cfg.noise, tf, &fr.obs);
                        let sb = score_against_frame(b, &imu_ext, cam, &sim_cfg.noise, tf, &fr.obs);
                        sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap()
            }
        }
    };
    // gravity and velocity errors in the first keyframe's IMU frame
    let tk0 = sol.keyframes[0] as f64 * 1e-9;
    let r_true = spec.orientation(tk0);
    let g_vec = V3::of(0.0, 0.0, -9.81);
    let g_true = r_true.mul_vec(g_vec);
    let q0 = sol.state.quat_at(0);
    let g_est = q0.rot().mul_vec(g_vec);
    let grav_err_deg =
        g_est.normalized().dot(g_true.normalized()).clamp(-1.0, 1.0).acos().to_degrees();
    let v_mean_off = sol.state.blocks()[1].mean_off;
    let v_est_global = V3::of(
        sol.state.mean()[v_mean_off + 3].f64(),
        sol.state.mean()[v_mean_off + 4].f64(),
        sol.state.mean()[v_mean_off + 5].f64(),
    );
    let v_est_local = q0.rot().mul_vec(v_est_global);
    let v_true_local = r_true.mul_vec(spec.velocity(tk0));
    let vel_err = (v_est_local - v_true_local).norm();
    let iterations = sol.iterations;
    let sol_keyframes = sol.keyframes.len();
    let sol_eig = sol.eigenvalues;

    // post-initialization tracking horizon
    let mut vio_cfg = VioConfig {
        num_clones: cfg.clones,
        max_slam: cfg.max_slam,
        max_msckf: cfg.max_msckf,
        pixel_sigma: cfg.pixel_sigma_px,
        chi2_confidence: cfg.chi2_confidence,
        chi2_inflation: cfg.chi2_inflation,
        ..Default::default()
    };
    vio_cfg.engine = EngineKind::Sqrt(Backend::Llt);
    let (ate, scale_err) =
        match Filter::from_init(sol, &tracks, cam.clone(), sim_cfg.noise, vio_cfg) {
            Ok(mut filter) => {
                let mut est = Vec::new();
                let mut gt = Vec::new();
                let tmap: std::collections::BTreeMap<i64, &sim::TruthSample> =
                    data.truth.iter().map(|t| (t.t_ns, t)).collect();
                let mut ok = true;
                for frame in data.frames.iter().filter(|f| {
                    let t = f.t_ns as f64 * 1e-9;
                    t > t1 && t <= t1 + horizon
                }) {
                    let t = frame.t_ns as f64 * 1e-9;
                    if filter.process_frame(&data.imu, t, &frame.obs).is_err() {
                        ok = false;
                        break;
                    }
                    est.push(filter.nav().p);
                    gt.push(tmap[&frame.t_ns].p);
                }
                if ok && est.len() >= 3 {
                    let (ate, _) = ate_after_alignment(&est, &gt, false);
                    let (_, scale) = ate_after_alignment(&est, &gt, true);
                    (ate, scale)
                } else {
                    (f64::NAN, f64::NAN)
                }
            }
            Err(_) => (f64::NAN, f64::NAN),
        };
    InitTrialRow {
        window_s,
        trial: 0,
        solved: true,
        keyframes: sol_keyframes,
        eig: sol_eig,
        grav_err_deg,
        vel_err_ms: vel_err,
        iterations,
        ate_m: ate,
        scale_err_pct: scale_err,
        wall_ms: t_begin.elapsed().as_secs_f64() * 1e3,
    }
}

pub fn replay(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    root: &Path,
    precision: &str,
    backend: &str,
) -> CmdResult {
    let precision = parse_precision(precision)?;
    let backend = parse_backend(backend)?;
    let seq = srfvio::dataset::load_sequence(root, None).map_err(|e| e.to_string())?;
    match precision {
        Precision::Double => replay_typed::<f64>(out, cfg, seed, &seq, backend),
        Precision::Single => replay_typed::<f32>(out, cfg, seed, &seq, backend),
    }
}

fn replay_typed<T: Scalar>(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    seq: &srfvio::dataset::Sequence,
    backend: Backend,
) -> CmdResult {
    let t0 = seq.frames.first().ok_or("sequence has no frames")?.t_ns as f64 * 1e-9;
    let t1 = t0 + cfg.init_window_s;
    let tracks = {
        let data = sim::SimData {
            imu: seq.imu.clone(),
            frames: seq.frames.clone(),
            truth: seq.truth.clone().unwrap_or_default(),
            features: Vec::new(),
        };
        sim::tracks_in_window(&data, sim::t_to_ns(t0), sim::t_to_ns(t1), cfg.pixel_sigma_px)
    };
    let imu_window: Vec<srfvio::imu::ImuSample> = seq
        .imu
        .iter()
        .copied()
        .filter(|s| s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9)
        .collect();
    let cam_t: srfvio::vision::CameraModel<T> = seq.cam.cast();
    let init_cfg = InitConfig { gravity_mag: seq.gravity_mag, ..Default::default() };
    let sol = initialize::<T>(
        &imu_window,
        &tracks,
        &cam_t,
        &seq.noise,
        V3::zero(),
        V3::zero(),
        cfg.init_keyframes,
        &init_cfg,
    )
    .map_err(|e| format!("initialization failed: {e}"))?;
    let vio_cfg = VioConfig {
        num_clones: cfg.clones,
        max_slam: cfg.max_slam,
        max_msckf: cfg.max_msckf,
        pixel_sigma: cfg.pixel_sigma_px,
        chi2_confidence: cfg.chi2_confidence,
        chi2_inflation: cfg.chi2_inflation,
        engine: EngineKind::Sqrt(backend),
        ..Default::default()
    };
    let mut filter = Filter::from_init(sol, &tracks, cam_t, seq.noise, vio_cfg)
        .map_err(|e| format!("handoff failed: {e}"))?;
    let mut traj = String::from("t_ns,px,py,pz,qx,qy,qz,qw\n");
    let mut est_pos: Vec<(i64, V3<f64>)> = Vec::new();
    for frame in seq.frames.iter().filter(|f| f.t_ns as f64 * 1e-9 > t1) {
        let t = frame.t_ns as f64 * 1e-9;
        filter
            .process_frame(&seq.imu, t, &frame.obs)
            .map_err(|e| format!("frame at {t}: {e}"))?;
        let nav = filter.nav();
        let p = nav.p.map64();
        let q = nav.q;
        writeln!(
            traj,
            "{},{},{},{},{},{},{},{}",
            frame.t_ns,
            p.x(),
            p.y(),
            p.z(),
            q.0[0].f64(),
            q.0[1].f64(),
            q.0[2].f64(),
            q.0[3].f64()
        )
        .unwrap();
        est_pos.push((frame.t_ns, p));
    }
    write_file(&out.join("trajectory.csv"), &traj)?;
    let mut summary = String::new();
    match &seq.truth {
        Some(truth) if est_pos.len() >= 3 => {
            let tmap: std::collections::BTreeMap<i64, &sim::TruthSample> =
                truth.iter().map(|t| (t.t_ns, t)).collect();
            let mut est = Vec::new();
            let mut gt = Vec::new();
            for (t_ns, p) in &est_pos {
                if let Some(tr) = tmap.get(t_ns) {
                    est.push(*p);
                    gt.push(tr.p);
                }
            }
            if est.len() >= 3 {
                let (ate_se3, _) = ate_after_alignment(&est, &gt, false);
                let (ate_sim3, scale_err) = ate_after_alignment(&est, &gt, true);
                writeln!(summary, "frames = {}", est.len()).unwrap();
                writeln!(summary, "ate_se3_m = {ate_se3}").unwrap();
                writeln!(summary, "ate_sim3_m = {ate_sim3}").unwrap();
                writeln!(summary, "scale_error_pct = {scale_err}").unwrap();
            } else {
                writeln!(summary, "no overlapping ground-truth timestamps; ATE omitted").unwrap();
            }
        }
        _ => {
            writeln!(summary, "no ground truth available; ATE section omitted").unwrap();
        }
    }
    write_file(&out.join("summary.txt"), &summary)?;
    write_file(
        &out.join("config.txt"),
        &cfg.echo(
            seed,
            &[
                ("command", "replay".into()),
                ("backend", backend.label().into()),
            ],
        ),
    )?;
    Ok(())
}
