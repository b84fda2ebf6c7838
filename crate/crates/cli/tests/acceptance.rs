//! Acceptance criterion 9: every subcommand reproduces byte-identical
//! artifacts under a fixed seed and configuration. Wall-clock measurements
//! are quarantined in timing.csv, which is the one file excluded from the
//! comparison.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_srfvio")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("srfvio_acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Compare every artifact except timing.csv byte-for-byte.
fn assert_identical(a: &Path, b: &Path) -> usize {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "timing.csv")
        .collect();
    names.sort();
    assert!(!names.is_empty(), "no artifacts in {}", a.display());
    for n in &names {
        let fa = std::fs::read(a.join(n)).unwrap_or_else(|_| panic!("missing {n} in first run"));
        let fb = std::fs::read(b.join(n)).unwrap_or_else(|_| panic!("missing {n} in second run"));
        assert_eq!(fa, fb, "artifact {n} differs between identical invocations");
    }
    names.len()
}

#[test]
fn criterion_9_cli_determinism() {
    let cfg = tmp("config");
    let cfg_file = cfg.join("small.cfg");
    std::fs::write(
        &cfg_file,
        "duration_s = 6\nclones = 6\ntracked_features = 30\nmax_msckf = 12\nmax_slam = 8\n",
    )
    .unwrap();
    let cfgs = cfg_file.to_str().unwrap();
    let mut checked = 0usize;

    // simulate
    let (a, b) = (tmp("sim_a"), tmp("sim_b"));
    for out in [&a, &b] {
        run(&[
            "simulate", "--trials", "2", "--backend", "llt", "--precision", "double",
            "--seed", "7", "--config", cfgs, "--out", out.to_str().unwrap(),
        ]);
    }
    checked += assert_identical(&a, &b);

    // bench
    let (a, b) = (tmp("bench_a"), tmp("bench_b"));
    for out in [&a, &b] {
        run(&[
            "bench", "--n", "40", "--m", "20,60", "--backends", "all", "--reps", "2",
            "--seed", "3", "--out", out.to_str().unwrap(),
        ]);
    }
    checked += assert_identical(&a, &b);

    // init-eval
    let (a, b) = (tmp("ie_a"), tmp("ie_b"));
    for out in [&a, &b] {
        run(&[
            "init-eval", "--trials", "4", "--windows", "0.1,0.3", "--horizon", "1.0",
            "--seed", "5", "--config", cfgs, "--out", out.to_str().unwrap(),
        ]);
    }
    checked += assert_identical(&a, &b);

    // replay over an exported synthetic sequence
    let seq = tmp("sequence");
    {
        use srfvio::sim::{default_camera, synthesize, SimConfig, TrajectorySpec};
        let spec = TrajectorySpec::excited(6.0, 21);
        let cam = default_camera();
        let cfg = SimConfig { cam_rate: 20.0, tracked_features: 40, seed: 21, ..Default::default() };
        let data = synthesize(&spec, &cfg, &cam);
        srfvio::dataset::write_sequence(&seq, &data, &cam, &cfg.noise, 9.81).unwrap();
    }
    let (a, b) = (tmp("replay_a"), tmp("replay_b"));
    for out in [&a, &b] {
        run(&[
            "replay", seq.to_str().unwrap(), "--seed", "1",
            "--out", out.to_str().unwrap(),
        ]);
    }
    checked += assert_identical(&a, &b);

    println!("criterion 9: PASS — {checked} artifacts byte-identical across repeated runs of all four subcommands");
}
