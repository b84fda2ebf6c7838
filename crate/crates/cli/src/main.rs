//! Operator entry point: simulation studies, update benchmarks,
//! initialization evaluation and dataset replays.
//!
//! Every subcommand writes its artifacts plus an echo of the effective
//! configuration into the output directory. All artifacts except
//! `timing.csv` are byte-identical under a fixed seed and configuration;
//! wall-clock measurements are machine-dependent and quarantined there.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "srfvio", about = "square-root visual-inertial estimation toolkit")]
struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $SRFVIO_OUT/<subcommand> or ./out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo simulation study over the estimator matrix.
    Simulate {
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Update backend for the square-root runs.
        #[arg(long, default_value = "llt")]
        backend: String,
        #[arg(long, default_value = "double")]
        precision: String,
        /// Run the full estimator x precision matrix.
        #[arg(long)]
        matrix: bool,
    },
    /// Measurement-update flop/time benchmark over (n, m) grids.
    Bench {
        /// Comma-separated state sizes.
        #[arg(long, default_value = "100")]
        n: String,
        /// Comma-separated measurement sizes.
        #[arg(long, default_value = "50,100,200,500,1000")]
        m: String,
        /// Backends: comma-separated or 'all'.
        #[arg(long, default_value = "all")]
        backends: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Initialization window sweep with success-rate tables.
    InitEval {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Disable iterative refinement.
        #[arg(long)]
        no_refine: bool,
        /// Comma-separated window lengths in seconds.
        #[arg(long, default_value = "0.1,0.15,0.2,0.3,0.5,0.75,1.0")]
        windows: String,
        /// Post-initialization tracking horizon in seconds.
        #[arg(long, default_value_t = 3.0)]
        horizon: f64,
    },
    /// Replay a recorded sequence: initialize, filter, report errors.
    Replay {
        /// Sequence directory (imu.csv, tracks.csv, calib.txt, optional groundtruth.csv).
        root: PathBuf,
        #[arg(long, default_value = "double")]
        precision: String,
        #[arg(long, default_value = "llt")]
        backend: String,
    },
}

fn main() {
    let cli = Cli::parse();
    let sub = match &cli.cmd {
        Cmd::Simulate { .. } => "simulate",
        Cmd::Bench { .. } => "bench",
        Cmd::InitEval { .. } => "init-eval",
        Cmd::Replay { .. } => "replay",
    };
    let out = cli.out.clone().unwrap_or_else(|| {
        let base = std::env::var("SRFVIO_OUT").unwrap_or_else(|_| "out".into());
        PathBuf::from(base).join(sub)
    });
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("error: cannot create output directory {}: {e}", out.display());
        std::process::exit(1);
    }
    let mut cfg = config::RunConfig::default();
    if let Some(path) = &cli.config {
        if let Err(e) = cfg.apply_file(path) {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
    let result = match cli.cmd {
        Cmd::Simulate { trials, backend, precision, matrix } => {
            commands::simulate(&out, &cfg, cli.seed, trials, &backend, &precision, matrix)
        }
        Cmd::Bench { n, m, backends, reps } => {
            commands::bench(&out, &cfg, cli.seed, &n, &m, &backends, reps)
        }
        Cmd::InitEval { trials, no_refine, windows, horizon } => {
            commands::init_eval(&out, &cfg, cli.seed, trials, no_refine, &windows, horizon)
        }
        Cmd::Replay { root, precision, backend } => {
            commands::replay(&out, &cfg, cli.seed, &root, &precision, &backend)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
