//! `xdex`: eigengrasp bases, retargeting runs, surrogate training and
//! rollout scoring from the command line.

mod commands;
mod manifest;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "xdex", version, about = "Cross-embodiment dexterous-hand retargeting toolkit")]
struct Cli {
    /// Random seed.
    #[arg(long, global = true, env = "CROSSDEX_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads for independent work items.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute an eigengrasp basis from a pose dataset.
    Eigengrasp {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = xdex::eigengrasp::DEFAULT_K)]
        k: usize,
        /// Skip mean-centering.
        #[arg(long)]
        uncentered: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retarget an eigengrasp weight stream onto a robot hand.
    Retarget {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        hand: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
        backend: BackendKind,
        /// Surrogate weights, required with `--backend surrogate`.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[command(flatten)]
        solve: SolveArgs,
        /// Record per-step wall-clock time (makes output nondeterministic).
        #[arg(long)]
        timing: bool,
    },
    /// Label poses with the oracle and fit the surrogate network.
    TrainSurrogate {
        #[arg(long)]
        hand: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Weights file; `.bin` selects the binary format.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, value_delimiter = ',', default_value = "512,512,512")]
        hidden: Vec<usize>,
        /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Audit a trained surrogate against the oracle.
    EvalSurrogate {
        #[arg(long)]
        hand: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also measure batch predict and sequential oracle throughput.
        #[arg(long)]
        bench: bool,
        #[arg(long, default_value_t = 1024)]
        bench_batch: usize,
        #[arg(long, default_value_t = 5)]
        bench_repeats: usize,
        /// Poses solved per sequential oracle timing pass.
        #[arg(long, default_value_t = 256)]
        bench_oracle_poses: usize,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Score a rollout file.
    Score {
        #[arg(long)]
        rollout: PathBuf,
        #[arg(long, default_value = "test")]
        mode: xdex::pipeline::Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a synthetic low-rank pose dataset.
    SynthDataset {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        rank: usize,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 1e-4)]
        noise: f64,
        #[arg(long, default_value_t = 0.4)]
        mean_flexion: f64,
        /// Defaults to csv for `.csv` paths, binary otherwise.
        #[arg(long, value_enum)]
        format: Option<DatasetFormat>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward kinematics of a hand at one configuration.
    Fk {
        #[arg(long)]
        hand: PathBuf,
        /// Comma-separated actuated joint values; mid-range when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q: Option<Vec<f64>>,
        /// Perturb the mount joint with this standard deviation (meters).
        #[arg(long)]
        randomize_mount: Option<f64>,
        #[arg(long)]
        jacobian: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetFormat {
    Bin,
    Csv,
}

/// Oracle settings shared by every command that solves.
#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long, default_value = xdex::retarget::DEXPILOT)]
    objective: String,
    #[arg(long, default_value = xdex::solver::PROJECTED_GAUSS_NEWTON)]
    solver: String,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    smoothness: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    gtol: f64,
}

/// Bad flag combinations caught after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<xdex::Error>() {
            return match e {
                xdex::Error::InvalidArgument(_) | xdex::Error::UnknownStrategy { .. } => 2,
                e if e.is_input_format() => 3,
                e if e.is_numerical() => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = commands::run(cli.command, cli.seed, cli.jobs.max(1));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
