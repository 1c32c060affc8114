//! `xd`: fit, score, sample and cross-validate extreme-deconvolution
//! mixtures from the command line.
//!
//! Exit codes: 0 success, 1 error, 2 fit stopped at `--max-iter`,
//! 64 bad flags, 74 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod run;

#[derive(Parser)]
#[command(
    name = "xd",
    version,
    about = "Gaussian-mixture density estimation from noisy, incomplete data"
)]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a K-component mixture with EM and split-and-merge.
    Fit(FitArgs),
    /// Log-likelihood of a dataset under a model.
    Loglike(LoglikeArgs),
    /// Draw samples from a model, optionally observed through a template.
    Sample(SampleArgs),
    /// Cross-validated log-likelihood over a (K, w) grid.
    Xval(XvalArgs),
    /// Fit a straight line to 2-D data with per-point errors.
    Linefit(LinefitArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Covariance regularizer.
    #[arg(long, default_value_t = 0.0)]
    w: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Split-and-merge candidates per round; 0 runs plain EM.
    #[arg(long, default_value_t = 5)]
    smem_depth: usize,
    /// Starting model (default: seeded k-means start).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fixed parameters, e.g. `0:alpha,0:mean,2:covar`.
    #[arg(long)]
    fix: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Run manifest (default: `<out>.manifest.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct LoglikeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Also print one value per observation.
    #[arg(long)]
    per_point: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset whose records supply R and S, used in turn.
    #[arg(long)]
    project: Option<PathBuf>,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RestrictionArg {
    Full,
    Amplitudes,
}

#[derive(Args)]
struct XvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Inclusive range `a:b`, or a single K.
    #[arg(long)]
    k_grid: String,
    /// Comma-separated regularizer values.
    #[arg(long, default_value = "0")]
    w_grid: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RestrictionArg::Full)]
    restriction: RestrictionArg,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 5)]
    smem_depth: usize,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct LinefitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Leave-one-out errors on slope and intercept.
    #[arg(long)]
    jackknife: bool,
    #[arg(long)]
    out: PathBuf,
    /// Plot data: points, 1-sigma error ellipses and the line's endpoints.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(run::EXIT_USAGE),
            };
        }
    };
    match run::dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("xd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
