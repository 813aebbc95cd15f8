use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adasde::config::{load_config, ExperimentKind};
use adasde::error::{ConfigErrors, Error};
use adasde::experiment::{error_exit_code, execute, RunOptions};

#[derive(Parser)]
#[command(name = "adasde", version, about = "Adaptive-optimizer SDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an optimizer ensemble, optionally against its SDE.
    Run(Common),
    /// Compare analytic one-step moments with Monte Carlo.
    Moments(Common),
    /// Fit the weak-error order over a learning-rate sweep.
    OrderSweep(Common),
    /// Check SVAG convergence as ℓ grows.
    SvagSweep(Common),
    /// Compare base and scaled runs at aligned checkpoints.
    ValidateScaling(Common),
    /// Check the linear warm-up closed form.
    WarmupCheck(Common),
    /// Estimate noise moments of an oracle.
    NoiseDiag(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed from which every stream is derived.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "ADASDE_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Exit with 2 on inconclusive results.
    #[arg(long)]
    strict: bool,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Self::Run(c) => (ExperimentKind::Run, c),
            Self::Moments(c) => (ExperimentKind::Moments, c),
            Self::OrderSweep(c) => (ExperimentKind::OrderSweep, c),
            Self::SvagSweep(c) => (ExperimentKind::SvagSweep, c),
            Self::ValidateScaling(c) => (ExperimentKind::ValidateScaling, c),
            Self::WarmupCheck(c) => (ExperimentKind::WarmupCheck, c),
            Self::NoiseDiag(c) => (ExperimentKind::NoiseDiag, c),
        }
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(error_exit_code(&e))
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().command.split();
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if cfg.kind != kind {
        return fail(Error::Config(ConfigErrors(vec![format!(
            "config kind is `{}` but the `{kind}` subcommand was used",
            cfg.kind
        )])));
    }
    let opts = RunOptions {
        root_seed: args.seed,
        out_dir: args.out_dir,
        strict: args.strict,
    };
    match execute(&cfg, &opts) {
        Ok(out) => {
            print!("{}", out.summary);
            ExitCode::from(out.exit_code(opts.strict))
        }
        Err(e) => fail(e),
    }
}
