//! `gmes`: train, test, adapt, compare and bench.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmes_core::{Error, MaskMode, Variant};

#[derive(Debug, Parser)]
#[command(name = "gmes", version, about = "Guided meta ES with trainable action masks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true, env = "GMES_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, env = "GMES_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "GMES_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, env = "GMES_OUT")]
    pub out: Option<PathBuf>,
    /// Validate and print the work plan without running it.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Training recipe; sets meta, mask and the isotropic-search switch.
    #[arg(long, global = true, env = "GMES_VARIANT")]
    pub variant: Option<Variant>,
    #[arg(long, global = true, env = "GMES_MASK")]
    pub mask: Option<MaskMode>,
    #[arg(long, global = true, env = "GMES_META")]
    pub meta: Option<Switch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy.
    Train {
        /// Re-run the configuration recorded in a run manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test scenario set.
    Test {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the training set instead.
        #[arg(long)]
        training_set: bool,
    },
    /// Adapt the latent of one scenario without touching policy weights.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenario id from the test or training set.
        #[arg(long)]
        scenario: u64,
        /// Evaluation episodes; defaults to `meta.adapt_budget`.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train and test several variants under one budget.
    Compare {
        /// Comma-separated variants; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Whole-file configurations, one per compared arm.
        #[arg(long, value_delimiter = ',')]
        configs: Vec<PathBuf>,
        /// Seeds per variant, counting up from the master seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Guided versus vanilla convergence on synthetic quadratics.
    Bench {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::LayoutMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
