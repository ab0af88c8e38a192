//! Batch driver for texture-aware restoration: analyze, train, eval, infer,
//! and bench subcommands over PNG corpora. Outputs are CSV or PNG, written
//! atomically. Exit codes: 0 success, 1 usage or configuration error, 2 data
//! error, 3 non-finite numerics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tamir_core::Error;

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: config::Overrides,
}

impl Common {
    fn resolve(&self) -> tamir_core::Result<config::RunConfig> {
        config::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tamir", version, about = "Texture-aware image restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Profile bicubic round-trip damage across patch-variance groups.
    Analyze {
        /// Directory of reference PNGs.
        #[arg(long)]
        data: PathBuf,
        /// Downscale factor for the round trip.
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// Square patch edge in pixels.
        #[arg(long, default_value_t = 8)]
        patch: usize,
        /// Number of variance-ranked groups.
        #[arg(long, default_value_t = 10)]
        groups: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint plus a per-step loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of reference PNGs.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output loss-log CSV path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Score a checkpoint (or the bicubic baseline) on degraded references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of reference PNGs.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Score plain bicubic upscaling instead of a checkpoint.
        #[arg(long)]
        baseline: bool,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore degraded PNGs with a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to run.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for restored PNGs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Degraded input PNGs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Sweep the scan selection fraction and tabulate analytic FLOPs.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Square input edge for the count.
        #[arg(long, default_value_t = tamir_core::flops::BENCH_SIDE)]
        side: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> tamir_core::Result<()> {
    match &cli.cmd {
        Cmd::Analyze { data, scale, patch, groups, out } => {
            commands::cmd_analyze(data, *scale, *patch, *groups, out)
        }
        Cmd::Train { common, data, ckpt, log } => {
            commands::cmd_train(&common.resolve()?, data, ckpt, log)
        }
        Cmd::Eval { common, data, ckpt, baseline, out } => {
            commands::cmd_eval(&common.resolve()?, data, ckpt.as_deref(), *baseline, out)
        }
        Cmd::Infer { common, ckpt, out_dir, inputs } => {
            commands::cmd_infer(&common.resolve()?, inputs, ckpt, out_dir)
        }
        Cmd::Bench { common, side, out } => commands::cmd_bench(&common.resolve()?, *side, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TAMIR_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 1,
                Error::NonFinite { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
