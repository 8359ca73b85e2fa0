use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xpruner::config::{Overrides, RunConfig};
use xpruner::pipeline::{self, BASELINE_CKPT, MASKED_CKPT, PRUNED_CKPT};
use xpruner::Result;

/// Explainability-aware structured pruning of a small vision transformer.
///
/// Exit status: 0 success, 2 configuration error, 3 I/O or format error,
/// 4 threshold search did not converge, 5 degenerate architecture,
/// 6 pipeline order violated, 1 anything else.
#[derive(Parser)]
#[command(name = "xpruner", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unmasked baseline.
    TrainBaseline,
    /// Learn class-conditional masks on the frozen baseline.
    TrainMasks {
        /// Defaults to `<out-dir>/baseline.ckpt`.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Search thresholds and rates, then prune and fold the masks.
    Prune {
        /// Defaults to `<out-dir>/masked.ckpt`.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Fine-tune a pruned model.
    Finetune {
        /// Defaults to `<out-dir>/pruned.ckpt`.
        #[arg(long)]
        pruned: Option<PathBuf>,
    },
    /// Consolidate one or more checkpoints into report tables.
    Report {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out = cfg.out_dir();
    let or_default = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out.join(name));
    match cli.command {
        Command::TrainBaseline => {
            let p = pipeline::cmd_train_baseline(&cfg)?;
            println!("{}", p.display());
        }
        Command::TrainMasks { baseline } => {
            let p = pipeline::cmd_train_masks(&cfg, &or_default(baseline, BASELINE_CKPT))?;
            println!("{}", p.display());
        }
        Command::Prune { masks } => {
            let (p, report) = pipeline::cmd_prune(&cfg, &or_default(masks, MASKED_CKPT))?;
            println!(
                "{} (removed {:.4} of prunable parameters, {:.4} of FLOPs remain)",
                p.display(),
                report.achieved_rate,
                report.flops_ratio
            );
        }
        Command::Finetune { pruned } => {
            let p = pipeline::cmd_finetune(&cfg, &or_default(pruned, PRUNED_CKPT))?;
            println!("{}", p.display());
        }
        Command::Report { checkpoints } => {
            let r = pipeline::cmd_report(&cfg, &checkpoints)?;
            println!("{}", serde_json::to_string_pretty(&r.rows)?);
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
