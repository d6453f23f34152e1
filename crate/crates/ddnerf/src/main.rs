use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddnerf::cli::{
    cmd_compare, cmd_eval, cmd_gen, cmd_render, cmd_train, init_threads, parse_usize_list,
    RunConfig,
};
use ddnerf::DdError;

#[derive(Parser)]
#[command(
    name = "ddnerf",
    about = "Depth-distribution guided hierarchical volumetric sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each maps onto one config key and
/// overrides both defaults and config-file values.
#[derive(Args, Default)]
struct Common {
    /// Key=value config file applied before any flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene name (wall, spheres, cluttered, unbounded)
    #[arg(long)]
    scene: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets both the coarse and fine sample budgets
    #[arg(long)]
    samples: Option<usize>,
    /// Training iterations
    #[arg(long)]
    iters: Option<u64>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant: dd or baseline
    #[arg(long)]
    variant: Option<String>,
    /// Distribution-estimation loss weight
    #[arg(long)]
    lambda_de: Option<f64>,
    /// Force unbounded-scene partitioning on or off
    #[arg(long)]
    unbounded: Option<bool>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, DdError> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("scene", self.scene.clone());
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("samples", self.samples.map(|v| v.to_string()));
        push("iters", self.iters.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        push("lambda_de", self.lambda_de.map(|v| v.to_string()));
        push("unbounded", self.unbounded.map(|v| v.to_string()));
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset (resumes from an existing checkpoint)
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset's validation images
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (defaults to <out>/checkpoint.ddnt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render validation views from a checkpoint
    Render {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train dd and baseline variants over sample budgets and report metrics
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample budgets, e.g. 4,8,16
        #[arg(long, default_value = "4,8,16")]
        budgets: String,
        /// Comma-separated seeds, e.g. 1,2,3
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
}

fn run(cli: Cli) -> Result<(), DdError> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.resolve()?;
            cmd_gen(&cfg)?;
            println!("dataset written to {}", cfg.out.display());
        }
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let report = cmd_train(&cfg)?;
            println!(
                "trained {} steps; final loss {:.6} (checkpoint in {})",
                cfg.iters,
                report.total,
                cfg.out.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join("checkpoint.ddnt"));
            let csv = cfg.out.join("eval.csv");
            let summary = cmd_eval(&ckpt, &cfg.data, Some(&csv))?;
            println!(
                "mean PSNR {:.3} dB, SSIM {:.4}, depth MAE coarse {:.4} fine {:.4} ({})",
                summary.mean.psnr,
                summary.mean.ssim,
                summary.mean.depth_mae_coarse,
                summary.mean.depth_mae_fine,
                csv.display()
            );
        }
        Command::Render { common, checkpoint } => {
            let cfg = common.resolve()?;
            cmd_render(&checkpoint, &cfg.data, &cfg.out)?;
            println!("renders written to {}", cfg.out.display());
        }
        Command::Compare { common, budgets, seeds } => {
            let cfg = common.resolve()?;
            let budgets = parse_usize_list(&budgets)?;
            let seeds: Vec<u64> = parse_usize_list(&seeds)?.into_iter().map(|v| v as u64).collect();
            let report = cmd_compare(&cfg, &budgets, &seeds, &cfg.out)?;
            for &b in &budgets {
                if let Some(margin) = report.psnr_margin(b) {
                    println!("budget {b}: dd - baseline PSNR margin {margin:+.3} dB");
                }
            }
            println!("report written to {}", cfg.out.join("compare.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the error path too
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                DdError::InvalidInput(_) | DdError::DimensionMismatch(_) | DdError::Format(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
