use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bladescan::Workspace;
use bladescan_core::Result;

/// Blade segmentation, superpixel decomposition and surface anomaly scoring.
#[derive(Parser)]
#[command(name = "bladescan", version)]
struct Cli {
    /// JSON configuration; keys override the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data generation, training and resampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Synth,
    /// Build morphology pseudo ground truth for every positive.
    PseudoGt,
    /// Train the blade segmenter.
    TrainSeg,
    /// Extract blade instances with the trained segmenter.
    Extract,
    /// Superpixels and patches for every extracted blade.
    Slic,
    /// Train the anomaly scorer on defect-free patches.
    TrainAd,
    /// Score test patches.
    Score,
    /// Compute the evaluation report.
    Evaluate,
    /// Render overlays for test images.
    Overlay,
    /// Run every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = bladescan::effective_config(cli.config.as_deref(), cli.seed)?;
    let ws = Workspace::new(cfg, cli.out_dir);
    match cli.command {
        Command::Synth => drop(bladescan::synth(&ws)?),
        Command::PseudoGt => drop(bladescan::pseudo_gt(&ws)?),
        Command::TrainSeg => drop(bladescan::train_seg(&ws)?),
        Command::Extract => drop(bladescan::extract(&ws)?),
        Command::Slic => drop(bladescan::slic(&ws)?),
        Command::TrainAd => drop(bladescan::train_ad(&ws)?),
        Command::Score => drop(bladescan::score(&ws)?),
        Command::Evaluate => {
            let r = bladescan::evaluate(&ws)?;
            println!(
                "AP@{} {:.4}  mean IoU {:.4}  AUC {:.4} [{:.4}, {:.4}]  {:.1} ms/image",
                r.iou_threshold, r.ap, r.mean_iou, r.auc, r.ci_low, r.ci_high, r.per_image_ms
            );
        }
        Command::Overlay => drop(bladescan::overlay(&ws)?),
        Command::Run => {
            let r = bladescan::run_all(&ws)?;
            println!("AP {:.4}  AUC {:.4} [{:.4}, {:.4}]", r.ap, r.auc, r.ci_low, r.ci_high);
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(&ws.cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
