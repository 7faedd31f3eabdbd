use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssync_cli::{commands, config, CliError, Settings};

#[derive(Parser)]
#[command(name = "ssync", version, about = "Subject-consistency experiments on a toy denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Both passes of one config; writes metrics, masks, correspondences and embeddings.
    Run { config: PathBuf },
    /// Component, threshold, gamma and lambda ablations of one config.
    Ablate { config: PathBuf },
    /// Per-metric deltas between two output directories (b minus a).
    Compare { a: PathBuf, b: PathBuf },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:+.6}"))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let settings = Settings {
        threads: commands::threads_from_env()?,
        seed: cli.seed,
    };
    match cli.command {
        Command::Run { config } => {
            let result = commands::run(config::load(&config)?, settings, &cli.out_dir)?;
            let m = &result.metrics;
            println!(
                "subject_consistency {} layout_diversity {} background_drift {} mask_iou_vs_planted {}",
                fmt(m.subject_consistency),
                fmt(m.layout_diversity),
                fmt(m.background_drift),
                fmt(m.mask_iou_vs_planted)
            );
            println!("wrote {}", cli.out_dir.display());
        }
        Command::Ablate { config } => {
            let rows = commands::ablate(config::load(&config)?, settings, &cli.out_dir)?;
            for r in &rows {
                println!(
                    "{:<24} sc {} ld {} bd {} iou {}",
                    r.run_id,
                    fmt(r.subject_consistency),
                    fmt(r.layout_diversity),
                    fmt(r.background_drift),
                    fmt(r.mask_iou_vs_planted)
                );
            }
            println!("wrote {}", cli.out_dir.join("metrics.csv").display());
        }
        Command::Compare { a, b } => {
            for d in commands::compare(&a, &b)? {
                println!("{} {} {}", d.run_id, d.metric, fmt(d.value()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
