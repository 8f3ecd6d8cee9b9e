use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use postpred_cli::{config, run};
use postpred::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "postpred", version, about = "Train implicit posterior models and write run artifacts")]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print every epoch instead of every tenth.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate an experiment.
    Run { config: PathBuf },
    /// Check a config without training.
    Validate { config: PathBuf },
    /// Write a synthetic dataset (xsinx, multimodal, seasonal) as CSV.
    GenData { kind: String, out: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Validate { config } => {
            match config::load_config(config, cli.seed, cli.out_dir.as_deref()) {
                Ok(_) => {
                    println!("{}: ok", config.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(errors) => {
                    for e in &errors.0 {
                        eprintln!("{}: {e}", config.display());
                    }
                    Ok(ExitCode::from(EXIT_CONFIG))
                }
            }
        }
        Command::Run { config } => {
            let exp = match config::load_config(config, cli.seed, cli.out_dir.as_deref()) {
                Ok(exp) => exp,
                Err(errors) => {
                    for e in &errors.0 {
                        eprintln!("{}: {e}", config.display());
                    }
                    return Ok(ExitCode::from(EXIT_CONFIG));
                }
            };
            let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
            let every = if cli.verbose { 1 } else { 10 };
            let mut progress = |r: &postpred::trainer::EpochRecord| {
                if r.epoch % every == 0 {
                    match r.val_loss {
                        Some(v) => eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, v),
                        None => eprintln!("epoch {:>4}  train {:.6}", r.epoch, r.train_loss),
                    }
                }
            };
            match run::run_to_dir(&exp, &text, &mut progress) {
                Ok(outcome) => {
                    println!("wrote {}", outcome.out_dir.display());
                    println!("{}", serde_json::to_string_pretty(&outcome.metrics)?);
                    Ok(ExitCode::SUCCESS)
                }
                Err(e @ Error::Divergence { .. }) => {
                    eprintln!("training diverged: {e}");
                    Ok(ExitCode::from(EXIT_DIVERGED))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::GenData { kind, out } => {
            run::gen_data(kind, out, cli.seed.unwrap_or(0))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
