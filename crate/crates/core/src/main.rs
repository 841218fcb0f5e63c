use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cineseg::cli::{self, AugSetting, RunConfig, EXIT_NUMERIC, EXIT_OK};
use cineseg::network::Variant;
use cineseg::Error;

#[derive(Parser)]
#[command(
    name = "cineseg",
    version,
    about = "Train and evaluate U-shaped segmentation networks"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network; writes checkpoint, train log and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[run] out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant with and without augmentation; writes compare.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of unet,bnu,lnu,ibu.
        #[arg(long, value_delimiter = ',', default_value = "unet,bnu,lnu,ibu")]
        variants: Vec<Variant>,
        #[arg(long, default_value = "both")]
        aug: AugSetting,
    },
    /// Segment one image or every .pgm in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .pgm file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Write an augmented copy of a dataset manifest.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in gradient and metric checks.
    Selftest,
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> cineseg::Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(command: Command) -> cineseg::Result<u8> {
    match command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let outcome = cli::cmd_train(&cfg)?;
            print!("{}", outcome.report);
            println!("checkpoint = {}", outcome.checkpoint.display());
            Ok(EXIT_OK)
        }
        Command::Compare {
            config,
            seed,
            out,
            variants,
            aug,
        } => {
            let cfg = load(&config, seed, out)?;
            let cells = cli::cmd_compare(&cfg, &variants, aug, cli::worker_count()?)?;
            let mut code = EXIT_OK;
            for cell in &cells {
                match &cell.outcome {
                    Ok(r) => println!(
                        "{:<8} aug={:<5} dice {:.4} ± {:.4}  apd {:.3} mm",
                        cell.variant, cell.augmented, r.dice_mean, r.dice_std, r.apd_mm
                    ),
                    Err(e) => {
                        eprintln!("{} aug={}: {e}", cell.variant, cell.augmented);
                        if code == EXIT_OK {
                            code = cell.exit_code;
                        }
                    }
                }
            }
            println!("wrote {}", cfg.out_dir.join(cli::COMPARE_CSV_FILE).display());
            Ok(code)
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            threshold,
        } => {
            let outcome = cli::cmd_predict(&checkpoint, &input, &out, threshold)?;
            for (path, e) in &outcome.failures {
                eprintln!("error: {}: {e}", path.display());
            }
            println!("wrote {} files", outcome.written.len());
            Ok(outcome.failures.first().map_or(EXIT_OK, |(_, e)| cli::exit_code(e)))
        }
        Command::Augment {
            config,
            manifest,
            out,
            seed,
        } => {
            let cfg = load(&config, seed, None)?;
            let written = cli::cmd_augment(&cfg, &manifest, &out)?;
            println!("wrote {} entries to {}", written.entries.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let checks = cli::selftest::run();
            for c in &checks {
                println!("{c}");
            }
            Ok(if checks.iter().all(|c| c.passed) {
                EXIT_OK
            } else {
                EXIT_NUMERIC
            })
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config { .. } | Error::ConfigSyntax { .. } = e {
                eprintln!("see the configuration section of the README for the file format");
            }
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
