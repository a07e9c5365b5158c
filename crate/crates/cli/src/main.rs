use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bitemporal_cli::commands::manifest_in;
use bitemporal_cli::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_train_denoiser, CliError, GenerateMode, RunConfig,
};
use clap::{Args, Parser, Subcommand};

/// Synthesises bi-temporal change detection pairs from semantic masks and
/// evaluates their use for pretraining.
#[derive(Parser)]
#[command(name = "bitemporal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; wins over `seed` in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional denoiser on procedural toy scenes.
    TrainDenoiser {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a dataset of synthetic pairs, or the procedural real benchmark.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; required unless --oracle or --real.
        #[arg(long, conflicts_with_all = ["oracle", "real"])]
        checkpoint: Option<PathBuf>,
        /// Use the analytic class-Gaussian denoiser.
        #[arg(long, conflicts_with = "real")]
        oracle: bool,
        /// Draw the seasonal-shift benchmark instead of sampling.
        #[arg(long)]
        real: bool,
        /// Number of pairs; overrides generate.count or real.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain on synthetic pairs, fine-tune on real ones, report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Synthetic dataset directory or manifest.
        #[arg(long)]
        synthetic: PathBuf,
        /// Real dataset directory or manifest.
        #[arg(long)]
        real: PathBuf,
    },
    /// Validate a dataset and print a summary.
    Inspect {
        /// Dataset directory or manifest.
        dataset: PathBuf,
        /// Write montages of the first samples here.
        #[arg(long)]
        montages: Option<PathBuf>,
        /// Number of montages to write.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        manifest_in(p)
    } else {
        p.to_path_buf()
    }
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig, CliError> {
    let text = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let mut overrides = common.overrides.clone();
    overrides.extend(extra.iter().cloned());
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::resolve(text.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainDenoiser { common } => {
            let cfg = resolve(&common, &[])?;
            let log = cmd_train_denoiser(&cfg, &common.out)?;
            if let Some((head, tail)) = log.head_tail_means(100) {
                println!(
                    "trained {} steps, loss {head:.4} -> {tail:.4}",
                    log.losses.len()
                );
            }
        }
        Command::Generate {
            common,
            checkpoint,
            oracle,
            real,
            count,
        } => {
            let mode = match (checkpoint, oracle, real) {
                (Some(p), _, _) => GenerateMode::Model(p),
                (None, true, _) => GenerateMode::Oracle,
                (None, _, true) => GenerateMode::Real,
                _ => {
                    return Err(CliError::Config(
                        "generate needs --checkpoint, --oracle or --real".into(),
                    ))
                }
            };
            let key = if mode == GenerateMode::Real {
                "real.count"
            } else {
                "generate.count"
            };
            let extra: Vec<String> = count.map(|n| format!("{key}={n}")).into_iter().collect();
            let cfg = resolve(&common, &extra)?;
            let pairs = cmd_generate(&cfg, &mode, &common.out, common.workers)?;
            println!("wrote {} pairs to {}", pairs.len(), common.out.display());
        }
        Command::Eval {
            common,
            synthetic,
            real,
        } => {
            let cfg = resolve(&common, &[])?;
            let report = cmd_eval(
                &cfg,
                &manifest_path(&synthetic),
                &manifest_path(&real),
                &common.out,
                common.workers,
            )?;
            print!("{}", report.to_table());
        }
        Command::Inspect {
            dataset,
            montages,
            limit,
        } => {
            print!(
                "{}",
                cmd_inspect(&manifest_path(&dataset), montages.as_deref(), limit)?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
