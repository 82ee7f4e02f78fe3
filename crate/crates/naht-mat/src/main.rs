//! Command-line experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use naht_mat::harness::{
    cmd_ablate, cmd_check, cmd_describe, cmd_eval, cmd_train, plot_from_run_dirs,
    ExperimentConfig, HarnessError, Variant,
};
use naht_mat::teammates::PoolRole;

#[derive(Parser)]
#[command(
    name = "naht-mat",
    about = "History-conditioned multi-agent transformer for N-agent ad hoc teamwork"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant on every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the train or test pool.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Which pool to evaluate against.
        #[arg(long, default_value = "test")]
        pool: String,
        /// Episodes per teammate instance.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Evaluation seed (defaults to the config's seeds).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run all three variants with shared pools and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run variants in parallel worker threads (capped by
        /// NAHT_MAT_THREADS) with fully isolated state.
        #[arg(long)]
        parallel: bool,
    },
    /// Run the property suites (gradients, masking, causality, sampler
    /// uniformity, GAE oracle).
    Check,
    /// Print the experiment config and the model's layer table.
    Describe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Emit a plot-ready CSV from finished run directories.
    Plot {
        /// Variant run directories (each containing config.toml and
        /// seed_*/metrics.jsonl).
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(
    path: &PathBuf,
    seed: Option<u64>,
    variant: Option<Variant>,
) -> Result<(ExperimentConfig, String), HarnessError> {
    let (mut cfg, raw) = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(variant) = variant {
        cfg.run.variant = variant;
    }
    Ok((cfg, raw))
}

fn run() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            variant,
            out,
        } => {
            let (cfg, raw) = load_config(&config, seed, variant)?;
            let summary = cmd_train(&cfg, &raw, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            Ok(())
        }
        Command::Eval {
            config,
            ckpt,
            pool,
            episodes,
            seed,
        } => {
            let (cfg, _) = load_config(&config, None, None)?;
            let role = match pool.as_str() {
                "train" => PoolRole::Train,
                "test" => PoolRole::Test,
                other => {
                    return Err(HarnessError::BadConfig(format!(
                        "--pool must be train or test, got {other}"
                    )))
                }
            };
            let seeds: Vec<u64> = seed.map(|s| vec![s]).unwrap_or_default();
            let report = cmd_eval(&cfg, &ckpt, role, episodes, &seeds)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Command::Ablate {
            config,
            out,
            parallel,
        } => {
            let (cfg, raw) = load_config(&config, None, None)?;
            let summary = cmd_ablate(&cfg, &raw, parallel, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            Ok(())
        }
        Command::Check => {
            let (results, ok) = cmd_check();
            for r in &results {
                println!(
                    "[{}] {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            if ok {
                Ok(())
            } else {
                Err(HarnessError::BadConfig("property checks failed".into()))
            }
        }
        Command::Describe { config, variant } => {
            let (cfg, _) = load_config(&config, None, variant)?;
            print!("{}", cmd_describe(&cfg)?);
            Ok(())
        }
        Command::Plot { runs, out } => {
            plot_from_run_dirs(&runs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
