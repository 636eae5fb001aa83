use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use fedpdpo_core::data::{encode_all, load_preference_jsonl};
use fedpdpo_core::harness::{
    preference_accuracy, prepare_data, run_ablation, run_experiment, ExperimentConfig, OUTPUT_ROOT_ENV,
};
use fedpdpo_core::model::checkpoint::load_model;
use fedpdpo_core::objectives::gradcheck::gradcheck_pdpo;
use fedpdpo_core::theory::verify_theorems;

#[derive(Parser)]
#[command(name = "fedpdpo", version, about = "Federated personalized preference optimization")]
struct Cli {
    /// Root that relative output directories are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation experiment over every configured seed.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the A1/A2/A3 ablation on identical data and seeds.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Monte Carlo check of the Gumbel preference identities.
    VerifyTheorems {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the loss gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the client split for one seed.
    Partition {
        config: PathBuf,
        /// Only compute and print the plan (required; nothing else is done).
        #[arg(long)]
        dry_run: bool,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Preference accuracy of a saved client model on a JSONL file.
    Eval { checkpoint: PathBuf, jsonl: PathBuf },
}

fn load_config(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Returns whether the command's own checks passed.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { config, output_dir } => {
            print_json(&run_experiment(&load_config(&config, output_dir)?)?)?;
            Ok(true)
        }
        Command::Ablate { config, output_dir } => {
            print_json(&run_ablation(&load_config(&config, output_dir)?)?)?;
            Ok(true)
        }
        Command::VerifyTheorems { n, seed } => {
            let report = verify_theorems(n, seed)?;
            print_json(&report)?;
            Ok(report.pass)
        }
        Command::Gradcheck { dim, seed } => {
            let report = gradcheck_pdpo(dim, seed)?;
            print_json(&report)?;
            Ok(report.pass)
        }
        Command::Partition { config, dry_run, seed } => {
            if !dry_run {
                bail!("partition only supports --dry-run");
            }
            let cfg = load_config(&config, None)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            println!("{}", prepare_data(&cfg, seed)?.plan.to_json()?);
            Ok(true)
        }
        Command::Eval { checkpoint, jsonl } => {
            let (model, vocab) =
                load_model(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let Some(vocab) = vocab else {
                bail!("{} carries no vocabulary", checkpoint.display());
            };
            let triples = load_preference_jsonl(&jsonl)?;
            let accuracy = preference_accuracy(&model, &encode_all(&vocab, &triples))?;
            print_json(&json!({
                "checkpoint": checkpoint,
                "data": jsonl,
                "n_samples": triples.len(),
                "accuracy": accuracy,
            }))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(root) = &cli.output_root {
        // The harness reads the root from the environment.
        std::env::set_var(OUTPUT_ROOT_ENV, root);
    }
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
