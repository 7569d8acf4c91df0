//! Batch command-line front end for the multiscale stress surrogate
//! pipeline. Each run takes a JSON config (flags can override top-level
//! keys), owns its output directory, and echoes the resolved config to
//! `runspec.json`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microstress::pipeline;

#[derive(Parser)]
#[command(
    name = "microstress",
    about = "FE data generation, surrogate training, evaluation, prediction and selective learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a patch dataset from random structures and FE solves.
    Gen(CommonArgs),
    /// Train a deterministic or Bayesian surrogate on a dataset.
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset (accuracy vs threshold).
    Eval(CommonArgs),
    /// Full-field prediction on one structure against the FE oracle.
    Predict(CommonArgs),
    /// Selective-learning experiment (max-variance vs random acquisition).
    Al(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override a top-level config key, e.g. --set seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn load_config(args: &CommonArgs) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read config {}: {e}", args.config.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("config parse error: {e}"))?;
    for set in &args.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {set:?}"))?;
        let parsed: serde_json::Value =
            serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
        value
            .as_object_mut()
            .ok_or_else(|| "config must be a JSON object".to_string())?
            .insert(key.to_string(), parsed);
    }
    Ok(value)
}

fn run() -> Result<(), String> {
    microstress::init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(args) => {
            let cfg: pipeline::GenConfig =
                serde_json::from_value(load_config(&args)?).map_err(|e| e.to_string())?;
            let report = pipeline::cmd_gen(&cfg, &args.out).map_err(|e| e.to_string())?;
            println!(
                "gen: {} / {} structures, {} patches -> {}",
                report.n_structures_ok,
                report.n_structures_requested,
                report.n_patches,
                args.out.display()
            );
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Train(args) => {
            let cfg: pipeline::TrainCmdConfig =
                serde_json::from_value(load_config(&args)?).map_err(|e| e.to_string())?;
            let history = pipeline::cmd_train(&cfg, &args.out).map_err(|e| e.to_string())?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "train: {} epochs, final loss {:.6}, val acc {:?} -> {}",
                    history.epochs.len(),
                    last.train_loss,
                    last.val_accuracy,
                    args.out.display()
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let cfg: pipeline::EvalCmdConfig =
                serde_json::from_value(load_config(&args)?).map_err(|e| e.to_string())?;
            let metrics = pipeline::cmd_eval(&cfg, &args.out).map_err(|e| e.to_string())?;
            for (t, a) in &metrics.accuracy {
                println!("accuracy@{t} = {a:.4}");
            }
            Ok(())
        }
        Command::Predict(args) => {
            let cfg: pipeline::PredictCmdConfig =
                serde_json::from_value(load_config(&args)?).map_err(|e| e.to_string())?;
            let report = pipeline::cmd_predict(&cfg, &args.out).map_err(|e| e.to_string())?;
            println!(
                "predict: max truth {:.4}, max prediction {:.4}, max-value rel err {:.4}",
                report.max_truth, report.max_prediction, report.max_value_rel_error
            );
            Ok(())
        }
        Command::Al(args) => {
            let cfg: pipeline::AlCmdConfig =
                serde_json::from_value(load_config(&args)?).map_err(|e| e.to_string())?;
            let summary = pipeline::cmd_al(&cfg, &args.out).map_err(|e| e.to_string())?;
            println!("al: {} runs -> {}", summary.histories.len(), args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
