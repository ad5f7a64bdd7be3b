use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualmatch::data::{load_dataset, Dataset, SslSplit};
use dualmatch::evaluation::{config_fingerprint, evaluate, pseudo_label_quality, run_suite};
use dualmatch::model::{load_checkpoint, save_checkpoint};
use dualmatch::trainer::{train, TrainConfig};
use dualmatch::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dualmatch", version, about = "Semi-supervised training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its history, checkpoints and summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training data; `-1` labels form the unlabeled set.
        #[arg(long, conflicts_with = "synthetic")]
        dataset: Option<PathBuf>,
        /// Test data for the periodic EMA evaluation.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Synthetic data, e.g. `blobs:classes=3,dim=2,spread=0.4`.
        #[arg(long)]
        synthetic: Option<String>,
        /// Where to write the EMA checkpoint (default `OUT/ema.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also feed the labeled examples to the unlabeled stream.
        #[arg(long)]
        unlabeled_includes_labeled: bool,
    },
    /// Train once per seed and write a JSON report plus CSV curves.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json serializes"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    dataset: Option<&Path>,
    test: Option<&Path>,
    synthetic: Option<&str>,
    checkpoint: Option<&Path>,
    unlabeled_includes_labeled: bool,
) -> Result<serde_json::Value> {
    let mut cfg = load_config(config)?;
    cfg.seed = seed;
    if let Some(spec) = synthetic {
        let rest = spec
            .strip_prefix("blobs:")
            .or_else(|| (spec == "blobs").then_some(""))
            .ok_or_else(|| Error::Config(format!("unknown synthetic generator {spec:?}")))?;
        cfg.data = cfg.data.parse_overrides(rest)?;
        cfg.arch.input_dim = cfg.data.dim;
        cfg.arch.num_classes = cfg.data.classes;
    }
    cfg.data.unlabeled_includes_labeled |= unlabeled_includes_labeled;
    cfg.validate()?;

    let (split, synthetic_test) = match dataset {
        Some(path) => {
            let ds = load_dataset(path)?;
            let split = SslSplit::from_dataset(&ds);
            let split = if cfg.data.unlabeled_includes_labeled {
                split.with_labeled_in_unlabeled()
            } else {
                split
            };
            (split, None)
        }
        None => {
            let (split, test) = cfg.data.build(seed)?;
            (split, Some(test))
        }
    };
    let test: Option<Dataset> = match test {
        Some(p) => Some(load_dataset(p)?),
        None => synthetic_test,
    };

    let outcome = train(&cfg, &split, test.as_ref())?;
    std::fs::create_dir_all(out)?;
    outcome.history.save_csv(out.join("history.csv"))?;
    save_checkpoint(&outcome.params, out.join("model.ckpt"))?;
    let ema_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("ema.ckpt"));
    save_checkpoint(&outcome.ema, &ema_path)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;

    let quality = pseudo_label_quality(&outcome.ema, &split.unlabeled, cfg.tau)?;
    let summary = json!({
        "seed": seed,
        "steps": cfg.steps,
        "fingerprint": config_fingerprint(&cfg),
        "test_error_ema": outcome.history.final_test_error(),
        "pseudo_label": quality,
        "checkpoint": ema_path,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            dataset,
            test,
            synthetic,
            checkpoint,
            unlabeled_includes_labeled,
        } => cmd_train(
            config.as_deref(),
            seed,
            &out,
            dataset.as_deref(),
            test.as_deref(),
            synthetic.as_deref(),
            checkpoint.as_deref(),
            unlabeled_includes_labeled,
        ),
        Command::Suite { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let suite = run_suite(&cfg, &seeds)?;
            suite.write(&out)?;
            Ok(json!({
                "fingerprint": suite.report.fingerprint,
                "mean": suite.report.mean,
                "std": suite.report.std,
                "report": out.join("report.json"),
            }))
        }
        Command::Eval { checkpoint, dataset } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            Ok(json!({ "test_error": evaluate(&model, &ds)? }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
