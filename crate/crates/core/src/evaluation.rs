//! Test error, pseudo-label diagnostics and multi-seed reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Example};
use crate::diffcore::Tensor;
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::trainer::{train, History, TrainConfig};

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
}

fn features(examples: &[&Example], dim: usize) -> Result<Tensor> {
    let data = examples.iter().flat_map(|e| e.features.iter().copied()).collect();
    Tensor::matrix(examples.len(), dim, data)
}

/// Percent of `test` examples whose argmax prediction differs from the
/// true label. Examples without a known label are skipped.
pub fn evaluate(model: &ModelParams, test: &Dataset) -> Result<f64> {
    let known: Vec<&Example> = test.examples.iter().filter(|e| e.label.truth().is_some()).collect();
    if known.is_empty() {
        return Err(invalid("evaluation over an empty test set"));
    }
    let p = model.predict(&features(&known, test.dim)?)?;
    let wrong = known
        .iter()
        .enumerate()
        .filter(|(b, e)| Some(argmax(p.row(*b))) != e.label.truth())
        .count();
    Ok(100.0 * wrong as f64 / known.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    /// Percent of `U` (with hidden labels) whose raw argmax is wrong.
    pub error: f64,
    /// Fraction of `U` with raw max confidence `≥ τ`.
    pub ratio: f64,
}

/// Pseudo-label diagnostics over all of `unlabeled`, from raw (non-aligned)
/// predictions. An empty set yields zero error and zero ratio.
pub fn pseudo_label_quality(model: &ModelParams, unlabeled: &[Example], tau: f64) -> Result<PseudoLabelQuality> {
    if unlabeled.is_empty() {
        return Ok(PseudoLabelQuality { error: 0.0, ratio: 0.0 });
    }
    let all: Vec<&Example> = unlabeled.iter().collect();
    let p = model.predict(&features(&all, model.arch().input_dim)?)?;
    let (mut known, mut wrong, mut confident) = (0usize, 0usize, 0usize);
    for (b, e) in all.iter().enumerate() {
        let row = p.row(b);
        let c = argmax(row);
        if row[c] >= tau {
            confident += 1;
        }
        if let Some(y) = e.label.truth() {
            known += 1;
            wrong += usize::from(c != y);
        }
    }
    Ok(PseudoLabelQuality {
        error: if known == 0 {
            0.0
        } else {
            100.0 * wrong as f64 / known as f64
        },
        ratio: confident as f64 / all.len() as f64,
    })
}

/// SHA-256 of the configuration's JSON form.
pub fn config_fingerprint(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Final EMA-model test error, percent.
    pub test_error: f64,
    pub pseudo_label: PseudoLabelQuality,
    /// `(step, test error)` at each evaluation.
    pub curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
}

impl ExperimentReport {
    pub fn from_runs(fingerprint: String, runs: Vec<SeedResult>) -> Result<Self> {
        if runs.is_empty() {
            return Err(invalid("a report needs at least one run"));
        }
        let errors: Vec<f64> = runs.iter().map(|r| r.test_error).collect();
        let (mean, std) = mean_std(&errors);
        Ok(ExperimentReport {
            fingerprint,
            runs,
            mean,
            std,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Evaluation curves of every seed: `seed,step,test_error_ema`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("seed,step,test_error_ema\n");
        for r in &self.runs {
            for (step, e) in &r.curve {
                out.push_str(&format!("{},{step},{e}\n", r.seed));
            }
        }
        out
    }
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// A finished suite: the report plus each seed's full history.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub report: ExperimentReport,
    pub histories: Vec<(u64, History)>,
}

impl SuiteOutcome {
    /// Writes `report.json`, `curves.csv` and `history_seed{S}.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report.to_json())?;
        std::fs::write(dir.join("curves.csv"), self.report.curves_csv())?;
        for (seed, h) in &self.histories {
            h.save_csv(dir.join(format!("history_seed{seed}.csv")))?;
        }
        Ok(())
    }
}

/// Trains `cfg` once per seed on synthetic data built from `cfg.data` and
/// aggregates the final EMA test errors.
pub fn run_suite(cfg: &TrainConfig, seeds: &[u64]) -> Result<SuiteOutcome> {
    if seeds.is_empty() {
        return Err(invalid("suite needs at least one seed"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    let mut histories = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let (split, test) = run_cfg.data.build(seed)?;
        let out = train(&run_cfg, &split, Some(&test))?;
        runs.push(SeedResult {
            seed,
            test_error: out
                .history
                .final_test_error()
                .expect("train evaluates after the last step"),
            pseudo_label: pseudo_label_quality(&out.ema, &split.unlabeled, cfg.tau)?,
            curve: out.history.test_curve(),
        });
        histories.push((seed, out.history));
    }
    Ok(SuiteOutcome {
        report: ExperimentReport::from_runs(config_fingerprint(cfg), runs)?,
        histories,
    })
}
