use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::step::{train_step, StepMetrics, TrainState};
use crate::data::{BatchSampler, Dataset, SslSplit};
use crate::error::{invalid, Result};
use crate::evaluation::evaluate;
use crate::model::ModelParams;

pub const HISTORY_HEADER: &str = "step,loss_x,loss_u,loss_scl,loss_agg,lr,mask_ratio,pl_error,test_error_ema";

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub metrics: StepMetrics,
    /// EMA-model test error in percent, filled on evaluation steps.
    pub test_error_ema: Option<f64>,
}

/// One row per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

// Debug formatting is round-trip exact and switches to exponent form for
// very large or small magnitudes
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                m.step,
                num(m.loss_x),
                num(m.loss_u),
                num(m.loss_scl),
                num(m.loss_agg),
                num(m.lr),
                num(m.mask_ratio),
                opt(m.pl_error),
                opt(r.test_error_ema)
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// `(step, error)` at every evaluation.
    pub fn test_curve(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.test_error_ema.map(|e| (r.metrics.step, e)))
            .collect()
    }

    pub fn final_test_error(&self) -> Option<f64> {
        self.test_curve().last().map(|&(_, e)| e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub history: History,
}

/// Runs `cfg.steps` steps, evaluating the EMA model on `test` every
/// `eval_every` steps and after the last one.
pub fn train(cfg: &TrainConfig, split: &SslSplit, test: Option<&Dataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.classes != cfg.arch.num_classes || split.dim != cfg.arch.input_dim {
        return Err(invalid(format!(
            "split has {} classes over {} dims; the model expects {} over {}",
            split.classes, split.dim, cfg.arch.num_classes, cfg.arch.input_dim
        )));
    }
    let mut state = TrainState::new(cfg)?;
    let mut sampler = BatchSampler::new(
        split.labeled.len(),
        split.unlabeled.len(),
        cfg.batch_size,
        cfg.mu,
        cfg.seed.wrapping_add(1),
    )?;
    let mut history = History::default();
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch();
        let metrics = train_step(&mut state, &batch, split, cfg)?;
        let due = metrics.step % cfg.eval_every == 0 || metrics.step == cfg.steps;
        let test_error_ema = match test {
            Some(t) if due => Some(evaluate(&state.ema.shadow, t)?),
            _ => None,
        };
        history.rows.push(HistoryRow {
            metrics,
            test_error_ema,
        });
    }
    Ok(TrainOutcome {
        params: state.params,
        ema: state.ema.shadow,
        history,
    })
}
