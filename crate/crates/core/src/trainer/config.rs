use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::{imbalanced_blobs, make_blobs, make_imbalanced_split, split_ssl, Dataset, SslSplit};
use crate::error::{invalid, Error, Result};
use crate::model::Arch;
use crate::objective::{EmbeddingSources, LossWeights, SclReduction};

/// Fraction of the run before the aggregation loss switches on: 30·2¹⁰ of 2²⁰.
pub const WARMUP_FRACTION: f64 = 30.0 * 1024.0 / 1_048_576.0;

/// Every knob of a training run.
///
/// Loaded from a TOML file of `key = value` lines; dotted keys address the
/// nested sections, e.g. `aug.weak.sigma = 0.05` or `arch.hidden = [64, 64]`.
/// Missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled-to-labeled batch ratio `μ`.
    pub mu: usize,
    /// Total optimizer steps `N`.
    pub steps: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_u: f64,
    pub lambda_scl: f64,
    pub lambda_agg: f64,
    /// Pseudo-label confidence threshold `τ`.
    pub tau: f64,
    /// Aggregated-label confidence threshold `τ₁`.
    pub tau1: f64,
    /// InfoNCE temperature `t`.
    pub temperature: f64,
    pub scl_reduction: SclReduction,
    /// EMA decay `m`.
    pub ema_decay: f64,
    /// Neighbors `K` in label aggregation; 0 disables aggregation.
    pub neighbors: usize,
    /// Steps before the aggregation loss is enabled; `None` scales with `steps`.
    pub warmup_steps: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,
    /// Distribution alignment of weak-view predictions.
    pub use_da: bool,
    /// Filter unlabeled embeddings with the DA-adjusted `≥ τ` mask instead of
    /// the raw `> τ` one.
    pub unify_thresholds: bool,
    /// Aggregate DA-adjusted rather than raw predictions.
    pub aggregate_with_da: bool,
    /// Pseudo-label diagnostics on DA-adjusted rather than raw predictions.
    pub diagnostics_with_da: bool,
    pub embeddings: EmbeddingSources,
    pub arch: Arch,
    pub aug: AugmentPolicy,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            mu: 7,
            steps: 3000,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_u: 1.0,
            lambda_scl: 1.0,
            lambda_agg: 0.5,
            tau: 0.95,
            tau1: 0.9,
            temperature: 0.5,
            scl_reduction: SclReduction::Mean,
            ema_decay: 0.999,
            neighbors: 10,
            warmup_steps: None,
            eval_every: 100,
            seed: 0,
            use_da: true,
            unify_thresholds: false,
            aggregate_with_da: false,
            diagnostics_with_da: false,
            embeddings: EmbeddingSources::default(),
            arch: Arch::default(),
            aug: AugmentPolicy::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_u: self.lambda_u,
            lambda_scl: self.lambda_scl,
            lambda_agg: self.lambda_agg,
        }
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.mu * self.batch_size
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * WARMUP_FRACTION).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mu == 0 {
            return Err(invalid("batch_size and mu must be positive"));
        }
        if self.steps == 0 || self.eval_every == 0 {
            return Err(invalid("steps and eval_every must be positive"));
        }
        if [self.lambda_u, self.lambda_scl, self.lambda_agg]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(invalid("loss weights must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("ema_decay must be in [0, 1] and momentum in [0, 1)"));
        }
        if self.neighbors > self.unlabeled_batch() {
            return Err(invalid(format!(
                "neighbors = {} exceeds the unlabeled batch of {}",
                self.neighbors,
                self.unlabeled_batch()
            )));
        }
        if self.arch.num_classes != self.data.classes || self.arch.input_dim != self.data.dim {
            return Err(invalid(format!(
                "arch ({} inputs, {} classes) disagrees with data ({} dims, {} classes)",
                self.arch.input_dim, self.arch.num_classes, self.data.dim, self.data.classes
            )));
        }
        self.arch.validate()?;
        self.aug.validate()?;
        Ok(())
    }

    /// Configuration with every loss weight but the supervised one at zero.
    pub fn supervised_only(&self) -> Self {
        TrainConfig {
            lambda_u: 0.0,
            lambda_scl: 0.0,
            lambda_agg: 0.0,
            ..self.clone()
        }
    }

    /// Consistency on hard pseudo-labels only (with DA): no embedding
    /// alignment and no aggregation.
    pub fn single_level(&self) -> Self {
        TrainConfig {
            lambda_scl: 0.0,
            lambda_agg: 0.0,
            use_da: true,
            ..self.clone()
        }
    }
}

/// Named variants for the ablation study.
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with_sources = |labeled, unlabeled| TrainConfig {
        embeddings: EmbeddingSources { labeled, unlabeled },
        ..cfg.clone()
    };
    vec![
        ("full", cfg.clone()),
        (
            "without_alignment",
            TrainConfig {
                lambda_scl: 0.0,
                ..cfg.clone()
            },
        ),
        (
            "without_aggregation",
            TrainConfig {
                lambda_agg: 0.0,
                ..cfg.clone()
            },
        ),
        ("without_labeled_embeddings", with_sources(false, true)),
        ("without_unlabeled_embeddings", with_sources(true, false)),
        ("single_level", cfg.single_level()),
        ("supervised_only", cfg.supervised_only()),
    ]
}

/// Synthetic problem definition: blobs split into `X`, `U` and a balanced
/// test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    /// Training pool per class (balanced case); `X` takes `labels_per_class`
    /// of it and `U` the rest.
    pub train_per_class: usize,
    pub labels_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    /// Long-tailed split: when set, `train_per_class`/`labels_per_class` are
    /// ignored in favour of `majority`, `gamma` and `beta`.
    pub imbalance: Option<ImbalanceConfig>,
    pub unlabeled_includes_labeled: bool,
    /// Dataset seed; defaults to the run seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceConfig {
    pub majority: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 3,
            dim: 2,
            train_per_class: 204,
            labels_per_class: 4,
            test_per_class: 100,
            spread: 0.45,
            imbalance: None,
            unlabeled_includes_labeled: false,
            seed: None,
        }
    }
}

impl DataConfig {
    /// Parses `key=value` pairs separated by commas, e.g.
    /// `classes=3,dim=2,spread=0.4`, on top of the defaults.
    pub fn parse_overrides(&self, spec: &str) -> Result<Self> {
        let mut out = self.clone();
        let mut imbalance = out.imbalance.clone().unwrap_or(ImbalanceConfig {
            majority: 500,
            gamma: 1.0,
            beta: 0.1,
        });
        let mut touched_imbalance = false;
        for pair in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{k}: {e}"));
            match k {
                "classes" => out.classes = v.parse().map_err(|e| bad(&e))?,
                "dim" => out.dim = v.parse().map_err(|e| bad(&e))?,
                "train_per_class" => out.train_per_class = v.parse().map_err(|e| bad(&e))?,
                "labels_per_class" => out.labels_per_class = v.parse().map_err(|e| bad(&e))?,
                "test_per_class" => out.test_per_class = v.parse().map_err(|e| bad(&e))?,
                "spread" => out.spread = v.parse().map_err(|e| bad(&e))?,
                "seed" => out.seed = Some(v.parse().map_err(|e| bad(&e))?),
                "majority" => {
                    imbalance.majority = v.parse().map_err(|e| bad(&e))?;
                    touched_imbalance = true;
                }
                "gamma" => {
                    imbalance.gamma = v.parse().map_err(|e| bad(&e))?;
                    touched_imbalance = true;
                }
                "beta" => {
                    imbalance.beta = v.parse().map_err(|e| bad(&e))?;
                    touched_imbalance = true;
                }
                other => return Err(Error::Config(format!("unknown synthetic key {other:?}"))),
            }
        }
        if touched_imbalance {
            out.imbalance = Some(imbalance);
        }
        Ok(out)
    }

    /// Generates `(split, test set)` for a run.
    pub fn build(&self, run_seed: u64) -> Result<(SslSplit, Dataset)> {
        let seed = self.seed.unwrap_or(run_seed);
        // decorrelated streams for the pool, the split and the test set
        let pool_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let test_seed = pool_seed.wrapping_add(0x5851_F42D_4C95_7F2D);
        let split = match &self.imbalance {
            Some(imb) => {
                let spec = make_imbalanced_split(self.classes, imb.majority, imb.gamma, imb.beta, pool_seed)?;
                imbalanced_blobs(&spec, self.dim, self.spread)?
            }
            None => {
                let pool = make_blobs(self.classes, self.dim, self.train_per_class, self.spread, pool_seed)?;
                split_ssl(&pool, self.labels_per_class, seed)?
            }
        };
        let split = if self.unlabeled_includes_labeled {
            split.with_labeled_in_unlabeled()
        } else {
            split
        };
        let test = make_blobs(self.classes, self.dim, self.test_per_class, self.spread, test_seed)?;
        Ok((split, test))
    }
}
