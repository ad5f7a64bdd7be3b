use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{cosine_lr, sgd_nesterov_step, SgdConfig, Velocity};
use crate::augment::{strong_augment, weak_augment, AugmentPolicy};
use crate::data::{BatchPair, SslSplit};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::model::{EmaState, ModelParams};
use crate::objective::{
    aggregate_pseudo, aggregation_loss, build_embedding_set, contrastive_matrix, distribution_align,
    make_pseudo_labels, overall_loss, raw_confidence_mask, scl_loss_reduced, similarity_on, supervised_loss,
    unsupervised_loss, AggregatedLabels, DaState, EmbeddingSet, LossTerms, LossWeights, Origin, PseudoLabels,
};

/// Everything that changes from step to step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub ema: EmaState,
    pub da: DaState,
    pub velocity: Velocity,
    /// Steps completed so far.
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg.arch, cfg.seed)?;
        Ok(TrainState {
            ema: EmaState::new(&params, cfg.ema_decay)?,
            da: DaState::new(cfg.arch.num_classes),
            velocity: Velocity::zeros(&params),
            params,
            step: 0,
        })
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_scl: f64,
    pub loss_agg: f64,
    pub loss: f64,
    pub lr: f64,
    /// Fraction of the unlabeled batch above the confidence threshold.
    pub mask_ratio: f64,
    /// Percent of the unlabeled batch whose predicted class disagrees with
    /// the hidden label; `None` when no hidden labels are known.
    pub pl_error: Option<f64>,
    /// Unlabeled entries admitted to the embedding set.
    pub z_unlabeled: usize,
}

/// The augmented tensors of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// Weak views of the labeled batch, `[B, d]`.
    pub labeled: Tensor,
    pub labels: Vec<usize>,
    /// Weak views of the unlabeled batch, `[μB, d]`.
    pub weak: Tensor,
    /// Strong views of the same unlabeled examples, `[μB, d]`.
    pub strong: Tensor,
    /// Hidden labels of the unlabeled batch, for diagnostics only.
    pub hidden: Vec<Option<usize>>,
}

/// Gathers and augments one batch.
pub fn prepare_inputs<R: Rng + ?Sized>(
    split: &SslSplit,
    batch: &BatchPair,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<StepInputs> {
    let d = split.dim;
    let mut labeled = Vec::with_capacity(batch.labeled.len() * d);
    let mut labels = Vec::with_capacity(batch.labeled.len());
    for &i in &batch.labeled {
        let e = split
            .labeled
            .get(i)
            .ok_or_else(|| invalid(format!("labeled index {i} out of range")))?;
        let y = e
            .label
            .observed()
            .ok_or_else(|| invalid(format!("labeled example {i} has no observed label")))?;
        labeled.extend(weak_augment(&e.features, policy, rng));
        labels.push(y);
    }
    let n = batch.unlabeled.len();
    let (mut weak, mut strong, mut hidden) = (
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * d),
        Vec::with_capacity(n),
    );
    for &i in &batch.unlabeled {
        let e = split
            .unlabeled
            .get(i)
            .ok_or_else(|| invalid(format!("unlabeled index {i} out of range")))?;
        weak.extend(weak_augment(&e.features, policy, rng));
        strong.extend(strong_augment(&e.features, policy, rng));
        hidden.push(e.label.truth());
    }
    Ok(StepInputs {
        labeled: Tensor::matrix(batch.labeled.len(), d, labeled)?,
        labels,
        weak: Tensor::matrix(n, d, weak)?,
        strong: Tensor::matrix(n, d, strong)?,
        hidden,
    })
}

/// Constants of one step, derived from the weak views without gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    /// Raw weak-view predictions `p^w`.
    pub weak_probs: Tensor,
    pub pseudo: PseudoLabels,
    /// DA state after this batch.
    pub da: DaState,
    /// Mask used for the diagnostics (raw or DA-adjusted confidences).
    pub confident: Vec<bool>,
    pub embeddings: EmbeddingSet,
    /// `W` over `embeddings`.
    pub contrastive: Tensor,
    /// Present when the aggregation term is configured.
    pub aggregated: Option<AggregatedLabels>,
}

pub fn compute_targets(
    params: &ModelParams,
    inputs: &StepInputs,
    da: &DaState,
    cfg: &TrainConfig,
) -> Result<StepTargets> {
    let (p_w, z_w) = params.forward(&inputs.weak)?;
    let (aligned, da) = if cfg.use_da {
        distribution_align(&p_w, da)?
    } else {
        (p_w.clone(), da.clone())
    };
    let pseudo = make_pseudo_labels(aligned, cfg.tau);
    let filter = if cfg.unify_thresholds {
        pseudo.mask.clone()
    } else {
        raw_confidence_mask(&p_w, cfg.tau)
    };
    let embeddings = build_embedding_set(&inputs.labels, &pseudo, &filter, cfg.embeddings)?;
    let contrastive = contrastive_matrix(&embeddings.labels());
    let aggregated = if cfg.lambda_agg > 0.0 {
        let source = if cfg.aggregate_with_da { &pseudo.aligned } else { &p_w };
        Some(aggregate_pseudo(&z_w, source, cfg.neighbors, cfg.tau1)?)
    } else {
        None
    };
    let confident = if cfg.diagnostics_with_da {
        pseudo.mask.clone()
    } else {
        (0..p_w.rows())
            .map(|b| p_w.row(b).iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= cfg.tau)
            .collect()
    };
    Ok(StepTargets {
        weak_probs: p_w,
        pseudo,
        da,
        confident,
        embeddings,
        contrastive,
        aggregated,
    })
}

/// Records the loss terms on `tape` with the model parameters given as
/// `vars`. A term is built only when its configured weight is positive;
/// `weights` (possibly gated) decide what enters the total.
pub fn record_losses(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    inputs: &StepInputs,
    targets: &StepTargets,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(Var, LossTerms)> {
    // tag numeric failures with the term that produced them
    let named = |term: &'static str| {
        move |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{term}: {what}")),
            other => other,
        }
    };
    let xl = tape.constant(inputs.labeled.clone());
    let labeled = params.forward_on(tape, vars, xl)?;
    let supervised = supervised_loss(tape, &inputs.labels, labeled.probs).map_err(named("loss_x"))?;
    let zero = tape.constant(Tensor::scalar(0.0));
    let mut terms = LossTerms {
        supervised,
        unsupervised: zero,
        contrastive: zero,
        aggregation: zero,
    };
    if cfg.lambda_u > 0.0 || cfg.lambda_scl > 0.0 || targets.aggregated.is_some() {
        let xs = tape.constant(inputs.strong.clone());
        let strong = params.forward_on(tape, vars, xs)?;
        if cfg.lambda_u > 0.0 {
            terms.unsupervised = unsupervised_loss(tape, &targets.pseudo, strong.probs).map_err(named("loss_u"))?;
        }
        if cfg.lambda_scl > 0.0 && !targets.embeddings.is_empty() {
            let z = targets.embeddings.gather(tape, labeled.embeddings, strong.embeddings)?;
            let s = similarity_on(tape, z).map_err(named("loss_scl"))?;
            terms.contrastive = scl_loss_reduced(tape, &targets.contrastive, s, cfg.temperature, cfg.scl_reduction)
                .map_err(named("loss_scl"))?;
        }
        if let Some(agg) = &targets.aggregated {
            terms.aggregation = aggregation_loss(tape, agg, strong.probs).map_err(named("loss_agg"))?;
        }
    }
    let total = overall_loss(tape, &terms, weights).map_err(named("loss"))?;
    Ok((total, terms))
}

/// Loss weights in effect at step `n`: aggregation is held at zero during
/// the warm-up.
pub fn gated_weights(cfg: &TrainConfig, n: usize) -> LossWeights {
    let mut w = cfg.loss_weights();
    if n < cfg.effective_warmup() {
        w.lambda_agg = 0.0;
    }
    w
}

/// Deterministic augmentation stream for step `n` of a run.
pub fn step_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
    rng.set_stream(n as u64);
    rng
}

/// One optimizer step on `state`. On error `state` is left untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &BatchPair,
    split: &SslSplit,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let n = state.step;
    let lr = cosine_lr(n, cfg.steps, cfg.base_lr)?;
    let inputs = prepare_inputs(split, batch, &cfg.aug, &mut step_rng(cfg.seed, n))?;
    let targets = compute_targets(&state.params, &inputs, &state.da, cfg)?;

    let mut tape = Tape::new();
    let vars = state.params.leaves(&mut tape);
    let (total, terms) = record_losses(
        &mut tape,
        &state.params,
        &vars,
        &inputs,
        &targets,
        cfg,
        &gated_weights(cfg, n),
    )?;
    let value = |v: Var| tape.value(v).item();
    let values = [
        ("loss_x", value(terms.supervised)?),
        ("loss_u", value(terms.unsupervised)?),
        ("loss_scl", value(terms.contrastive)?),
        ("loss_agg", value(terms.aggregation)?),
        ("loss", value(total)?),
    ];
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        let dump: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(Error::NonFinite(format!(
            "{name} at step {} ({})",
            n + 1,
            dump.join(", ")
        )));
    }
    let grads = tape.gradient(total, &vars)?;

    let mut params = state.params.clone();
    let mut velocity = state.velocity.clone();
    sgd_nesterov_step(
        &mut params,
        &grads,
        &mut velocity,
        SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    )?;
    state.ema.update(&params)?;
    state.params = params;
    state.velocity = velocity;
    state.da = targets.da.clone();
    state.step += 1;

    let rows = inputs.hidden.len();
    let mask_ratio = targets.confident.iter().filter(|&&c| c).count() as f64 / rows as f64;
    let predicted = if cfg.diagnostics_with_da {
        &targets.pseudo.aligned
    } else {
        &targets.weak_probs
    };
    let (mut known, mut wrong) = (0usize, 0usize);
    for (b, truth) in inputs.hidden.iter().enumerate() {
        if let Some(y) = truth {
            known += 1;
            let row = predicted.row(b);
            let guess = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            wrong += usize::from(guess != *y);
        }
    }
    Ok(StepMetrics {
        step: n + 1,
        loss_x: values[0].1,
        loss_u: values[1].1,
        loss_scl: values[2].1,
        loss_agg: values[3].1,
        loss: values[4].1,
        lr,
        mask_ratio,
        pl_error: (known > 0).then(|| 100.0 * wrong as f64 / known as f64),
        z_unlabeled: targets.embeddings.count(Origin::Unlabeled),
    })
}
