//! Loss terms and the constructions feeding them.
//!
//! - supervised cross-entropy on the labeled batch
//! - distribution alignment (DA) and thresholded hard pseudo-labels, giving
//!   the consistency loss on strong views
//! - the supervised contrastive matrix `W`, the cosine-similarity matrix `S`
//!   and the InfoNCE alignment loss between them
//! - neighbor-aggregated soft pseudo-labels and their loss
//!
//! Pseudo-labels, aggregated targets and masks are plain tensors: they are
//! computed from the weak views and enter the tape as constants, so no
//! gradient flows through a target.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diffcore::{check_distribution, Tape, Tensor, Var, LOG_CLAMP};
use crate::error::{invalid, Error, Result};

/// Number of batch marginals the DA buffer keeps.
pub const DA_CAPACITY: usize = 32;

fn argmax(row: &[f64]) -> usize {
    // strict `>` keeps the lowest index among ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `Σ_b weight_b H(target_b, p_b)` on the tape, treating targets as constants.
fn weighted_cross_entropy(tape: &mut Tape, targets: &Tensor, weights: &[f64], p: Var) -> Result<Var> {
    let pv = tape.value(p);
    if pv.rows() != targets.rows() || pv.cols() != targets.cols() || weights.len() != pv.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!(
                "pred {:?}, targets {:?}, {} weights",
                pv.shape(),
                targets.shape(),
                weights.len()
            ),
        });
    }
    let c = targets.cols();
    let coeffs: Vec<f64> = targets
        .data()
        .iter()
        .enumerate()
        .map(|(k, t)| -weights[k / c] * t)
        .collect();
    let logp = tape.log_clamped(p)?;
    tape.weighted_sum(logp, Tensor::matrix(targets.rows(), c, coeffs)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(invalid(format!("label {y} outside [0, {classes})")));
        }
        t.row_mut(i)[y] = 1.0;
    }
    Ok(t)
}

/// `L_x = 1/B Σ_b H(y_b, p_b)`.
pub fn supervised_loss(tape: &mut Tape, labels: &[usize], p: Var) -> Result<Var> {
    if labels.is_empty() {
        return Err(invalid("supervised loss over an empty batch"));
    }
    let classes = tape.value(p).cols();
    let targets = one_hot(labels, classes)?;
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    weighted_cross_entropy(tape, &targets, &w, p)
}

/// Ring buffer of recent batch-mean predictions on weak unlabeled views.
#[derive(Debug, Clone, PartialEq)]
pub struct DaState {
    classes: usize,
    buffer: VecDeque<Vec<f64>>,
}

impl DaState {
    pub fn new(classes: usize) -> Self {
        DaState {
            classes,
            buffer: VecDeque::with_capacity(DA_CAPACITY),
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn push(&mut self, mean: Vec<f64>) {
        if self.buffer.len() == DA_CAPACITY {
            self.buffer.pop_front();
        }
        self.buffer.push_back(mean);
    }

    /// Mean of the buffered marginals; uniform when the buffer is empty.
    pub fn marginal(&self) -> Vec<f64> {
        if self.buffer.is_empty() {
            return vec![1.0 / self.classes as f64; self.classes];
        }
        let mut m = vec![0.0; self.classes];
        for v in &self.buffer {
            m.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        let n = self.buffer.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// `aligned_b = Normalize(p_b / p̃)` with `p̃` the buffered marginal before
/// this batch; returns the state with this batch's raw mean appended.
pub fn distribution_align(p_w: &Tensor, da: &DaState) -> Result<(Tensor, DaState)> {
    let c = p_w.cols();
    if c != da.classes {
        return Err(Error::ShapeMismatch {
            op: "distribution_align",
            detail: format!("{c} classes vs DA state of {}", da.classes),
        });
    }
    let marginal: Vec<f64> = da.marginal().into_iter().map(|m| m.max(LOG_CLAMP)).collect();
    let mut aligned = p_w.clone();
    for row in aligned.data_mut().chunks_mut(c) {
        row.iter_mut().zip(&marginal).for_each(|(v, m)| *v /= m);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let n = p_w.rows() as f64;
    let mut mean = vec![0.0; c];
    for row in p_w.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut next = da.clone();
    next.push(mean);
    Ok((aligned.ensure_finite("distribution_align")?, next))
}

/// Hard pseudo-labels from (aligned) weak-view predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub hard: Vec<usize>,
    pub mask: Vec<bool>,
    pub aligned: Tensor,
}

impl PseudoLabels {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `ŷ_b = argmax(aligned_b)`, `mask_b = max(aligned_b) ≥ τ`.
pub fn make_pseudo_labels(aligned: Tensor, tau: f64) -> PseudoLabels {
    let (hard, mask) = (0..aligned.rows())
        .map(|b| {
            let row = aligned.row(b);
            (argmax(row), row_max(row) >= tau)
        })
        .unzip();
    PseudoLabels { hard, mask, aligned }
}

/// Rows whose raw confidence is strictly above `tau`: the filter for
/// unlabeled embeddings entering the contrastive set.
pub fn raw_confidence_mask(p_w: &Tensor, tau: f64) -> Vec<bool> {
    (0..p_w.rows()).map(|b| row_max(p_w.row(b)) > tau).collect()
}

/// `L_u = 1/(μB) Σ_b mask_b H(ŷ_b, p^s_b)`.
pub fn unsupervised_loss(tape: &mut Tape, pl: &PseudoLabels, p_s: Var) -> Result<Var> {
    let n = pl.hard.len();
    if n == 0 {
        return Err(invalid("unsupervised loss over an empty batch"));
    }
    let targets = one_hot(&pl.hard, tape.value(p_s).cols())?;
    let w: Vec<f64> = pl.mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    weighted_cross_entropy(tape, &targets, &w, p_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingEntry {
    /// Row in the labeled weak embeddings or the unlabeled strong embeddings.
    pub row: usize,
    pub label: usize,
    pub origin: Origin,
}

/// The embedding set `Z = Z_x ∪ Z_u`, labeled entries first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub entries: Vec<EmbeddingEntry>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.entries.iter().filter(|e| e.origin == origin).count()
    }

    fn rows(&self, origin: Origin) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.origin == origin)
            .map(|e| e.row)
            .collect()
    }

    /// Stacks the selected rows of `z_x` and `z_s` into one `[|Z|, E]` node.
    pub fn gather(&self, tape: &mut Tape, z_x: Var, z_s: Var) -> Result<Var> {
        let zx = tape.select_rows(z_x, &self.rows(Origin::Labeled))?;
        let zs = tape.select_rows(z_s, &self.rows(Origin::Unlabeled))?;
        tape.concat_rows(zx, zs)
    }
}

/// Which sources feed the embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSources {
    pub labeled: bool,
    pub unlabeled: bool,
}

impl Default for EmbeddingSources {
    fn default() -> Self {
        EmbeddingSources {
            labeled: true,
            unlabeled: true,
        }
    }
}

/// All labeled entries with their true labels, plus the unlabeled entries
/// passing `filter`, labeled with their pseudo-labels.
pub fn build_embedding_set(
    labels: &[usize],
    pl: &PseudoLabels,
    filter: &[bool],
    sources: EmbeddingSources,
) -> Result<EmbeddingSet> {
    if filter.len() != pl.hard.len() {
        return Err(invalid(format!(
            "filter covers {} rows, pseudo-labels {}",
            filter.len(),
            pl.hard.len()
        )));
    }
    let mut entries = Vec::new();
    if sources.labeled {
        entries.extend(labels.iter().enumerate().map(|(row, &label)| EmbeddingEntry {
            row,
            label,
            origin: Origin::Labeled,
        }));
    }
    if sources.unlabeled {
        entries.extend(
            filter
                .iter()
                .enumerate()
                .filter(|(_, &keep)| keep)
                .map(|(row, _)| EmbeddingEntry {
                    row,
                    label: pl.hard[row],
                    origin: Origin::Unlabeled,
                }),
        );
    }
    Ok(EmbeddingSet { entries })
}

/// `w_ij = 1` when `i ≠ j` and `y_i = y_j`, else 0.
pub fn contrastive_matrix(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                w.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    w
}

/// Cosine similarities between all rows of `z`, recorded on the tape.
pub fn similarity_on(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.normalize_rows(z)?;
    let nt = tape.transpose(n)?;
    tape.matmul(n, nt)
}

/// Cosine-similarity matrix of the rows of `z`.
pub fn similarity_matrix(z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let s = similarity_on(&mut tape, zv)?;
    Ok(tape.value(s).clone())
}

/// Supervised InfoNCE over the similarity matrix:
///
/// `L = -Σ_i 1/|J(i)| Σ_{j ∈ J(i)} log( exp(s_ij/t) / Σ_{a ≠ i} exp(s_ia/t) )`
///
/// where `J(i) = { j : w_ij = 1 }`. Anchors without positives contribute 0.
pub fn scl_loss(tape: &mut Tape, w: &Tensor, s: Var, t: f64) -> Result<Var> {
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    let n = w.rows();
    if tape.value(s).rows() != n || tape.value(s).cols() != n || w.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "scl_loss",
            detail: format!("W {:?} vs S {:?}", w.shape(), tape.value(s).shape()),
        });
    }
    let positives: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    if positives.iter().all(|&p| p == 0.0) {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut off_diag = Tensor::filled(&[n, n], 1.0);
    let mut pos_weights = Tensor::zeros(&[n, n]);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
        if positives[i] > 0.0 {
            for j in 0..n {
                pos_weights.data_mut()[i * n + j] = w.get(i, j) / positives[i];
            }
        }
    }
    let active = Tensor::vector(positives.iter().map(|&p| if p > 0.0 { 1.0 } else { 0.0 }).collect());

    let scaled = tape.scale(s, 1.0 / t)?;
    let lse = tape.masked_logsumexp(scaled, off_diag)?;
    let denominators = tape.weighted_sum(lse, active)?;
    let numerators = tape.weighted_sum(scaled, pos_weights)?;
    let neg = tape.scale(numerators, -1.0)?;
    tape.add(denominators, neg)
}

/// How the per-anchor InfoNCE terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SclReduction {
    /// Plain sum over anchors, as in [`scl_loss`].
    Sum,
    /// Sum divided by the number of anchors that have positives; keeps the
    /// term's scale independent of `|Z|`.
    #[default]
    Mean,
}

/// [`scl_loss`] followed by `reduction`.
pub fn scl_loss_reduced(tape: &mut Tape, w: &Tensor, s: Var, t: f64, reduction: SclReduction) -> Result<Var> {
    let sum = scl_loss(tape, w, s, t)?;
    match reduction {
        SclReduction::Sum => Ok(sum),
        SclReduction::Mean => {
            let active = (0..w.rows()).filter(|&i| w.row(i).iter().any(|&v| v != 0.0)).count();
            if active == 0 {
                Ok(sum)
            } else {
                tape.scale(sum, 1.0 / active as f64)
            }
        }
    }
}

/// Neighbor-aggregated soft pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLabels {
    /// `[μB, C]`; rows that could not be normalized are zero.
    pub q: Tensor,
    pub mask: Vec<bool>,
    pub k: usize,
}

impl AggregatedLabels {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Indices of the `k` largest entries of `row`; ties keep the lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    idx
}

/// For each row `b`: take the `k` batch entries (self included) most similar
/// to `z_b`, weight their predictions by `max(sim, 0)`, average, and
/// normalize to a distribution. `mask_b = max(q_b) ≥ τ₁`; rows whose weights
/// are all zero cannot be normalized and are masked out.
pub fn aggregate_pseudo(z_w: &Tensor, p_w: &Tensor, k: usize, tau1: f64) -> Result<AggregatedLabels> {
    let n = z_w.rows();
    if p_w.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "aggregate_pseudo",
            detail: format!("{n} embeddings vs {} predictions", p_w.rows()),
        });
    }
    if k > n {
        return Err(invalid(format!("K = {k} exceeds the batch of {n}")));
    }
    let c = p_w.cols();
    let sim = similarity_matrix(z_w)?;
    let mut q = Tensor::zeros(&[n, c]);
    let mut mask = vec![false; n];
    for b in 0..n {
        let row = q.row_mut(b);
        for j in top_k(sim.row(b), k) {
            let w = sim.get(b, j).max(0.0);
            row.iter_mut()
                .zip(p_w.row(j))
                .for_each(|(qv, pv)| *qv += w * pv / k as f64);
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
            mask[b] = row_max(row) >= tau1;
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(AggregatedLabels { q, mask, k })
}

/// `L_agg = 1/(μB) Σ_b mask_b H(q_b, p^s_b)` with `q` held constant.
pub fn aggregation_loss(tape: &mut Tape, agg: &AggregatedLabels, p_s: Var) -> Result<Var> {
    let n = agg.mask.len();
    if n == 0 {
        return Err(invalid("aggregation loss over an empty batch"));
    }
    for (b, &m) in agg.mask.iter().enumerate() {
        if m {
            check_distribution(agg.q.row(b), "aggregated label")?;
        }
    }
    let w: Vec<f64> = agg.mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    weighted_cross_entropy(tape, &agg.q, &w, p_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_scl: f64,
    pub lambda_agg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 1.0,
            lambda_scl: 1.0,
            lambda_agg: 0.5,
        }
    }
}

/// The four loss nodes of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub supervised: Var,
    pub unsupervised: Var,
    pub contrastive: Var,
    pub aggregation: Var,
}

/// `L_x + λ_u L_u + λ_scl L_scl + λ_agg L_agg`. Terms with a zero weight are
/// left out of the graph entirely.
pub fn overall_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    if weights.lambda_u < 0.0 || weights.lambda_scl < 0.0 || weights.lambda_agg < 0.0 {
        return Err(invalid(format!("loss weights must be >= 0, got {weights:?}")));
    }
    let mut total = terms.supervised;
    for (term, lambda) in [
        (terms.unsupervised, weights.lambda_u),
        (terms.contrastive, weights.lambda_scl),
        (terms.aggregation, weights.lambda_agg),
    ] {
        if lambda != 0.0 {
            let scaled = tape.scale(term, lambda)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{cross_entropy, softmax};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn dist_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Tensor {
        let logits = Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        softmax(&logits).unwrap()
    }

    #[test]
    fn supervised_loss_cases() {
        let mut tape = Tape::new();
        let perfect = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let l = supervised_loss(&mut tape, &[0, 1], perfect).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-11);

        let uniform = tape.constant(Tensor::filled(&[4, 10], 0.1));
        let l = supervised_loss(&mut tape, &[0, 3, 9, 2], uniform).unwrap();
        assert!((scalar(&tape, l) - 10f64.ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = dist_matrix(&mut rng, 6, 4, 3.0);
        let y = [0, 3, 1, 1, 2, 0];
        let pv = tape.constant(p.clone());
        let l = supervised_loss(&mut tape, &y, pv).unwrap();
        let oracle: f64 = y
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let mut t = vec![0.0; 4];
                t[c] = 1.0;
                cross_entropy(&t, p.row(b)).unwrap()
            })
            .sum::<f64>()
            / 6.0;
        assert!((scalar(&tape, l) - oracle).abs() < 1e-14);

        assert!(supervised_loss(&mut tape, &[], pv).is_err());
    }

    #[test]
    fn distribution_align_cases() {
        let mut da = DaState::new(2);
        let p = Tensor::from_rows(&[[0.5, 0.5], [0.9, 0.1]]).unwrap();
        let (aligned, next) = distribution_align(&p, &da).unwrap();
        assert_eq!(aligned, p);
        assert_eq!(next.len(), 1);
        assert_eq!(next.marginal(), vec![0.7, 0.3]);

        da.push(vec![0.8, 0.2]);
        let (aligned, _) = distribution_align(&Tensor::from_rows(&[[0.5, 0.5]]).unwrap(), &da).unwrap();
        assert!((aligned.get(0, 0) - 0.2).abs() < 1e-15);
        assert!((aligned.get(0, 1) - 0.8).abs() < 1e-15);

        let (aligned, _) = distribution_align(&Tensor::from_rows(&[[0.8, 0.2]]).unwrap(), &da).unwrap();
        assert!((aligned.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn da_buffer_evicts_after_capacity() {
        let mut da = DaState::new(2);
        for i in 0..40 {
            let v = if i < 8 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            da.push(v);
        }
        assert_eq!(da.len(), DA_CAPACITY);
        assert_eq!(da.marginal(), vec![0.0, 1.0]);
    }

    #[test]
    fn pseudo_label_cases() {
        let aligned = Tensor::from_rows(&[[0.96, 0.04], [0.5, 0.5], [0.3, 0.7]]).unwrap();
        let pl = make_pseudo_labels(aligned, 0.95);
        assert_eq!(pl.hard, vec![0, 0, 1]);
        assert_eq!(pl.mask, vec![true, false, false]);
    }

    #[test]
    fn unsupervised_loss_cases() {
        let mut tape = Tape::new();
        let none = make_pseudo_labels(Tensor::filled(&[4, 10], 0.1), 0.95);
        let ps = tape.leaf(Tensor::filled(&[4, 10], 0.1));
        let l = unsupervised_loss(&mut tape, &none, ps).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        assert!(tape.gradient(l, &[ps]).unwrap()[0].data().iter().all(|&g| g == 0.0));

        let mut rows = vec![vec![0.0; 10]; 4];
        for (b, r) in rows.iter_mut().enumerate() {
            r[b] = 1.0;
        }
        let onehot = Tensor::from_rows(&rows).unwrap();
        let all = make_pseudo_labels(onehot.clone(), 0.95);
        let perfect = tape.constant(onehot);
        let l = unsupervised_loss(&mut tape, &all, perfect).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-11);

        let mut half = all.clone();
        half.mask = vec![true, false, true, false];
        let l = unsupervised_loss(&mut tape, &half, ps).unwrap();
        assert!((scalar(&tape, l) - 0.5 * 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn embedding_set_composition() {
        let pl = make_pseudo_labels(
            Tensor::from_rows(&[[0.99, 0.01], [0.2, 0.8], [0.01, 0.99]]).unwrap(),
            0.95,
        );
        let labels = [1, 0];
        let none = build_embedding_set(&labels, &pl, &[false; 3], EmbeddingSources::default()).unwrap();
        assert_eq!(none.len(), 2);
        let all = build_embedding_set(&labels, &pl, &[true; 3], EmbeddingSources::default()).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.labels(), vec![1, 0, 0, 1, 1]);
        assert_eq!(all.count(Origin::Labeled), 2);
        assert_eq!(all.count(Origin::Unlabeled), 3);

        let no_labeled = EmbeddingSources {
            labeled: false,
            unlabeled: true,
        };
        let s = build_embedding_set(&labels, &pl, &[true, false, true], no_labeled).unwrap();
        assert!(s.entries.iter().all(|e| e.origin == Origin::Unlabeled));
        assert_eq!(s.entries.iter().map(|e| e.row).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn raw_filter_is_strict() {
        let p = Tensor::from_rows(&[[0.95, 0.05], [0.96, 0.04]]).unwrap();
        assert_eq!(raw_confidence_mask(&p, 0.95), vec![false, true]);
    }

    #[test]
    fn contrastive_matrix_cases() {
        assert_eq!(contrastive_matrix(&[4, 4]).data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(contrastive_matrix(&[0, 1, 2]).data().iter().all(|&v| v == 0.0));
        let w = contrastive_matrix(&[0, 0, 1]);
        let sums: Vec<f64> = (0..3).map(|i| w.row(i).iter().sum()).collect();
        assert_eq!(sums, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn similarity_cases() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
        let s = similarity_matrix(&z).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert!(similarity_matrix(&Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn scl_loss_trivial_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::filled(&[2, 2], 1.0));
        let l = scl_loss(&mut tape, &contrastive_matrix(&[0, 0]), s, 0.5).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-15);

        let s2 = tape.constant(Tensor::from_rows(&[[1.0, 0.2, -0.4], [0.2, 1.0, 0.1], [-0.4, 0.1, 1.0]]).unwrap());
        let w = contrastive_matrix(&[0, 0, 1]);
        let sum = scl_loss_reduced(&mut tape, &w, s2, 0.5, SclReduction::Sum).unwrap();
        let mean = scl_loss_reduced(&mut tape, &w, s2, 0.5, SclReduction::Mean).unwrap();
        let direct = scl_loss(&mut tape, &w, s2, 0.5).unwrap();
        assert_eq!(scalar(&tape, sum), scalar(&tape, direct));
        assert!((scalar(&tape, mean) - scalar(&tape, sum) / 2.0).abs() < 1e-15);

        let s = tape.constant(Tensor::identity(3));
        let l = scl_loss(&mut tape, &contrastive_matrix(&[0, 1, 2]), s, 0.5).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        assert!(scl_loss(&mut tape, &contrastive_matrix(&[0, 1, 2]), s, 0.0).is_err());
    }

    #[test]
    fn aggregation_self_neighbor_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = dist_matrix(&mut rng, 5, 3, 2.0);
        let z = Tensor::matrix(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let agg = aggregate_pseudo(&z, &p, 1, 0.0).unwrap();
        for b in 0..5 {
            for c in 0..3 {
                assert!((agg.q.get(b, c) - p.get(b, c)).abs() < 1e-15);
            }
        }

        let same = Tensor::filled(&[5, 4], 0.5);
        let agg = aggregate_pseudo(&same, &p, 5, 0.0).unwrap();
        let mean: Vec<f64> = (0..3).map(|c| (0..5).map(|b| p.get(b, c)).sum::<f64>() / 5.0).collect();
        for b in 0..5 {
            for c in 0..3 {
                assert!((agg.q.get(b, c) - mean[c]).abs() < 1e-15);
            }
        }
        assert!(aggregate_pseudo(&z, &p, 6, 0.0).is_err());
    }

    #[test]
    fn aggregation_all_clamped_and_k_zero() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let p = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        // K = 0: nothing to aggregate
        let agg = aggregate_pseudo(&z, &p, 0, 0.0).unwrap();
        assert_eq!(agg.mask, vec![false, false]);
        assert!(agg.q.data().iter().all(|&v| v == 0.0));
        let agg = aggregate_pseudo(&z, &p, 2, 0.0).unwrap();
        assert_eq!(agg.q.row(0), p.row(0));
    }

    #[test]
    fn aggregation_loss_cases() {
        let mut tape = Tape::new();
        let ps = tape.leaf(Tensor::filled(&[4, 2], 0.5));
        let q = Tensor::from_rows(&[[0.7, 0.3], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]).unwrap();
        let none = AggregatedLabels {
            q: q.clone(),
            mask: vec![false; 4],
            k: 2,
        };
        let l = aggregation_loss(&mut tape, &none, ps).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let one = AggregatedLabels {
            q,
            mask: vec![true, false, false, false],
            k: 2,
        };
        let l = aggregation_loss(&mut tape, &one, ps).unwrap();
        assert!((scalar(&tape, l) - std::f64::consts::LN_2 / 4.0).abs() < 1e-15);

        let onehot = AggregatedLabels {
            q: Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
            mask: vec![true],
            k: 1,
        };
        let perfect = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let l = aggregation_loss(&mut tape, &onehot, perfect).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-11);
    }

    #[test]
    fn overall_loss_weighting() {
        let mut tape = Tape::new();
        let vals = [0.7, 0.2, 1.5, 0.4];
        let vars: Vec<Var> = vals.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect();
        let terms = LossTerms {
            supervised: vars[0],
            unsupervised: vars[1],
            contrastive: vars[2],
            aggregation: vars[3],
        };
        let zero = LossWeights {
            lambda_u: 0.0,
            lambda_scl: 0.0,
            lambda_agg: 0.0,
        };
        let l = overall_loss(&mut tape, &terms, &zero).unwrap();
        assert_eq!(scalar(&tape, l), 0.7);

        let l = overall_loss(&mut tape, &terms, &LossWeights::default()).unwrap();
        assert!((scalar(&tape, l) - (0.7 + 0.2 + 1.5 + 0.2)).abs() < 1e-15);

        let doubled: Vec<Var> = vals.iter().map(|&v| tape.leaf(Tensor::scalar(2.0 * v))).collect();
        let terms2 = LossTerms {
            supervised: doubled[0],
            unsupervised: doubled[1],
            contrastive: doubled[2],
            aggregation: doubled[3],
        };
        let l2 = overall_loss(&mut tape, &terms2, &LossWeights::default()).unwrap();
        assert!((scalar(&tape, l2) - 2.0 * scalar(&tape, l)).abs() < 1e-15);

        let negative = LossWeights {
            lambda_u: -1.0,
            ..LossWeights::default()
        };
        assert!(overall_loss(&mut tape, &terms, &negative).is_err());
    }

    proptest! {
        #[test]
        fn uniform_buffer_is_identity(seed in 0u64..1000, n in 1usize..10, c in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = dist_matrix(&mut rng, n, c, 4.0);
            let mut da = DaState::new(c);
            da.push(vec![1.0 / c as f64; c]);
            let (aligned, _) = distribution_align(&p, &da).unwrap();
            for (a, b) in aligned.data().iter().zip(p.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn aligned_rows_are_distributions(seed in 0u64..1000, pushes in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut da = DaState::new(4);
            for _ in 0..pushes {
                da.push(dist_matrix(&mut rng, 1, 4, 3.0).row(0).to_vec());
            }
            let (aligned, next) = distribution_align(&dist_matrix(&mut rng, 7, 4, 3.0), &da).unwrap();
            prop_assert!(next.len() <= DA_CAPACITY);
            for b in 0..7 {
                prop_assert!(check_distribution(aligned.row(b), "aligned").is_ok());
            }
        }

        #[test]
        fn mask_is_monotone_in_tau(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = dist_matrix(&mut rng, 12, 3, 5.0);
            let a = make_pseudo_labels(p.clone(), lo);
            let b = make_pseudo_labels(p, hi);
            for (ma, mb) in a.mask.iter().zip(&b.mask) {
                prop_assert!(!mb | ma);
            }
            for (b, h) in a.hard.iter().enumerate() {
                prop_assert_eq!(*h, argmax(a.aligned.row(b)));
            }
        }

        #[test]
        fn scl_loss_is_permutation_invariant(seed in 0u64..500, n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.swap(0, n / 2);
            let eval = |z: &Tensor, labels: &[usize]| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let s = similarity_on(&mut tape, zv).unwrap();
                let l = scl_loss(&mut tape, &contrastive_matrix(labels), s, 0.5).unwrap();
                tape.value(l).item().unwrap()
            };
            let permuted: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = eval(&z, &labels);
            let b = eval(&z.select_rows(&perm), &permuted);
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }
}
