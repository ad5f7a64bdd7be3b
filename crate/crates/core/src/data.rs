//! Synthetic datasets, labeled/unlabeled splits and the batch stream.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// What the learner is allowed to know about an example's class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Visible to training.
    Observed(usize),
    /// Known to the harness for diagnostics; never read by the training path.
    Hidden(usize),
    /// Not known at all.
    Missing,
}

impl Label {
    pub fn observed(&self) -> Option<usize> {
        match self {
            Label::Observed(c) => Some(*c),
            _ => None,
        }
    }

    /// The true class, whether observed or hidden.
    pub fn truth(&self) -> Option<usize> {
        match self {
            Label::Observed(c) | Label::Hidden(c) => Some(*c),
            Label::Missing => None,
        }
    }

    fn hide(self) -> Label {
        match self {
            Label::Observed(c) => Label::Hidden(c),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(classes: usize, dim: usize, examples: Vec<Example>) -> Result<Self> {
        for (i, e) in examples.iter().enumerate() {
            if e.features.len() != dim {
                return Err(invalid(format!(
                    "example {i} has {} features, expected {dim}",
                    e.features.len()
                )));
            }
            if e.label.truth().is_some_and(|c| c >= classes) {
                return Err(invalid(format!("example {i} has label >= {classes}")));
            }
        }
        Ok(Dataset { classes, dim, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of observed labels per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.examples {
            if let Some(c) = e.label.observed() {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Labeled set `X` and unlabeled set `U` of one semi-supervised problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SslSplit {
    pub classes: usize,
    pub dim: usize,
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
}

impl SslSplit {
    /// Observed examples become `X`, everything else `U`.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let (labeled, unlabeled) = dataset
            .examples
            .iter()
            .cloned()
            .partition(|e| e.label.observed().is_some());
        SslSplit {
            classes: dataset.classes,
            dim: dataset.dim,
            labeled,
            unlabeled,
        }
    }

    /// Adds hidden-label copies of every labeled example to `U`.
    pub fn with_labeled_in_unlabeled(mut self) -> Self {
        let copies: Vec<Example> = self
            .labeled
            .iter()
            .map(|e| Example {
                features: e.features.clone(),
                label: e.label.hide(),
            })
            .collect();
        self.unlabeled.extend(copies);
        self
    }
}

/// Gaussian class means on the unit circle spanned by the first two
/// coordinates.
pub fn blob_means(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = angle.cos();
            m[1] = angle.sin();
            m
        })
        .collect()
}

/// `classes` isotropic Gaussian clusters with `n_per_class` points each.
pub fn make_blobs(classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(invalid("make_blobs needs at least 2 classes and 2 dimensions"));
    }
    if !(spread > 0.0) {
        return Err(invalid(format!("make_blobs spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(classes * n_per_class);
    for (c, mean) in blob_means(classes, dim).iter().enumerate() {
        for _ in 0..n_per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            examples.push(Example {
                features,
                label: Label::Observed(c),
            });
        }
    }
    Dataset::new(classes, dim, examples)
}

/// Moves `labels_per_class` random labeled examples of every class into `X`;
/// everything else goes to `U` with its label hidden.
pub fn split_ssl(dataset: &Dataset, labels_per_class: usize, seed: u64) -> Result<SslSplit> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, e) in dataset.examples.iter().enumerate() {
        if let Some(c) = e.label.observed() {
            by_class[c].push(i);
        }
    }
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() < labels_per_class) {
        return Err(invalid(format!(
            "class {c} has {} labeled examples, cannot take {labels_per_class}",
            idx.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; dataset.len()];
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        for &i in &idx[..labels_per_class] {
            chosen[i] = true;
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (e, &pick) in dataset.examples.iter().zip(&chosen) {
        if pick {
            labeled.push(e.clone());
        } else {
            unlabeled.push(Example {
                features: e.features.clone(),
                label: e.label.hide(),
            });
        }
    }
    Ok(SslSplit {
        classes: dataset.classes,
        dim: dataset.dim,
        labeled,
        unlabeled,
    })
}

/// Per-class counts of a long-tailed semi-supervised split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub classes: usize,
    /// `M_c`, non-increasing in `c`.
    pub per_class_labeled: Vec<usize>,
    /// `L_c`, same class profile as the labeled counts.
    pub per_class_unlabeled: Vec<usize>,
    pub gamma: f64,
    pub beta: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn labeled_total(&self) -> usize {
        self.per_class_labeled.iter().sum()
    }

    pub fn unlabeled_total(&self) -> usize {
        self.per_class_unlabeled.iter().sum()
    }

    pub fn labeled_ratio(&self) -> f64 {
        let m = self.labeled_total() as f64;
        m / (m + self.unlabeled_total() as f64)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Exponential long-tail profile `M_c = M₁ γ^{-(c-1)/(C-1)}`, rounded half up
/// with the last class pinned to `round(M₁/γ)`, and `L_c = round(M_c (1-β)/β)`.
pub fn make_imbalanced_split(classes: usize, majority: usize, gamma: f64, beta: f64, seed: u64) -> Result<SplitSpec> {
    if classes < 2 {
        return Err(invalid("imbalanced split needs at least 2 classes"));
    }
    if !(gamma >= 1.0) {
        return Err(invalid(format!("imbalance ratio must be >= 1, got {gamma}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("labeled ratio must be in (0, 1), got {beta}")));
    }
    let m1 = majority as f64;
    let mut labeled: Vec<usize> = (0..classes)
        .map(|c| round_half_up(m1 * gamma.powf(-(c as f64) / (classes - 1) as f64)))
        .collect();
    labeled[classes - 1] = round_half_up(m1 / gamma);
    if labeled[classes - 1] == 0 {
        return Err(invalid(format!(
            "minority class count rounds to 0 ({majority} / {gamma})"
        )));
    }
    let unlabeled = labeled
        .iter()
        .map(|&m| round_half_up(m as f64 * (1.0 - beta) / beta))
        .collect();
    Ok(SplitSpec {
        classes,
        per_class_labeled: labeled,
        per_class_unlabeled: unlabeled,
        gamma,
        beta,
        seed,
    })
}

/// Draws blob data with exactly the counts of `spec`.
pub fn imbalanced_blobs(spec: &SplitSpec, dim: usize, spread: f64) -> Result<SslSplit> {
    let most = spec
        .per_class_labeled
        .iter()
        .zip(&spec.per_class_unlabeled)
        .map(|(m, l)| m + l)
        .max()
        .unwrap_or(0);
    let pool = make_blobs(spec.classes, dim, most, spread, spec.seed)?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for c in 0..spec.classes {
        let members = &pool.examples[c * most..(c + 1) * most];
        let (m, l) = (spec.per_class_labeled[c], spec.per_class_unlabeled[c]);
        labeled.extend(members[..m].iter().cloned());
        unlabeled.extend(members[m..m + l].iter().map(|e| Example {
            features: e.features.clone(),
            label: e.label.hide(),
        }));
    }
    Ok(SslSplit {
        classes: spec.classes,
        dim,
        labeled,
        unlabeled,
    })
}

/// One step's worth of indices into `X` and `U`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycle { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Endless stream of `B` labeled and `μB` unlabeled indices. Each set is
/// reshuffled at the end of its own epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled: Cycle,
    unlabeled: Cycle,
    batch_size: usize,
    mu: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(labeled_len: usize, unlabeled_len: usize, batch_size: usize, mu: usize, seed: u64) -> Result<Self> {
        if labeled_len == 0 || unlabeled_len == 0 {
            return Err(invalid("batch sampler needs non-empty labeled and unlabeled sets"));
        }
        if batch_size == 0 || mu == 0 {
            return Err(invalid("batch size and mu must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(BatchSampler {
            labeled: Cycle::new(labeled_len, &mut rng),
            unlabeled: Cycle::new(unlabeled_len, &mut rng),
            batch_size,
            mu,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> BatchPair {
        let labeled = self.labeled.take(self.batch_size, &mut self.rng);
        let unlabeled = self.unlabeled.take(self.mu * self.batch_size, &mut self.rng);
        BatchPair { labeled, unlabeled }
    }
}

/// Writes the text format: header `C d N`, then one `label f1 .. fd` line per
/// example with `-1` for anything not observed.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(format_dataset(dataset).as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn format_dataset(dataset: &Dataset) -> String {
    let mut s = format!("{} {} {}\n", dataset.classes, dataset.dim, dataset.len());
    for e in &dataset.examples {
        match e.label.observed() {
            Some(c) => write!(s, "{c}").unwrap(),
            None => s.push_str("-1"),
        }
        for v in &e.features {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(std::fs::File::open(path)?)
}

pub fn parse_dataset(reader: impl Read) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, format!("header: {e}")))?;
    let [classes, dim, n] = fields[..] else {
        return Err(parse_err(1, format!("header needs `C d N`, got {header:?}")));
    };

    let mut examples = Vec::with_capacity(n);
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label: i64 = tokens
            .next()
            .unwrap()
            .parse()
            .map_err(|e| parse_err(lineno, format!("label: {e}")))?;
        let label = match label {
            -1 => Label::Missing,
            c if c >= 0 && (c as usize) < classes => Label::Observed(c as usize),
            c => return Err(parse_err(lineno, format!("label {c} outside [0, {classes})"))),
        };
        let features: Vec<f64> = tokens
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(lineno, format!("feature: {e}")))?;
        if features.len() != dim {
            return Err(parse_err(
                lineno,
                format!("expected {dim} features, got {}", features.len()),
            ));
        }
        examples.push(Example { features, label });
    }
    if examples.len() != n {
        return Err(parse_err(
            examples.len() + 2,
            format!("header declares {n} examples, found {}", examples.len()),
        ));
    }
    Dataset::new(classes, dim, examples)
}
