//! Encoder `f`, classifier head `g`, projection head `h`, and the EMA shadow.
//!
//! All parameters live in one flat, ordered list of named tensors:
//!
//! ```text
//! encoder.{i}.weight / encoder.{i}.bias      d -> hidden.. -> F, ReLU after each layer
//! classifier.weight / classifier.bias        F -> C, softmax
//! projector.0.weight / projector.0.bias      F -> F, ReLU
//! projector.1.weight / projector.1.bias      F -> E, rows L2-normalized
//! ```
//!
//! Weights are stored `[fan_in, fan_out]` so a batch `[n, fan_in]` maps with a
//! single right-multiplication.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

const CHECKPOINT_MAGIC: &str = "dualmatch-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            input_dim: 2,
            hidden: vec![64, 64],
            feature_dim: 32,
            num_classes: 3,
            embed_dim: 16,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let zero = self.input_dim == 0 || self.feature_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0);
        if zero {
            return Err(invalid(format!("zero-width layer in {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(invalid("a classifier needs at least 2 classes"));
        }
        Ok(())
    }

    /// `(name, fan_in, fan_out)` of every affine layer, in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        let mut out: Vec<_> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| (format!("encoder.{i}"), w[0], w[1]))
            .collect();
        out.push(("classifier".into(), self.feature_dim, self.num_classes));
        out.push(("projector.0".into(), self.feature_dim, self.feature_dim));
        out.push(("projector.1".into(), self.feature_dim, self.embed_dim));
        out
    }

    fn encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    params: Vec<Param>,
}

/// Outputs of one forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    /// Class distributions `p`, `[n, C]`.
    pub probs: Var,
    /// Unit-norm embeddings `z`, `[n, E]`.
    pub embeddings: Var,
}

impl ModelParams {
    /// He-uniform weights, zero biases.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in arch.layers() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                kind: ParamKind::Weight,
                value: Tensor::matrix(fan_in, fan_out, w)?,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                kind: ParamKind::Bias,
                value: Tensor::zeros(&[1, fan_out]),
            });
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    /// Assembles parameters from explicit tensors, checking names and shapes.
    pub fn from_params(arch: &Arch, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let expected = ModelParams::init(arch, 0)?;
        if expected.params.len() != params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.params.len(),
                params.len()
            )));
        }
        for (e, p) in expected.params.iter().zip(&params) {
            if e.name != p.name || e.value.shape() != p.value.shape() || e.kind != p.kind {
                return Err(invalid(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Euclidean distance between two parameter sets of the same layout.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Places every parameter on `tape` as a constant.
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Records `p = g(f(x))` and `z = h(f(x))` on `tape` using parameter
    /// handles from [`ModelParams::leaves`] or [`ModelParams::constants`].
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<ForwardVars> {
        let cols = tape.value(x).cols();
        if cols != self.arch.input_dim || tape.value(x).shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "input {:?}, model expects [n, {}]",
                    tape.value(x).shape(),
                    self.arch.input_dim
                ),
            });
        }
        let affine = |tape: &mut Tape, layer: usize, h: Var| -> Result<Var> {
            let y = tape.matmul(h, vars[2 * layer])?;
            tape.add_row(y, vars[2 * layer + 1])
        };
        let enc = self.arch.encoder_layers();
        let mut h = x;
        for layer in 0..enc {
            let y = affine(tape, layer, h)?;
            h = tape.relu(y)?;
        }
        let logits = affine(tape, enc, h)?;
        let probs = tape.softmax(logits)?;
        let g = affine(tape, enc + 1, h)?;
        let g = tape.relu(g)?;
        let e = affine(tape, enc + 2, g)?;
        let embeddings = tape.normalize_rows(e)?;
        Ok(ForwardVars {
            logits,
            probs,
            embeddings,
        })
    }

    /// Plain forward pass: `(p [n, C], z [n, E])`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_on(&mut tape, &vars, x)?;
        Ok((tape.value(out.probs).clone(), tape.value(out.embeddings).clone()))
    }

    /// Class probabilities only.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }
}

/// Exponential moving average of the live parameters, used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ModelParams,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(EmaState {
            shadow: params.clone(),
            decay,
        })
    }

    /// `θ̄ ← m θ̄ + (1 - m) θ`, elementwise.
    pub fn update(&mut self, params: &ModelParams) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: "shadow and live parameters differ in layout".into(),
            });
        }
        let rate = 1.0 - self.decay;
        for (s, p) in self.shadow.params.iter_mut().zip(&params.params) {
            // written as a step toward θ so that θ̄ = θ stays exactly fixed
            s.value
                .data_mut()
                .iter_mut()
                .zip(p.value.data())
                .for_each(|(sv, pv)| *sv = if rate == 1.0 { *pv } else { *sv + rate * (pv - *sv) });
        }
        Ok(())
    }
}

/// Pure form of [`EmaState::update`].
pub fn ema_update(ema: &EmaState, params: &ModelParams) -> Result<EmaState> {
    let mut next = ema.clone();
    next.update(params)?;
    Ok(next)
}

/// Checkpoint text: a versioned header, the architecture, then one
/// `name rows cols` line followed by one line of values per tensor. Values
/// use the shortest round-trip decimal form, so reloading is bit-exact.
pub fn format_checkpoint(params: &ModelParams) -> String {
    let a = &params.arch;
    let mut s = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n");
    writeln!(s, "input_dim {}", a.input_dim).unwrap();
    let hidden: Vec<String> = a.hidden.iter().map(|h| h.to_string()).collect();
    writeln!(s, "hidden {}", hidden.join(" ")).unwrap();
    writeln!(s, "feature_dim {}", a.feature_dim).unwrap();
    writeln!(s, "num_classes {}", a.num_classes).unwrap();
    writeln!(s, "embed_dim {}", a.embed_dim).unwrap();
    writeln!(s, "tensors {}", params.params.len()).unwrap();
    for p in &params.params {
        writeln!(s, "{} {} {}", p.name, p.value.rows(), p.value.cols()).unwrap();
        let vals: Vec<String> = p.value.data().iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", vals.join(" ")).unwrap();
    }
    s
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    parse_checkpoint(std::fs::File::open(path)?)
}

pub fn parse_checkpoint(reader: impl Read) -> Result<ModelParams> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };
    let perr = |line: usize, message: String| Error::Parse { line, message };

    let (ln, header) = next("header")?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| perr(ln, format!("not a checkpoint header: {header:?}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(perr(ln, format!("unsupported checkpoint version {version}")));
    }

    let mut field = |key: &str| -> Result<(usize, Vec<usize>)> {
        let (ln, line) = next(key)?;
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| perr(ln, format!("expected `{key}`, got {line:?}")))?;
        let nums = rest
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(ln, format!("{key}: {e}")))?;
        Ok((ln, nums))
    };
    let single = |(ln, v): (usize, Vec<usize>), key: &str| -> Result<usize> {
        match v[..] {
            [x] => Ok(x),
            _ => Err(perr(ln, format!("`{key}` takes one value"))),
        }
    };
    let input_dim = single(field("input_dim")?, "input_dim")?;
    let hidden = field("hidden")?.1;
    let feature_dim = single(field("feature_dim")?, "feature_dim")?;
    let num_classes = single(field("num_classes")?, "num_classes")?;
    let embed_dim = single(field("embed_dim")?, "embed_dim")?;
    let count = single(field("tensors")?, "tensors")?;

    let arch = Arch {
        input_dim,
        hidden,
        feature_dim,
        num_classes,
        embed_dim,
    };
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, head) = next("tensor header")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(perr(ln, format!("bad tensor header {head:?}")));
        };
        let rows: usize = rows.parse().map_err(|e| perr(ln, format!("rows: {e}")))?;
        let cols: usize = cols.parse().map_err(|e| perr(ln, format!("cols: {e}")))?;
        let (ln, body) = next("tensor values")?;
        let data = body
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(ln, format!("value: {e}")))?;
        let value = Tensor::matrix(rows, cols, data).map_err(|e| perr(ln, e.to_string()))?;
        let kind = if name.ends_with(".bias") {
            ParamKind::Bias
        } else {
            ParamKind::Weight
        };
        params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
    }
    ModelParams::from_params(&arch, params)
}
