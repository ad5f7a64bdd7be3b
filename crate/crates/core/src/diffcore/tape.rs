//! Reverse-mode differentiation over whole matrices.
//!
//! Every operation appends a node holding its forward value, so node order is
//! a topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use dualmatch::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let loss = tape.sum(half).unwrap();
//! let grads = tape.gradient(loss, &[w]).unwrap();
//! assert_eq!(grads[0], *tape.value(w));
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{self, Tensor, LOG_CLAMP, NORM_EPS};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    Sum(usize),
    Relu(usize),
    Softmax(usize),
    NormalizeRows(usize),
    SelectRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    LogClamped(usize),
    MaskedLogSumExp(usize, Tensor),
    WeightedSum(usize, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass and differentiates a scalar
/// result with respect to the leaves.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.transpose();
        self.push(out, Op::Transpose(ia), "transpose")
    }

    /// Adds a bias row `[1, n]` (or `[n]`) to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.len() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + bias {:?}", x.shape(), b.shape()),
            });
        }
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
        }
        self.push(out, Op::AddRow(ia, ib), "add_row")
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (a, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if a.len() != b.len() || a.rows() != b.rows() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape("add", ia, ib)?;
        let mut out = self.nodes[ia].value.clone();
        out.data_mut()
            .iter_mut()
            .zip(self.nodes[ib].value.data())
            .for_each(|(o, v)| *o += v);
        self.push(out, Op::Add(ia, ib), "add")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v * c);
        self.push(out, Op::Scale(ia, c), "scale")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape("mul", ia, ib)?;
        let mut out = self.nodes[ia].value.clone();
        out.data_mut()
            .iter_mut()
            .zip(self.nodes[ib].value.data())
            .for_each(|(o, v)| *o *= v);
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(out, Op::Sum(ia), "sum")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu(ia), "relu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = tensor::softmax(&self.nodes[ia].value)?;
        self.push(out, Op::Softmax(ia), "softmax")
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = tensor::normalize_rows(&self.nodes[ia].value)?;
        self.push(out, Op::NormalizeRows(ia), "normalize_rows")
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let rows = self.nodes[ia].value.rows();
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                detail: format!("row {bad} of {rows}"),
            });
        }
        let out = self.nodes[ia].value.select_rows(idx);
        self.push(out, Op::SelectRows(ia, idx.to_vec()), "select_rows")
    }

    /// Stacks the rows of `b` below the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.cols() != y.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let out = Tensor::matrix(x.rows() + y.rows(), x.cols(), data)?;
        self.push(out, Op::ConcatRows(ia, ib), "concat_rows")
    }

    /// `ln(clamp(x, 1e-12, 1))` elementwise.
    pub fn log_clamped(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v.clamp(LOG_CLAMP, 1.0).ln());
        self.push(out, Op::LogClamped(ia), "log_clamped")
    }

    /// Per row, `ln Σ_j exp(x_ij)` over the columns where `mask_ij != 0`.
    /// Produces an `[n]` vector; every row must keep at least one entry.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_logsumexp",
                detail: format!("{:?} vs mask {:?}", x.shape(), mask.shape()),
            });
        }
        let c = x.cols();
        let mut out = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let (xr, mr) = (x.row(i), mask.row(i));
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, m)| **m != 0.0)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "masked_logsumexp: row {i} of {c} columns has an empty mask"
                )));
            }
            let s: f64 = xr
                .iter()
                .zip(mr)
                .filter(|(_, m)| **m != 0.0)
                .map(|(v, _)| (v - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        self.push(Tensor::vector(out), Op::MaskedLogSumExp(ia, mask), "masked_logsumexp")
    }

    /// `Σ w ⊙ x` with constant weights `w`.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let ia = self.idx(a);
        let x = &self.nodes[ia].value;
        if weights.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{:?} vs weights {:?}", x.shape(), weights.shape()),
            });
        }
        let s = x.data().iter().zip(weights.data()).map(|(v, w)| v * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(ia, weights), "weighted_sum")
    }

    /// Gradients of the scalar `loss` with respect to each of `leaves`.
    ///
    /// Leaves that do not influence `loss` get a zero gradient.
    pub fn gradient(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::UnknownLeaf(loss.index));
        }
        for l in leaves {
            if l.tape != self.id || l.index >= self.nodes.len() || !matches!(self.nodes[l.index].op, Op::Leaf) {
                return Err(Error::UnknownLeaf(l.index));
            }
        }
        let lv = &self.nodes[loss.index].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(leaves
            .iter()
            .map(|l| {
                grads
                    .get(l.index)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[l.index].value.shape()))
            })
            .collect())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[k].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let da = tensor::gemm(g, false, val(*b), true).expect("matmul backward");
                let db = tensor::gemm(val(*a), true, g, false).expect("matmul backward");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                let db = Tensor::new(val(*b).shape().to_vec(), db).expect("bias shape");
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, reshape_like(g, val(*a)));
                accumulate(grads, *b, reshape_like(g, val(*b)));
            }
            Op::Scale(a, c) => accumulate(grads, *a, reshape_like(&g.map(|v| v * c), val(*a))),
            Op::Mul(a, b) => {
                let da = zip_map(g, val(*b), |gv, bv| gv * bv);
                let db = zip_map(g, val(*a), |gv, av| gv * av);
                accumulate(grads, *a, reshape_like(&da, val(*a)));
                accumulate(grads, *b, reshape_like(&db, val(*b)));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::filled(val(*a).shape(), gv));
            }
            Op::Relu(a) => {
                let da = zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let c = p.cols();
                let mut da = g.clone();
                for (drow, prow) in da.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                    drow.iter_mut().zip(prow).for_each(|(d, p)| *d = p * (*d - dot));
                }
                accumulate(grads, *a, reshape_like(&da, val(*a)));
            }
            Op::NormalizeRows(a) => {
                let (x, y) = (val(*a), &node.value);
                let c = y.cols();
                let mut da = g.clone();
                for ((drow, yrow), xrow) in da
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, y)| *d = (*d - y * dot) / n);
                }
                accumulate(grads, *a, da);
            }
            Op::SelectRows(a, idx) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.shape());
                for (r, &src) in idx.iter().enumerate() {
                    da.row_mut(src).iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatRows(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let split = x.len();
                let da = Tensor::new(x.shape().to_vec(), g.data()[..split].to_vec()).unwrap();
                let db = Tensor::new(y.shape().to_vec(), g.data()[split..].to_vec()).unwrap();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::LogClamped(a) => {
                let da = zip_map(
                    g,
                    val(*a),
                    |gv, x| {
                        if (LOG_CLAMP..=1.0).contains(&x) {
                            gv / x
                        } else {
                            0.0
                        }
                    },
                );
                accumulate(grads, *a, da);
            }
            Op::MaskedLogSumExp(a, mask) => {
                let x = val(*a);
                let mut da = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let lse = node.value.data()[r];
                    let gr = g.data()[r];
                    for ((d, xv), m) in da.row_mut(r).iter_mut().zip(x.row(r)).zip(mask.row(r)) {
                        if *m != 0.0 {
                            *d = gr * (xv - lse).exp();
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::WeightedSum(a, w) => {
                let gv = g.data()[0];
                let da = Tensor::new(val(*a).shape().to_vec(), w.data().iter().map(|v| v * gv).collect()).unwrap();
                accumulate(grads, *a, da);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(b.shape().to_vec(), data).unwrap()
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::new(like.shape().to_vec(), g.data().to_vec()).unwrap()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], k: usize, g: Tensor) {
    match &mut grads[k] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}
