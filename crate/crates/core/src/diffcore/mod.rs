//! Dense `f64` arrays and reverse-mode gradients: the numeric substrate for
//! the model and every loss term.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{
    check_distribution, cross_entropy, l2_normalize, matmul, normalize_rows, softmax, Tensor, DIST_TOL, LOG_CLAMP,
    NORM_EPS,
};
