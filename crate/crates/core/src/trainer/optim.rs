use std::f64::consts::PI;

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::{ModelParams, ParamKind};

/// `base · cos(7πn / 16N)`.
pub fn cosine_lr(n: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(invalid("cosine schedule over zero steps"));
    }
    if n > total {
        return Err(invalid(format!("step {n} is past the end of the schedule ({total})")));
    }
    Ok(base * (7.0 * PI * n as f64 / (16.0 * total as f64)).cos())
}

/// Velocity buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<Tensor>);

impl Velocity {
    pub fn zeros(params: &ModelParams) -> Self {
        Velocity(params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One Nesterov step, in place:
///
/// ```text
/// g  = ∇ + wd·θ        (weights only; biases are not decayed)
/// v' = momentum·v + g
/// θ' = θ − lr·(g + momentum·v')
/// ```
pub fn sgd_nesterov_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    velocity: &mut Velocity,
    cfg: SgdConfig,
) -> Result<()> {
    let n = params.params().len();
    if grads.len() != n || velocity.0.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sgd_nesterov_step",
            detail: format!("{n} params, {} grads, {} velocities", grads.len(), velocity.0.len()),
        });
    }
    for ((p, g), v) in params.params().iter().zip(grads).zip(&velocity.0) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_nesterov_step",
                detail: format!(
                    "{}: param {:?}, grad {:?}, velocity {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape(),
                    v.shape()
                ),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = cfg;
    for ((p, g), v) in params.params_mut().iter_mut().zip(grads).zip(velocity.0.iter_mut()) {
        let wd = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
        for ((theta, &grad), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = grad + wd * *theta;
            *vel = momentum * *vel + g;
            *theta -= lr * (g + momentum * *vel);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    /// A model whose first tensor is replaced by `[1, n]` values; the rest is zero.
    fn single(values: Vec<f64>, kind: ParamKind) -> ModelParams {
        let mut m = ModelParams::init(&Arch::default(), 0).unwrap();
        for p in m.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let n = values.len();
        let first = &mut m.params_mut()[0];
        first.kind = kind;
        first.value = Tensor::matrix(1, n, values).unwrap();
        m
    }

    fn zero_grads(m: &ModelParams) -> Vec<Tensor> {
        m.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.03).unwrap(), 0.03);
        // cos(7π/16) = sin(π/16)
        let end = cosine_lr(100, 100, 0.03).unwrap();
        assert!((end - 0.03 * 0.195_090_322_016_128_27).abs() < 1e-16);
        assert!(cosine_lr(101, 100, 0.03).is_err());
        assert!(cosine_lr(0, 0, 0.03).is_err());
        let lrs: Vec<f64> = (0..=100).map(|n| cosine_lr(n, 100, 0.03).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn plain_sgd_reduction() {
        let mut m = single(vec![1.0, -2.0], ParamKind::Weight);
        let mut grads = zero_grads(&m);
        grads[0] = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let mut v = Velocity::zeros(&m);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_nesterov_step(&mut m, &grads, &mut v, cfg).unwrap();
        assert_eq!(m.params()[0].value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_grad_moves_only_by_velocity() {
        let mut m = single(vec![1.0], ParamKind::Weight);
        let mut v = Velocity::zeros(&m);
        v.0[0] = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let grads = zero_grads(&m);
        sgd_nesterov_step(&mut m, &grads, &mut v, cfg).unwrap();
        // v' = 1, θ' = 1 − 0.1·0.5·1
        assert_eq!(v.0[0].data(), &[1.0]);
        assert!((m.params()[0].value.data()[0] - 0.95).abs() < 1e-15);
        assert!(m.params()[1..].iter().all(|p| p.value.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn weight_decay_skips_biases() {
        for (kind, moved) in [(ParamKind::Weight, true), (ParamKind::Bias, false)] {
            let mut m = single(vec![1.0], kind);
            let mut v = Velocity::zeros(&m);
            let cfg = SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.5,
            };
            let grads = zero_grads(&m);
            sgd_nesterov_step(&mut m, &grads, &mut v, cfg).unwrap();
            assert_eq!(m.params()[0].value.data()[0] != 1.0, moved);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(θ) = ½ Σ a_i (θ_i − c_i)², minimum at c
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.25];
        let mut m = single(vec![0.0; 3], ParamKind::Bias);
        let mut v = Velocity::zeros(&m);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        for _ in 0..100 {
            let theta = m.params()[0].value.data().to_vec();
            let mut grads = zero_grads(&m);
            grads[0] = Tensor::matrix(1, 3, (0..3).map(|i| a[i] * (theta[i] - c[i])).collect()).unwrap();
            sgd_nesterov_step(&mut m, &grads, &mut v, cfg).unwrap();
        }
        for (t, c) in m.params()[0].value.data().iter().zip(c) {
            assert!((t - c).abs() < 1e-3, "{t} vs {c}");
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut m = single(vec![1.0], ParamKind::Weight);
        let mut v = Velocity::zeros(&m);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut grads = zero_grads(&m);
        grads[0] = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(
            sgd_nesterov_step(&mut m, &grads, &mut v, cfg),
            Err(Error::NonFinite(_))
        ));
        assert!(sgd_nesterov_step(&mut m, &grads[1..], &mut v, cfg).is_err());
    }
}
