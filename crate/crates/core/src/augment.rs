//! Weak and strong perturbations of feature vectors.
//!
//! Weak augmentation is small isotropic Gaussian jitter. Strong augmentation
//! composes `k` transforms drawn uniformly (with replacement) from a pool,
//! each at a magnitude drawn uniformly from `magnitude`. The pool is a
//! vector-data analogue of RandAugment: the only property training relies on
//! is that strong views are much further from the input than weak ones.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Zeroes each coordinate with probability `m`. Below rate 1 at least
    /// one non-zero coordinate survives, so a non-zero input never
    /// collapses to the origin (not even under repeated dropout).
    Dropout,
    /// Multiplies the whole vector by `U[1-m, 1+m]`.
    Scale,
    /// Adds `U[-m, m]` to each coordinate.
    UniformNoise,
    /// Shuffles a random contiguous block of `max(2, round(m d))` coordinates.
    PermuteBlock,
    /// Adds `N(0, m²)` to each coordinate.
    Jitter,
}

impl Transform {
    pub fn apply<R: Rng + ?Sized>(self, x: &mut [f64], m: f64, rng: &mut R) {
        let d = x.len();
        match self {
            Transform::Identity => {}
            Transform::Dropout => {
                if m >= 1.0 {
                    x.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let keep: Vec<bool> = (0..d).map(|_| rng.random::<f64>() >= m).collect();
                let nonzero: Vec<usize> = (0..d).filter(|&i| x[i] != 0.0).collect();
                let survivor = if nonzero.is_empty() || nonzero.iter().any(|&i| keep[i]) {
                    None
                } else {
                    nonzero.choose(rng).copied()
                };
                for (i, v) in x.iter_mut().enumerate() {
                    if !keep[i] && survivor != Some(i) {
                        *v = 0.0;
                    }
                }
            }
            Transform::Scale => {
                let s = 1.0 + m * (2.0 * rng.random::<f64>() - 1.0);
                x.iter_mut().for_each(|v| *v *= s);
            }
            Transform::UniformNoise => {
                for v in x.iter_mut() {
                    *v += m * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            Transform::PermuteBlock => {
                if d < 2 {
                    return;
                }
                let len = ((m * d as f64).round() as usize).clamp(2, d);
                let start = rng.random_range(0..=d - len);
                x[start..start + len].shuffle(rng);
            }
            Transform::Jitter => {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += m * z;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakPolicy {
    #[serde(rename = "sigma")]
    pub jitter_sigma: f64,
}

impl Default for WeakPolicy {
    fn default() -> Self {
        WeakPolicy { jitter_sigma: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongPolicy {
    pub pool: Vec<Transform>,
    pub k: usize,
    /// Inclusive `[low, high]` range magnitudes are drawn from.
    pub magnitude: [f64; 2],
}

impl Default for StrongPolicy {
    fn default() -> Self {
        StrongPolicy {
            pool: vec![
                Transform::Dropout,
                Transform::Scale,
                Transform::UniformNoise,
                Transform::PermuteBlock,
                Transform::Jitter,
            ],
            k: 2,
            magnitude: [0.1, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak.jitter_sigma >= 0.0) {
            return Err(invalid("aug.weak.sigma must be >= 0"));
        }
        if self.strong.pool.is_empty() || self.strong.k == 0 {
            return Err(invalid("aug.strong needs a non-empty pool and k >= 1"));
        }
        let [lo, hi] = self.strong.magnitude;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(invalid(format!(
                "aug.strong.magnitude must satisfy 0 <= low <= high, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let sigma = policy.weak.jitter_sigma;
    let mut out = x.to_vec();
    if sigma > 0.0 {
        Transform::Jitter.apply(&mut out, sigma, rng);
    }
    out
}

pub fn strong_augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let strong = &policy.strong;
    let [lo, hi] = strong.magnitude;
    let mut out = x.to_vec();
    for _ in 0..strong.k {
        let t = *strong.pool.choose(rng).expect("strong pool is empty");
        let m = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        t.apply(&mut out, m, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blob_means, make_blobs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut p = AugmentPolicy::default();
        p.weak.jitter_sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![0.3, -1.2, 4.0];
        assert_eq!(weak_augment(&x, &p, &mut rng), x);
    }

    #[test]
    fn weak_is_unbiased() {
        let p = AugmentPolicy::default();
        let sigma = p.weak.jitter_sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = vec![0.5, -0.25, 2.0];
        let n = 10_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            for (m, v) in mean.iter_mut().zip(weak_augment(&x, &p, &mut rng)) {
                *m += v / n as f64;
            }
        }
        for (m, xv) in mean.iter().zip(&x) {
            assert!((m - xv).abs() < 3.0 * sigma / 100.0, "{m} vs {xv}");
        }
    }

    #[test]
    fn augmentations_are_stochastic_and_seeded() {
        let p = AugmentPolicy::default();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(weak_augment(&x, &p, &mut a), weak_augment(&x, &p, &mut b));
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(strong_augment(&x, &p, &mut a), strong_augment(&x, &p, &mut b));
        assert_eq!(weak_augment(&x, &p, &mut a), weak_augment(&x, &p, &mut b));
    }

    #[test]
    fn degenerate_strong_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.0];
        let mut p = AugmentPolicy::default();
        p.strong.pool = vec![Transform::Identity];
        p.strong.k = 1;
        assert_eq!(strong_augment(&x, &p, &mut rng), x);

        p.strong.pool = vec![Transform::Dropout];
        p.strong.magnitude = [1.0, 1.0];
        assert_eq!(strong_augment(&x, &p, &mut rng), vec![0.0; 3]);
    }

    #[test]
    fn repeated_dropout_never_reaches_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let mut x = vec![0.7, -1.3];
            for _ in 0..4 {
                Transform::Dropout.apply(&mut x, 0.9, &mut rng);
            }
            assert!(x.iter().any(|&v| v != 0.0));
        }
        let mut zero = vec![0.0; 3];
        Transform::Dropout.apply(&mut zero, 0.5, &mut rng);
        assert_eq!(zero, vec![0.0; 3]);
    }

    #[test]
    fn permute_block_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x: Vec<f64> = (0..10).map(f64::from).collect();
        Transform::PermuteBlock.apply(&mut x, 0.5, &mut rng);
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, (0..10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn strong_distorts_more_than_weak() {
        let p = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ds = make_blobs(3, 2, 10, 0.3, 4).unwrap();
        let (mut weak, mut strong) = (0.0, 0.0);
        for i in 0..1000 {
            let x = &ds.examples[i % ds.len()].features;
            weak += dist(&weak_augment(x, &p, &mut rng), x);
            strong += dist(&strong_augment(x, &p, &mut rng), x);
        }
        assert!(strong > weak, "strong {strong} weak {weak}");
    }

    #[test]
    fn weak_preserves_nearest_mean_label() {
        let p = AugmentPolicy::default();
        let means = blob_means(3, 2);
        let min_gap = (0..3)
            .flat_map(|a| (0..3).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| dist(&means[a], &means[b]))
            .fold(f64::INFINITY, f64::min);
        assert!(p.weak.jitter_sigma < min_gap / 4.0);

        let nearest = |x: &[f64]| {
            (0..3)
                .min_by(|&a, &b| dist(&means[a], x).total_cmp(&dist(&means[b], x)))
                .unwrap()
        };
        let ds = make_blobs(3, 2, 200, 0.4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let trials = 10_000;
        let kept = (0..trials)
            .filter(|i| {
                let x = &ds.examples[i % ds.len()].features;
                nearest(x) == nearest(&weak_augment(x, &p, &mut rng))
            })
            .count();
        assert!(kept as f64 >= 0.99 * trials as f64, "{kept}");
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let mut p = AugmentPolicy::default();
        p.strong.pool.clear();
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::default();
        p.strong.magnitude = [0.5, 0.1];
        assert!(p.validate().is_err());
    }
}
