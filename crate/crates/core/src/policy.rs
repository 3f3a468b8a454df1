//! Diagonal Gaussian policy math.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng::standard_normal;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-dimension mean and standard deviation of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_len("gaussian std", mean.len(), std.len())?;
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        if !std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::NonFinite("gaussian std (must be positive)"));
        }
        Ok(GaussianStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + std * xi` with `xi` drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * standard_normal(rng))
            .collect()
    }

    /// Like [`sample`](Self::sample), but returns the mean without touching
    /// the stream when `deterministic` is set.
    pub fn act<R: Rng + ?Sized>(&self, rng: &mut R, deterministic: bool) -> Vec<f64> {
        if deterministic {
            self.mean.clone()
        } else {
            self.sample(rng)
        }
    }

    pub fn log_prob(&self, action: &[f64]) -> f64 {
        debug_assert_eq!(action.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.std)
            .zip(action)
            .map(|((m, s), a)| {
                let u = (a - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    /// Gradient of `log_prob` with respect to the mean: `(a - mu) / sigma^2`.
    pub fn score_mean(&self, action: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(action)
            .map(|((m, s), a)| (a - m) / (s * s))
            .collect()
    }
}

/// Univariate Gaussian density.
pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let u = (x - mean) / std;
    (-0.5 * u * u).exp() / (std * (2.0 * PI).sqrt())
}

/// KL divergence between two diagonal Gaussians sharing the same std:
/// `sum_d (new - old)^2 / (2 sigma^2)`.
pub fn kl_equal_sigma(new_mean: &[f64], old_mean: &[f64], std: &[f64]) -> f64 {
    new_mean
        .iter()
        .zip(old_mean)
        .zip(std)
        .map(|((n, o), s)| (n - o) * (n - o) / (2.0 * s * s))
        .sum()
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_gaussian(p: &GaussianStats, q: &GaussianStats) -> f64 {
    p.mean
        .iter()
        .zip(&p.std)
        .zip(q.mean.iter().zip(&q.std))
        .map(|((mp, sp), (mq, sq))| {
            (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5
        })
        .sum()
}
