//! Gaussian summaries of sample-based beliefs.

use nalgebra::{DMatrix, DVector};

use super::GaussianBelief;
use crate::linalg::symmetrize;

/// Sample mean and `1/(N−1)` sample covariance. A single member has zero covariance.
pub fn ensemble_summary(members: &[DVector<f64>], time: f64) -> GaussianBelief {
    assert!(!members.is_empty(), "empty ensemble");
    let n = members[0].len();
    let count = members.len();
    let mut mean = DVector::zeros(n);
    for m in members {
        mean += m;
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(n, n);
    if count > 1 {
        for m in members {
            let d = m - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= (count - 1) as f64;
    }
    symmetrize(&mut cov);
    GaussianBelief::new(mean, cov, time)
}

/// Weighted mean and covariance with the unbiased reliability-weight
/// normalization `1/(1 − Σwᵢ²)`, which reduces to `1/(N−1)` for uniform weights.
/// Weights must be normalized.
pub fn weighted_summary(particles: &[DVector<f64>], weights: &[f64], time: f64) -> GaussianBelief {
    assert!(!particles.is_empty(), "empty particle set");
    assert_eq!(particles.len(), weights.len());
    let n = particles[0].len();
    let mut mean = DVector::zeros(n);
    for (p, &w) in particles.iter().zip(weights) {
        mean.axpy(w, p, 1.0);
    }
    let mut cov = DMatrix::zeros(n, n);
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let denom = 1.0 - sum_sq;
    if denom > 1e-14 {
        for (p, &w) in particles.iter().zip(weights) {
            if w > 0.0 {
                let d = p - &mean;
                cov.ger(w, &d, &d, 1.0);
            }
        }
        cov /= denom;
    }
    symmetrize(&mut cov);
    GaussianBelief::new(mean, cov, time)
}

/// Weighted mean with the covariance of unweighted deviations about it,
/// normalized by `1/(N−1)`.
pub fn unweighted_deviation_summary(particles: &[DVector<f64>], weights: &[f64], time: f64) -> GaussianBelief {
    let weighted = weighted_summary(particles, weights, time);
    let count = particles.len();
    let n = weighted.dim();
    let mut cov = DMatrix::zeros(n, n);
    if count > 1 {
        for p in particles {
            let d = p - &weighted.mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= (count - 1) as f64;
    }
    symmetrize(&mut cov);
    GaussianBelief::new(weighted.mean, cov, time)
}
