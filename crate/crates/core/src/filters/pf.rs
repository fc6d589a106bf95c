//! Bootstrap particle filter: the SDE itself is the proposal, weights are
//! kept in log space and normalized with log-sum-exp.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::summary::{unweighted_deviation_summary, weighted_summary};
use super::{draw_members, for_each_member, FilterError, GaussianBelief};
use crate::linalg::{is_finite_vec, symmetrize};
use crate::sde::{propagate, InputProfile, NoiseStream, SdeError, SdeModel, StreamPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplePolicy {
    Always,
    /// Resample when the effective sample size drops below half the particle count.
    EssThreshold,
    Never,
}

/// How a weighted particle set is summarized as a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PfCovariance {
    /// Weighted covariance, reliability-weight normalization.
    Weighted,
    /// Weighted mean, unweighted `1/(N−1)` spread about it.
    UnweightedDeviation,
}

/// Particles with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub time: f64,
}

impl ParticleSet {
    /// Equally weighted set.
    pub fn uniform(particles: Vec<DVector<f64>>, time: f64) -> Result<Self, FilterError> {
        if particles.is_empty() {
            return Err(FilterError::InvalidInput("a particle set cannot be empty".into()));
        }
        let w = 1.0 / particles.len() as f64;
        let weights = vec![w; particles.len()];
        Ok(Self { particles, weights, time })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    pub fn summary(&self, mode: PfCovariance) -> GaussianBelief {
        match mode {
            PfCovariance::Weighted => weighted_summary(&self.particles, &self.weights, self.time),
            PfCovariance::UnweightedDeviation => {
                unweighted_deviation_summary(&self.particles, &self.weights, self.time)
            }
        }
    }
}

/// Particle set plus the noise streams it owns.
#[derive(Debug, Clone)]
pub struct PfState {
    pub particles: ParticleSet,
    pub propagation: Vec<NoiseStream>,
    pub resampling: NoiseStream,
}

impl PfState {
    pub fn new(init: &GaussianBelief, count: usize, seed: u64) -> Result<Self, FilterError> {
        let members = draw_members(init, count, seed, StreamPurpose::ParticleInit)?;
        Ok(Self {
            particles: ParticleSet::uniform(members, init.time)?,
            propagation: (0..count)
                .map(|i| NoiseStream::for_member(seed, StreamPurpose::ParticlePropagation, i))
                .collect(),
            resampling: NoiseStream::for_member(seed, StreamPurpose::Resampling, 0),
        })
    }
}

/// `1 / Σ wᵢ²` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// Systematic resampling with a single offset `u₀ ∈ [0, 1/N)`.
/// Returns the index of the ancestor of each new particle, in ascending order.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    assert!(n > 0);
    let step = 1.0 / n as f64;
    debug_assert!((0.0..step).contains(&u0));
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cumulative.push(acc);
    }
    cumulative[n - 1] = 1.0;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 * step;
        while j < n - 1 && cumulative[j] <= u {
            j += 1;
        }
        out.push(j);
    }
    out
}

/// Normalized probabilities from log-weights; `None` when no weight is finite.
fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let exp: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Some(exp.into_iter().map(|e| e / total).collect())
}

/// Output of one predict/weight/resample cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep {
    /// Set carried to the next step (resampled when `resampled`).
    pub particles: ParticleSet,
    /// Summary of the propagated set under the previous weights.
    pub prior: GaussianBelief,
    /// Summary of the reweighted set before any resampling.
    pub posterior: GaussianBelief,
    /// `y − Σ wᵢ h(xᵢ)` under the prior weights.
    pub innovation: DVector<f64>,
    /// `R` plus the prior-weighted spread of `h(xᵢ)`.
    pub innovation_cov: DMatrix<f64>,
    /// Effective sample size after reweighting.
    pub ess: f64,
    pub resampled: bool,
}

/// Propagates every particle to `t1`, reweights by the Gaussian likelihood
/// of `y` and resamples according to `policy`.
#[allow(clippy::too_many_arguments)]
pub fn pf_step<M: SdeModel + ?Sized>(
    model: &M,
    set: &ParticleSet,
    inputs: &InputProfile,
    t1: f64,
    y: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
    propagation: &mut [NoiseStream],
    resampling: &mut NoiseStream,
    policy: ResamplePolicy,
    cov_mode: PfCovariance,
    max_step: f64,
) -> Result<PfStep, FilterError> {
    let t0 = set.time;
    if !(t1 > t0) {
        return Err(FilterError::InvalidInput(format!("cannot predict from {t0} to {t1}")));
    }
    if propagation.len() != set.len() {
        return Err(FilterError::InvalidInput("one noise stream per particle required".into()));
    }
    let r_chol = obs_cov
        .clone()
        .cholesky()
        .ok_or_else(|| FilterError::InvalidInput("measurement covariance must be positive definite".into()))?;

    let mut particles = set.particles.clone();
    for_each_member(&mut particles, propagation, |index, p, noise| {
        *p = propagate(model, p, inputs, t0, t1, max_step, noise).map_err(|e| match e {
            SdeError::IntegrationFailure { time, .. } => FilterError::MemberDivergence { index, time },
            other => FilterError::from(other),
        })?;
        Ok(())
    })?;
    let predicted = ParticleSet { particles, weights: set.weights.clone(), time: t1 };
    let prior = predicted.summary(cov_mode);

    let ny = y.len();
    let y_hat: Vec<DVector<f64>> = predicted.particles.iter().map(|p| model.measure(t1, p)).collect();
    let mut y_mean = DVector::zeros(ny);
    for (v, &w) in y_hat.iter().zip(&predicted.weights) {
        y_mean.axpy(w, v, 1.0);
    }
    let mut innovation_cov = weighted_summary(&y_hat, &predicted.weights, t1).cov + obs_cov;
    symmetrize(&mut innovation_cov);

    let log_w: Vec<f64> = y_hat
        .iter()
        .zip(&predicted.weights)
        .map(|(v, &w)| {
            let e = y - v;
            if !is_finite_vec(&e) || w <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let z = r_chol.solve(&e);
            w.ln() - 0.5 * e.dot(&z)
        })
        .collect();
    let weights = normalize_log_weights(&log_w).ok_or(FilterError::DegenerateLikelihood { time: t1 })?;
    let ess = effective_sample_size(&weights);
    let weighted = ParticleSet { particles: predicted.particles, weights, time: t1 };
    let posterior = weighted.summary(cov_mode);

    let n = weighted.len();
    let resample = match policy {
        ResamplePolicy::Always => true,
        ResamplePolicy::EssThreshold => ess < 0.5 * n as f64,
        ResamplePolicy::Never => false,
    };
    let particles = if resample {
        let u0 = resampling.uniform() / n as f64;
        let ancestors = systematic_resample(&weighted.weights, u0);
        let members = ancestors.into_iter().map(|a| weighted.particles[a].clone()).collect();
        ParticleSet::uniform(members, t1)?
    } else {
        weighted
    };
    Ok(PfStep { particles, prior, posterior, innovation: y - y_mean, innovation_cov, ess, resampled: resample })
}
