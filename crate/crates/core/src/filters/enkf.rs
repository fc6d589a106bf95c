//! Continuous-discrete ensemble Kalman filter with perturbed observations.

use nalgebra::{DMatrix, DVector};

use super::summary::ensemble_summary;
use super::{draw_members, for_each_member, FilterError, GaussianBelief};
use crate::linalg::{is_finite_vec, psd_sqrt, right_solve, spd_factor, symmetrize};
use crate::sde::{propagate, InputProfile, NoiseStream, SdeError, SdeModel, StreamPurpose};

/// `N` equally weighted members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<DVector<f64>>,
    pub time: f64,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>, time: f64) -> Result<Self, FilterError> {
        if members.len() < 2 {
            return Err(FilterError::InvalidInput(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        Ok(Self { members, time })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    /// Members as the columns of an `n × N` matrix.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.members)
    }

    pub fn summary(&self) -> GaussianBelief {
        ensemble_summary(&self.members, self.time)
    }
}

/// Ensemble plus the per-member noise streams it owns.
#[derive(Debug, Clone)]
pub struct EnkfState {
    pub ensemble: Ensemble,
    pub propagation: Vec<NoiseStream>,
    pub perturbation: Vec<NoiseStream>,
}

impl EnkfState {
    pub fn new(init: &GaussianBelief, size: usize, seed: u64) -> Result<Self, FilterError> {
        let members = draw_members(init, size, seed, StreamPurpose::EnsembleInit)?;
        Ok(Self {
            ensemble: Ensemble::new(members, init.time)?,
            propagation: (0..size)
                .map(|i| NoiseStream::for_member(seed, StreamPurpose::EnsemblePropagation, i))
                .collect(),
            perturbation: (0..size)
                .map(|i| NoiseStream::for_member(seed, StreamPurpose::EnsemblePerturbation, i))
                .collect(),
        })
    }
}

/// Integrates every member to `t1` with its own Euler–Maruyama noise stream.
pub fn enkf_predict<M: SdeModel + ?Sized>(
    model: &M,
    ensemble: &Ensemble,
    inputs: &InputProfile,
    t1: f64,
    max_step: f64,
    streams: &mut [NoiseStream],
) -> Result<Ensemble, FilterError> {
    let t0 = ensemble.time;
    if !(t1 > t0) {
        return Err(FilterError::InvalidInput(format!("cannot predict from {t0} to {t1}")));
    }
    if streams.len() != ensemble.len() {
        return Err(FilterError::InvalidInput("one noise stream per member required".into()));
    }
    let mut members = ensemble.members.clone();
    for_each_member(&mut members, streams, |index, member, noise| {
        *member = propagate(model, member, inputs, t0, t1, max_step, noise).map_err(|e| match e {
            SdeError::IntegrationFailure { time, .. } => FilterError::MemberDivergence { index, time },
            other => FilterError::from(other),
        })?;
        Ok(())
    })?;
    Ok(Ensemble { members, time: t1 })
}

/// Analysis of a perturbed-observation update.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAnalysis {
    pub ensemble: Ensemble,
    /// Sample summary of the updated ensemble.
    pub belief: GaussianBelief,
    /// `y − mean(ŷ⁽ⁱ⁾)`.
    pub innovation: DVector<f64>,
    /// `R_yy`.
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub condition: f64,
}

/// Perturbed-observation analysis: every member assimilates `y + v⁽ⁱ⁾` with
/// `v⁽ⁱ⁾ ~ N(0, R)` through the gain built from sample covariances.
pub fn enkf_update<M: SdeModel + ?Sized>(
    ensemble: &Ensemble,
    model: &M,
    y: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
    streams: &mut [NoiseStream],
) -> Result<EnsembleAnalysis, FilterError> {
    let count = ensemble.len();
    if count < 2 {
        return Err(FilterError::InvalidInput("the ensemble update needs at least 2 members".into()));
    }
    if streams.len() != count {
        return Err(FilterError::InvalidInput("one perturbation stream per member required".into()));
    }
    let t = ensemble.time;
    let (n, ny) = (ensemble.dim(), y.len());
    let r_root = psd_sqrt(obs_cov).ok_or(FilterError::Factorization { time: t })?;

    let predicted: Vec<DVector<f64>> = ensemble.members.iter().map(|x| model.measure(t, x)).collect();
    let innovations: Vec<DVector<f64>> = predicted
        .iter()
        .zip(streams.iter_mut())
        .map(|(y_hat, noise)| {
            let v = &r_root * noise.standard_normal_vec(ny);
            y + v - y_hat
        })
        .collect();

    let x_mean = ensemble.members.iter().fold(DVector::zeros(n), |acc, x| acc + x) / count as f64;
    let y_mean = predicted.iter().fold(DVector::zeros(ny), |acc, v| acc + v) / count as f64;
    let mut rxy = DMatrix::zeros(n, ny);
    let mut ryy = DMatrix::zeros(ny, ny);
    for (x, y_hat) in ensemble.members.iter().zip(&predicted) {
        let dx = x - &x_mean;
        let dy = y_hat - &y_mean;
        rxy.ger(1.0, &dx, &dy, 1.0);
        ryy.ger(1.0, &dy, &dy, 1.0);
    }
    let scale = 1.0 / (count - 1) as f64;
    rxy *= scale;
    ryy = ryy * scale + obs_cov;
    symmetrize(&mut ryy);
    let (chol, condition) = spd_factor(&ryy).map_err(|condition| FilterError::SingularInnovation { condition })?;
    let gain = right_solve(&chol, &rxy);

    let mut members = Vec::with_capacity(count);
    for (index, (x, e)) in ensemble.members.iter().zip(&innovations).enumerate() {
        let mut updated = x + &gain * e;
        model.constrain(&mut updated);
        if !is_finite_vec(&updated) {
            return Err(FilterError::MemberDivergence { index, time: t });
        }
        members.push(updated);
    }
    let updated = Ensemble { members, time: t };
    let belief = updated.summary();
    Ok(EnsembleAnalysis { ensemble: updated, belief, innovation: y - y_mean, innovation_cov: ryy, gain, condition })
}
