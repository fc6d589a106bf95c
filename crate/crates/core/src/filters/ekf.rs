//! Continuous-discrete extended Kalman filter.

use nalgebra::{DMatrix, DVector};

use super::{FilterError, GaussianBelief};
use crate::linalg::{is_finite_mat, is_finite_vec, right_solve, spd_factor, symmetrize};
use crate::sde::{drift_jacobian, measure_jacobian, substep_count, InputProfile, SdeModel};

/// Result of a Kalman-type measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub belief: GaussianBelief,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub condition: f64,
}

fn moments_rate<M: SdeModel + ?Sized>(
    model: &M,
    t: f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let a = drift_jacobian(model, t, mean, u);
    let sigma = model.diffusion(t, mean, u);
    let ap = &a * cov;
    let dp = &ap + ap.transpose() + &sigma * sigma.transpose();
    (model.drift(t, mean, u), dp)
}

/// Propagates `(m, P)` to `t1` by integrating
/// `ṁ = f(m)`, `Ṗ = A P + P Aᵀ + σσᵀ` with classical RK4 substeps.
pub fn ekf_predict<M: SdeModel + ?Sized>(
    model: &M,
    belief: &GaussianBelief,
    inputs: &InputProfile,
    t1: f64,
    max_step: f64,
) -> Result<GaussianBelief, FilterError> {
    let t0 = belief.time;
    if !(t1 > t0) {
        return Err(FilterError::InvalidInput(format!("cannot predict from {t0} to {t1}")));
    }
    let n = substep_count(t0, t1, max_step);
    let h = (t1 - t0) / n as f64;
    let mut m = belief.mean.clone();
    let mut p = belief.cov.clone();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let u = inputs.at(t);
        let (k1m, k1p) = moments_rate(model, t, &m, &p, u);
        let (k2m, k2p) = moments_rate(model, t + 0.5 * h, &(&m + &k1m * (0.5 * h)), &(&p + &k1p * (0.5 * h)), u);
        let (k3m, k3p) = moments_rate(model, t + 0.5 * h, &(&m + &k2m * (0.5 * h)), &(&p + &k2p * (0.5 * h)), u);
        let (k4m, k4p) = moments_rate(model, t + h, &(&m + &k3m * h), &(&p + &k3p * h), u);
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        model.constrain(&mut m);
        if !is_finite_vec(&m) || !is_finite_mat(&p) {
            return Err(FilterError::Divergence { time: t + h });
        }
    }
    symmetrize(&mut p);
    Ok(GaussianBelief::new(m, p, t1))
}

/// Kalman measurement update with the Joseph covariance form
/// `P⁺ = (I − KC) P (I − KC)ᵀ + K R Kᵀ`.
pub fn kalman_update<M: SdeModel + ?Sized>(
    belief: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<Analysis, FilterError> {
    if !belief.is_finite() {
        return Err(FilterError::Divergence { time: belief.time });
    }
    let t = belief.time;
    let c = measure_jacobian(model, t, &belief.mean);
    let y_hat = model.measure(t, &belief.mean);
    let innovation = y - y_hat;
    let pct = &belief.cov * c.transpose();
    let mut re = &c * &pct + obs_cov;
    symmetrize(&mut re);
    let (chol, condition) = spd_factor(&re).map_err(|condition| FilterError::SingularInnovation { condition })?;
    let gain = right_solve(&chol, &pct);
    let mean = &belief.mean + &gain * &innovation;
    let n = belief.dim();
    let j = DMatrix::identity(n, n) - &gain * &c;
    let mut cov = &j * &belief.cov * j.transpose() + &gain * obs_cov * gain.transpose();
    symmetrize(&mut cov);
    Ok(Analysis { belief: GaussianBelief::new(mean, cov, t), innovation, innovation_cov: re, gain, condition })
}
