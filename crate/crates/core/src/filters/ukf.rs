//! Continuous-discrete unscented Kalman filter.
//!
//! The time update draws `2(n + n_w) + 1` sigma points from the state
//! augmented with the interval's Wiener increment `dω ~ N(0, I·Δt)`. Each
//! point follows the SDE with its own increment spread evenly over the
//! interval, i.e. it solves `ẋ = f(x) + σ(x)·dω⁽ⁱ⁾/Δt`. The measurement update
//! redraws `2n + 1` points from the predicted belief.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ekf::Analysis;
use super::{FilterError, GaussianBelief};
use crate::linalg::{is_finite_vec, psd_sqrt, right_solve, spd_factor, symmetrize};
use crate::sde::{substep_count, InputProfile, SdeModel};

/// Spread `α`, prior-knowledge `β` and secondary scaling `κ` of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UkfScaling {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfScaling {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 2.0, kappa: 0.0 }
    }
}

impl UkfScaling {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.kappa >= 0.0) || !self.beta.is_finite() {
            return Err(FilterError::InvalidInput(format!("UKF scaling needs α in (0, 1] and κ ≥ 0, got {self:?}")));
        }
        Ok(())
    }

    /// `c = α²(n + κ)`, the squared spread of the points.
    pub fn spread(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa)
    }

    /// Mean and covariance weights for an `n`-dimensional set.
    pub fn weights(&self, n: usize) -> (DVector<f64>, DVector<f64>) {
        let c = self.spread(n);
        let lambda = c - n as f64;
        let w0 = lambda / (n as f64 + lambda);
        let wi = 1.0 / (2.0 * (n as f64 + lambda));
        let mut wm = DVector::from_element(2 * n + 1, wi);
        let mut wc = wm.clone();
        wm[0] = w0;
        wc[0] = w0 + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

/// Sigma points of a belief, optionally augmented with Wiener increments.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    /// State part, one point per column.
    pub points: DMatrix<f64>,
    /// Increment part `dω⁽ⁱ⁾`, one column per point (zero rows when not augmented).
    pub noise_points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
}

impl SigmaPointSet {
    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Weighted mean and covariance of the state part.
    pub fn state_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        weighted_moments(&self.points, &self.mean_weights, &self.cov_weights)
    }

    /// Weighted mean and covariance of the increment part.
    pub fn noise_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        weighted_moments(&self.noise_points, &self.mean_weights, &self.cov_weights)
    }
}

/// Moments accumulated relative to the centre point: the weights sum to one,
/// so this is algebraically the plain weighted sum but avoids cancelling the
/// large negative centre weight against the rest. Coincident points give
/// exactly zero covariance.
fn weighted_moments(points: &DMatrix<f64>, wm: &DVector<f64>, wc: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let center = points.column(0).into_owned();
    let mut dev = points.clone();
    for mut col in dev.column_iter_mut() {
        col -= &center;
    }
    let shift = &dev * wm;
    let mean = &center + &shift;
    for mut col in dev.column_iter_mut() {
        col -= &shift;
    }
    let weighted = DMatrix::from_fn(dev.nrows(), dev.ncols(), |i, j| dev[(i, j)] * wc[j]);
    let mut cov = weighted * dev.transpose();
    symmetrize(&mut cov);
    (mean, cov)
}

/// Sigma points for `belief` augmented with an `noise_dim`-dimensional
/// increment of covariance `I·dt_total`. Pass `noise_dim = 0` for the plain set.
pub fn ukf_sigma_points(
    belief: &GaussianBelief,
    scaling: &UkfScaling,
    noise_dim: usize,
    dt_total: f64,
) -> Result<SigmaPointSet, FilterError> {
    scaling.validate()?;
    let n = belief.dim();
    let n_aug = n + noise_dim;
    let root = psd_sqrt(&belief.cov).ok_or(FilterError::Factorization { time: belief.time })?;
    let c = scaling.spread(n_aug);
    let spread = c.sqrt();
    let (mean_weights, cov_weights) = scaling.weights(n_aug);
    let cols = 2 * n_aug + 1;
    let mut points = DMatrix::zeros(n, cols);
    let mut noise_points = DMatrix::zeros(noise_dim, cols);
    for j in 0..cols {
        points.set_column(j, &belief.mean);
    }
    for k in 0..n {
        let offset = root.column(k) * spread;
        let mut plus = points.column_mut(1 + k);
        plus += &offset;
        let mut minus = points.column_mut(1 + n_aug + k);
        minus -= &offset;
    }
    let noise_offset = spread * dt_total.max(0.0).sqrt();
    for k in 0..noise_dim {
        noise_points[(k, 1 + n + k)] = noise_offset;
        noise_points[(k, 1 + n_aug + n + k)] = -noise_offset;
    }
    Ok(SigmaPointSet { points, noise_points, mean_weights, cov_weights })
}

/// One sigma path over `[t0, t1]` forced by the constant rate `rate = dω/Δt`.
fn integrate_sigma_path<M: SdeModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    rate: &DVector<f64>,
    inputs: &InputProfile,
    t0: f64,
    t1: f64,
    max_step: f64,
) -> Result<DVector<f64>, FilterError> {
    let n = substep_count(t0, t1, max_step);
    let h = (t1 - t0) / n as f64;
    let field = |t: f64, x: &DVector<f64>, u: &DVector<f64>| {
        let mut dx = model.drift(t, x, u);
        if !rate.is_empty() {
            dx.gemv(1.0, &model.diffusion(t, x, u), rate, 1.0);
        }
        dx
    };
    let mut x = x0.clone();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let u = inputs.at(t);
        let k1 = field(t, &x, u);
        let k2 = field(t + 0.5 * h, &(&x + &k1 * (0.5 * h)), u);
        let k3 = field(t + 0.5 * h, &(&x + &k2 * (0.5 * h)), u);
        let k4 = field(t + h, &(&x + &k3 * h), u);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        model.constrain(&mut x);
        if !is_finite_vec(&x) {
            return Err(FilterError::Divergence { time: t + h });
        }
    }
    Ok(x)
}

/// Unscented time update to `t1`.
pub fn ukf_predict<M: SdeModel + ?Sized>(
    model: &M,
    belief: &GaussianBelief,
    inputs: &InputProfile,
    t1: f64,
    scaling: &UkfScaling,
    max_step: f64,
) -> Result<GaussianBelief, FilterError> {
    let t0 = belief.time;
    if !(t1 > t0) {
        return Err(FilterError::InvalidInput(format!("cannot predict from {t0} to {t1}")));
    }
    let dt = t1 - t0;
    let set = ukf_sigma_points(belief, scaling, model.dim_noise(), dt)?;
    let mut propagated = DMatrix::zeros(belief.dim(), set.len());
    for j in 0..set.len() {
        let x0 = set.points.column(j).into_owned();
        let rate = set.noise_points.column(j) / dt;
        let x1 = integrate_sigma_path(model, &x0, &rate, inputs, t0, t1, max_step)?;
        propagated.set_column(j, &x1);
    }
    let (mean, cov) = weighted_moments(&propagated, &set.mean_weights, &set.cov_weights);
    Ok(GaussianBelief::new(mean, cov, t1))
}

/// Unscented measurement update with `P⁺ = P − K R_yy Kᵀ`.
pub fn ukf_update<M: SdeModel + ?Sized>(
    belief: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
    scaling: &UkfScaling,
) -> Result<Analysis, FilterError> {
    if !belief.is_finite() {
        return Err(FilterError::Divergence { time: belief.time });
    }
    let t = belief.time;
    let set = ukf_sigma_points(belief, scaling, 0, 0.0)?;
    let ny = model.dim_obs();
    let mut ys = DMatrix::zeros(ny, set.len());
    for j in 0..set.len() {
        ys.set_column(j, &model.measure(t, &set.points.column(j).into_owned()));
    }
    let y0 = ys.column(0).into_owned();
    let mut y_hat = y0.clone();
    for j in 1..set.len() {
        y_hat.axpy(set.mean_weights[j], &(ys.column(j) - &y0), 1.0);
    }
    let mut ex = set.points.clone();
    for mut col in ex.column_iter_mut() {
        col -= &belief.mean;
    }
    let mut ey = ys;
    for mut col in ey.column_iter_mut() {
        col -= &y_hat;
    }
    let wc = &set.cov_weights;
    let ey_w = DMatrix::from_fn(ny, ey.ncols(), |i, j| ey[(i, j)] * wc[j]);
    let mut ryy = &ey_w * ey.transpose() + obs_cov;
    symmetrize(&mut ryy);
    let rxy = &ex * ey_w.transpose();
    let (chol, condition) = spd_factor(&ryy).map_err(|condition| FilterError::SingularInnovation { condition })?;
    let gain = right_solve(&chol, &rxy);
    let innovation = y - y_hat;
    let mean = &belief.mean + &gain * &innovation;
    let mut cov = &belief.cov - &gain * &ryy * gain.transpose();
    symmetrize(&mut cov);
    Ok(Analysis { belief: GaussianBelief::new(mean, cov, t), innovation, innovation_cov: ryy, gain, condition })
}
