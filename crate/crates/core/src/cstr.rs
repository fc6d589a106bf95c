//! Adiabatic CSTR with the second-order exothermic reaction `A + 2B → C`.
//!
//! States are `(C_A, C_B, T)`; the input is the flow rate `F` and the only
//! noise source is the inlet temperature, which enters the energy balance as
//! `(F/V)·σ_T dω`. The heat-rise parameter `β = −ΔH_r/(ρ c_p)` is the
//! model parameter estimated by the filters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sde::{augment, AugmentedModel, InputProfile, ParametricSde, SdeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CstrError {
    #[error("steady-state temperature {t_s} K is outside the admissible branch: {reason}")]
    OutOfBranch { t_s: f64, reason: &'static str },
    #[error("invalid flow profile: {0}")]
    Profile(String),
}

/// Physical constants of the reactor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrParams {
    /// Density, kg/L.
    pub rho: f64,
    /// Specific heat, kJ/(kg·K).
    pub cp: f64,
    /// Natural log of the Arrhenius prefactor `k₀` in L/(mol·s).
    pub ln_k0: f64,
    /// Activation temperature `E_a/R`, K.
    pub ea_r: f64,
    /// Reactor volume, L.
    pub volume: f64,
    pub ca_in: f64,
    pub cb_in: f64,
    /// Inlet temperature, K.
    pub t_in: f64,
    /// Heat-rise parameter, K·L/mol.
    pub beta: f64,
    /// Inlet-temperature noise magnitude, K.
    pub sigma_t: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            cp: 4.186,
            ln_k0: 24.6,
            ea_r: 8500.0,
            volume: 0.105,
            ca_in: 1.6 / 2.0,
            cb_in: 2.4 / 2.0,
            t_in: 273.65,
            beta: 133.7792,
            sigma_t: 5.0,
        }
    }
}

impl CstrParams {
    pub fn k0(&self) -> f64 {
        self.ln_k0.exp()
    }

    /// `ΔH_r = −β·ρ·c_p`, kJ/mol.
    pub fn reaction_enthalpy(&self) -> f64 {
        -self.beta * self.rho * self.cp
    }

    /// Parameters with `β` taken from a reaction enthalpy.
    pub fn with_enthalpy(mut self, delta_h_r: f64) -> Self {
        self.beta = -delta_h_r / (self.rho * self.cp);
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let positive = [
            ("rho", self.rho),
            ("cp", self.cp),
            ("ea_r", self.ea_r),
            ("volume", self.volume),
            ("ca_in", self.ca_in),
            ("cb_in", self.cb_in),
            ("t_in", self.t_in),
            ("beta", self.beta),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                bad.push(format!("cstr.{name} must be positive and finite (got {value})"));
            }
        }
        if !self.ln_k0.is_finite() {
            bad.push("cstr.ln_k0 must be finite".into());
        }
        if !(self.sigma_t >= 0.0) {
            bad.push(format!("cstr.sigma_t must be nonnegative (got {})", self.sigma_t));
        }
        bad
    }

    /// Concentrations on the adiabatic steady-state manifold at temperature `t`.
    pub fn adiabatic_concentrations(&self, t: f64, beta: f64) -> (f64, f64) {
        let rise = (t - self.t_in) / beta;
        (self.ca_in - rise, self.cb_in - 2.0 * rise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CstrState {
    pub ca: f64,
    pub cb: f64,
    pub t: f64,
}

impl CstrState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.ca, self.cb, self.t])
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self { ca: x[0], cb: x[1], t: x[2] }
    }
}

/// Piecewise-constant flow rate in L/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowProfile {
    /// Start of each segment, s.
    pub breakpoints_s: Vec<f64>,
    /// Flow on each segment, L/s.
    pub flows_l_per_s: Vec<f64>,
}

impl Default for FlowProfile {
    /// Cold start on the low branch, a drop below the ignition fold, a partial
    /// recovery inside the multiplicity region and finally extinction.
    fn default() -> Self {
        Self { breakpoints_s: vec![0.0, 180.0, 900.0, 1500.0], flows_l_per_s: vec![0.010, 0.004, 0.008, 0.012] }
    }
}

impl FlowProfile {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.breakpoints_s.is_empty() || self.breakpoints_s.len() != self.flows_l_per_s.len() {
            bad.push("flow_profile needs one flow per breakpoint".into());
        }
        if self.breakpoints_s.windows(2).any(|w| w[1] <= w[0]) {
            bad.push("flow_profile.breakpoints_s must be increasing".into());
        }
        if self.flows_l_per_s.iter().any(|&f| !(f > 0.0)) {
            bad.push("flow_profile.flows_l_per_s must be positive".into());
        }
        bad
    }

    pub fn flow_at(&self, t: f64) -> f64 {
        let idx = self.breakpoints_s.partition_point(|&b| b <= t);
        self.flows_l_per_s[idx.saturating_sub(1)]
    }

    pub fn to_inputs(&self) -> Result<InputProfile, CstrError> {
        let bad = self.validate();
        if !bad.is_empty() {
            return Err(CstrError::Profile(bad.join("; ")));
        }
        InputProfile::new(
            self.breakpoints_s.clone(),
            self.flows_l_per_s.iter().map(|&f| DVector::from_element(1, f)).collect(),
        )
        .map_err(|e| CstrError::Profile(e.to_string()))
    }
}

/// `k(T) = k₀·exp(−E_a/(R·T))`.
pub fn rate_constant(t: f64, params: &CstrParams) -> f64 {
    (params.ln_k0 - params.ea_r / t).exp()
}

/// Rates of `(C_A, C_B, T)` at flow `flow` and heat-rise parameter `beta`.
pub fn cstr3_drift_with_beta(state: &CstrState, flow: f64, beta: f64, params: &CstrParams) -> [f64; 3] {
    let d = flow / params.volume;
    let r = rate_constant(state.t, params) * state.ca * state.cb;
    [d * (params.ca_in - state.ca) - r, d * (params.cb_in - state.cb) - 2.0 * r, d * (params.t_in - state.t) + beta * r]
}

pub fn cstr3_drift(state: &CstrState, flow: f64, params: &CstrParams) -> [f64; 3] {
    cstr3_drift_with_beta(state, flow, params.beta, params)
}

/// Analytic `∂f/∂(C_A, C_B, T)`.
pub fn cstr3_jacobian_with_beta(state: &CstrState, flow: f64, beta: f64, params: &CstrParams) -> DMatrix<f64> {
    let d = flow / params.volume;
    let k = rate_constant(state.t, params);
    let dr_dca = k * state.cb;
    let dr_dcb = k * state.ca;
    let dr_dt = k * params.ea_r / (state.t * state.t) * state.ca * state.cb;
    DMatrix::from_row_slice(
        3,
        3,
        &[
            -d - dr_dca,
            -dr_dcb,
            -dr_dt,
            -2.0 * dr_dca,
            -d - 2.0 * dr_dcb,
            -2.0 * dr_dt,
            beta * dr_dca,
            beta * dr_dcb,
            -d + beta * dr_dt,
        ],
    )
}

pub fn cstr3_jacobian(state: &CstrState, flow: f64, params: &CstrParams) -> DMatrix<f64> {
    cstr3_jacobian_with_beta(state, flow, params.beta, params)
}

/// Rates of `(X, T)` where `X = (C_B,in − C_B)/C_B,in` is the extent of reaction.
pub fn cstr2_drift(x: f64, t: f64, flow: f64, params: &CstrParams) -> [f64; 2] {
    let d = flow / params.volume;
    let cb = (params.cb_in * (1.0 - x)).max(0.0);
    let ca = (params.ca_in - 0.5 * params.cb_in * x).max(0.0);
    let r = rate_constant(t, params) * ca * cb;
    [-d * x + 2.0 * r / params.cb_in, d * (params.t_in - t) + params.beta * r]
}

/// Rate of `T` with both concentrations eliminated through the adiabatic relations.
pub fn cstr1_drift(t: f64, flow: f64, params: &CstrParams) -> f64 {
    let d = flow / params.volume;
    let (ca, cb) = params.adiabatic_concentrations(t, params.beta);
    let r = rate_constant(t, params) * ca.max(0.0) * cb.max(0.0);
    d * (params.t_in - t) + params.beta * r
}

/// Flow rate at which `T_s` is a steady state.
pub fn steady_state_flow(t_s: f64, params: &CstrParams) -> Result<f64, CstrError> {
    if !(t_s > params.t_in) {
        return Err(CstrError::OutOfBranch { t_s, reason: "temperature at or below the inlet" });
    }
    let (ca, cb) = params.adiabatic_concentrations(t_s, params.beta);
    if !(ca > 0.0) || !(cb > 0.0) {
        return Err(CstrError::OutOfBranch { t_s, reason: "negative steady-state concentration" });
    }
    Ok(params.volume * params.beta * rate_constant(t_s, params) * ca * cb / (t_s - params.t_in))
}

/// Largest admissible steady-state temperature (complete conversion of the
/// limiting reactant).
pub fn max_steady_temperature(params: &CstrParams) -> f64 {
    params.t_in + params.beta * params.ca_in.min(params.cb_in / 2.0)
}

/// One point of the steady-state curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyPoint {
    pub t_s: f64,
    pub f_s: f64,
}

/// Samples `F_s(T_s)` on an even grid over `[t_min, t_max]`, keeping only
/// admissible points.
pub fn steady_state_curve(params: &CstrParams, t_min: f64, t_max: f64, points: usize) -> Vec<SteadyPoint> {
    if points == 0 {
        return Vec::new();
    }
    let step = if points > 1 { (t_max - t_min) / (points - 1) as f64 } else { 0.0 };
    (0..points)
        .filter_map(|i| {
            let t_s = t_min + i as f64 * step;
            steady_state_flow(t_s, params).ok().map(|f_s| SteadyPoint { t_s, f_s })
        })
        .collect()
}

/// Default grid for the curve: just above the inlet up to just below full conversion.
pub fn default_curve_range(params: &CstrParams) -> (f64, f64) {
    let hi = max_steady_temperature(params);
    let margin = 1e-3 * (hi - params.t_in);
    (params.t_in + margin, hi - margin)
}

/// Interior local extrema of a sampled curve: `(maxima, minima)` indices.
pub fn curve_extrema(curve: &[SteadyPoint]) -> (Vec<usize>, Vec<usize>) {
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    for i in 1..curve.len().saturating_sub(1) {
        let (a, b, c) = (curve[i - 1].f_s, curve[i].f_s, curve[i + 1].f_s);
        if b > a && b > c {
            maxima.push(i);
        } else if b < a && b < c {
            minima.push(i);
        }
    }
    (maxima, minima)
}

/// Norm of the 3-state drift at the steady state implied by a curve point.
pub fn steady_state_residual(point: &SteadyPoint, params: &CstrParams) -> f64 {
    let (ca, cb) = params.adiabatic_concentrations(point.t_s, params.beta);
    let rates = cstr3_drift(&CstrState { ca, cb, t: point.t_s }, point.f_s, params);
    rates.iter().map(|r| r * r).sum::<f64>().sqrt()
}

/// The 3-state stochastic reactor with parameter vector `θ = [β]` and input `u = [F]`.
#[derive(Debug, Clone)]
pub struct CstrModel {
    pub params: CstrParams,
}

impl CstrModel {
    pub fn new(params: CstrParams) -> Self {
        Self { params }
    }
}

fn state_of(x: &DVector<f64>) -> CstrState {
    CstrState { ca: x[0], cb: x[1], t: x[2] }
}

impl ParametricSde for CstrModel {
    fn dim_state(&self) -> usize {
        3
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn dim_obs(&self) -> usize {
        1
    }
    fn dim_param(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let rates = cstr3_drift_with_beta(&state_of(x), u[0], theta[0], &self.params);
        DVector::from_row_slice(&rates)
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 1, &[0.0, 0.0, u[0] / self.params.volume * self.params.sigma_t])
    }

    fn measure(&self, _t: f64, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[2])
    }

    fn drift_jacobian(
        &self,
        _t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        Some(cstr3_jacobian_with_beta(&state_of(x), u[0], theta[0], &self.params))
    }

    fn drift_param_jacobian(
        &self,
        _t: f64,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let r = rate_constant(x[2], &self.params) * x[0] * x[1];
        Some(DMatrix::from_row_slice(3, 1, &[0.0, 0.0, r]))
    }

    fn measure_jacobian(&self, _t: f64, _x: &DVector<f64>, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]))
    }

    fn measure_param_jacobian(&self, _t: f64, _x: &DVector<f64>, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }

    /// Noise and analysis updates can push concentrations below zero; clamp them.
    fn constrain(&self, x: &mut DVector<f64>) {
        x[0] = x[0].max(0.0);
        x[1] = x[1].max(0.0);
    }
}

/// Everything needed to run the joint state/β estimation problem.
#[derive(Debug, Clone)]
pub struct ExperimentModel {
    pub model: AugmentedModel<CstrModel>,
    pub flow: FlowProfile,
    pub inputs: InputProfile,
    /// Measurement noise covariance `R`.
    pub obs_cov: DMatrix<f64>,
}

/// The 3-state reactor with β appended as a fourth state, observed through `T`.
pub fn default_experiment_model(
    params: &CstrParams,
    flow: &FlowProfile,
    obs_var: f64,
    param_diffusion: f64,
) -> Result<ExperimentModel, CstrError> {
    let model = augment(
        CstrModel::new(params.clone()),
        DVector::from_element(1, params.beta),
        DVector::from_element(1, param_diffusion),
    )
    .map_err(|e: SdeError| CstrError::Profile(e.to_string()))?;
    Ok(ExperimentModel {
        model,
        flow: flow.clone(),
        inputs: flow.to_inputs()?,
        obs_cov: DMatrix::from_element(1, 1, obs_var),
    })
}

/// Temperatures of the 3-, 2- and 1-state models driven by the same flow and
/// the same inlet-temperature increments, started from the feed state.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedComparison {
    pub times: Vec<f64>,
    pub flow: Vec<f64>,
    pub t3: Vec<f64>,
    pub t2: Vec<f64>,
    pub t1: Vec<f64>,
}

pub fn simulate_reduced_models(
    params: &CstrParams,
    flow: &FlowProfile,
    horizon_s: f64,
    dt: f64,
    noise: &mut crate::sde::NoiseStream,
) -> ReducedComparison {
    let steps = (horizon_s / dt).round() as usize;
    let mut out = ReducedComparison {
        times: Vec::with_capacity(steps + 1),
        flow: Vec::with_capacity(steps + 1),
        t3: Vec::with_capacity(steps + 1),
        t2: Vec::with_capacity(steps + 1),
        t1: Vec::with_capacity(steps + 1),
    };
    let mut s3 = CstrState { ca: params.ca_in, cb: params.cb_in, t: params.t_in };
    let (mut x2, mut temp2) = (0.0, params.t_in);
    let mut temp1 = params.t_in;
    for i in 0..=steps {
        let t = i as f64 * dt;
        let f = flow.flow_at(t);
        out.times.push(t);
        out.flow.push(f);
        out.t3.push(s3.t);
        out.t2.push(temp2);
        out.t1.push(temp1);
        if i == steps {
            break;
        }
        let kick = f / params.volume * params.sigma_t * noise.standard_normal() * dt.sqrt();
        let r3 = cstr3_drift(&s3, f, params);
        s3 = CstrState {
            ca: (s3.ca + r3[0] * dt).max(0.0),
            cb: (s3.cb + r3[1] * dt).max(0.0),
            t: s3.t + r3[2] * dt + kick,
        };
        let r2 = cstr2_drift(x2, temp2, f, params);
        x2 += r2[0] * dt;
        temp2 += r2[1] * dt + kick;
        temp1 += cstr1_drift(temp1, f, params) * dt + kick;
    }
    out
}
