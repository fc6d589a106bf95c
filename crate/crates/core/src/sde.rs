//! Continuous-discrete stochastic models.
//!
//! A model is an Itô SDE `dx = f(t, x, u) dt + σ(t, x, u) dω` driven by a
//! standard Wiener process (`Q_c = I`), observed at discrete instants through
//! `y_k = h(t_k, x(t_k)) + v_k` with `v_k ~ N(0, R_k)`. Only additive noise is
//! supported; `σ` receives the state for interface generality.
//!
//! The filters in this crate approximate the evolution of the state density
//! between measurements (the Fokker–Planck equation) by linearization
//! (EKF), deterministic sampling (UKF) or Monte-Carlo sampling (EnKF, PF).
//!
//! Unknown parameters are estimated jointly with the state by augmenting the
//! state with a zero-drift parameter block, see [`augment`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_finite_mat, is_finite_vec, numerical_jacobian};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error("integration failed at t = {time}: non-finite drift or diffusion at state {state:?}")]
    IntegrationFailure { time: f64, state: Vec<f64> },
    #[error("step {dt} does not divide the interval [{t0}, {t1}]")]
    InvalidStep { t0: f64, t1: f64, dt: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A continuous-discrete stochastic model over a fixed state.
pub trait SdeModel: Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn dim_obs(&self) -> usize;

    /// Drift `f(t, x, u)`.
    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Diffusion `σ(t, x, u)`, an `n_x × n_w` matrix.
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// Noise-free measurement `h(t, x)`.
    fn measure(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;

    fn drift_jacobian(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn measure_jacobian(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Projects a state back onto the admissible set after an integrator substep.
    fn constrain(&self, _x: &mut DVector<f64>) {}
}

/// Drift Jacobian, analytic when the model provides one, central differences otherwise.
pub fn drift_jacobian<M: SdeModel + ?Sized>(model: &M, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    model.drift_jacobian(t, x, u).unwrap_or_else(|| numerical_jacobian(|v| model.drift(t, v, u), x, model.dim_state()))
}

/// Measurement Jacobian, analytic when available, central differences otherwise.
pub fn measure_jacobian<M: SdeModel + ?Sized>(model: &M, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
    model.measure_jacobian(t, x).unwrap_or_else(|| numerical_jacobian(|v| model.measure(t, v), x, model.dim_obs()))
}

/// A model whose drift, diffusion and measurement depend on a parameter vector θ.
pub trait ParametricSde: Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn dim_obs(&self) -> usize;
    fn dim_param(&self) -> usize;

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    fn measure(&self, t: f64, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;

    /// `∂f/∂x`.
    fn drift_jacobian(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂f/∂θ`, an `n_x × n_θ` matrix.
    fn drift_param_jacobian(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂h/∂x`.
    fn measure_jacobian(&self, _t: f64, _x: &DVector<f64>, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂h/∂θ`.
    fn measure_param_jacobian(&self, _t: f64, _x: &DVector<f64>, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn constrain(&self, _x: &mut DVector<f64>) {}
}

/// A parametric model with θ held at a fixed value.
#[derive(Debug, Clone)]
pub struct FixedParams<M> {
    pub base: M,
    pub theta: DVector<f64>,
}

impl<M: ParametricSde> FixedParams<M> {
    pub fn new(base: M, theta: DVector<f64>) -> Self {
        Self { base, theta }
    }
}

impl<M: ParametricSde> SdeModel for FixedParams<M> {
    fn dim_state(&self) -> usize {
        self.base.dim_state()
    }
    fn dim_noise(&self) -> usize {
        self.base.dim_noise()
    }
    fn dim_obs(&self) -> usize {
        self.base.dim_obs()
    }
    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.drift(t, x, u, &self.theta)
    }
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.diffusion(t, x, u, &self.theta)
    }
    fn measure(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.base.measure(t, x, &self.theta)
    }
    fn drift_jacobian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.base.drift_jacobian(t, x, u, &self.theta)
    }
    fn measure_jacobian(&self, t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.base.measure_jacobian(t, x, &self.theta)
    }
    fn constrain(&self, x: &mut DVector<f64>) {
        self.base.constrain(x)
    }
}

/// Measurement noise description. The process noise is a standard Wiener
/// process, so only `R` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub obs_cov: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn new(obs_cov: DMatrix<f64>) -> Result<Self, SdeError> {
        if obs_cov.nrows() != obs_cov.ncols() || obs_cov.nrows() == 0 {
            return Err(SdeError::Dimension("observation covariance must be square".into()));
        }
        let asym = (&obs_cov - obs_cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(SdeError::Dimension(format!(
                "observation covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if crate::linalg::min_eigenvalue(&obs_cov) <= 0.0 {
            return Err(SdeError::Dimension("observation covariance is not positive definite".into()));
        }
        Ok(Self { obs_cov })
    }

    pub fn scalar(variance: f64) -> Result<Self, SdeError> {
        Self::new(DMatrix::from_element(1, 1, variance))
    }
}

/// State `(x; θ)` with `dθ = σ_θ dω_θ`.
///
/// When `σ_θ` is identically zero the parameter block carries no noise and the
/// noise dimension stays `n_w`, so an augmented simulation consumes exactly the
/// same increments as the base model.
#[derive(Debug, Clone)]
pub struct AugmentedModel<M> {
    pub base: M,
    pub theta0: DVector<f64>,
    /// Diagonal of `σ_θ`.
    pub param_diffusion: DVector<f64>,
}

/// Builds the augmented model `(x; θ)` with drift `(f; 0)` and diffusion
/// `blockdiag(σ, σ_θ)`.
pub fn augment<M: ParametricSde>(
    model: M,
    theta0: DVector<f64>,
    param_diffusion: DVector<f64>,
) -> Result<AugmentedModel<M>, SdeError> {
    let np = model.dim_param();
    if theta0.len() != np || param_diffusion.len() != np {
        return Err(SdeError::Dimension(format!(
            "model has {np} parameters, got θ0 of length {} and σ_θ of length {}",
            theta0.len(),
            param_diffusion.len()
        )));
    }
    Ok(AugmentedModel { base: model, theta0, param_diffusion })
}

impl<M: ParametricSde> AugmentedModel<M> {
    pub fn dim_param(&self) -> usize {
        self.base.dim_param()
    }

    fn param_noise_active(&self) -> bool {
        self.param_diffusion.iter().any(|&s| s != 0.0)
    }

    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nx = self.base.dim_state();
        (z.rows(0, nx).into_owned(), z.rows(nx, self.dim_param()).into_owned())
    }

    /// Stacks a physical state and a parameter vector.
    pub fn join(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(x.len() + theta.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), theta.len()).copy_from(theta);
        z
    }
}

impl<M: ParametricSde> SdeModel for AugmentedModel<M> {
    fn dim_state(&self) -> usize {
        self.base.dim_state() + self.base.dim_param()
    }

    fn dim_noise(&self) -> usize {
        if self.param_noise_active() {
            self.base.dim_noise() + self.base.dim_param()
        } else {
            self.base.dim_noise()
        }
    }

    fn dim_obs(&self) -> usize {
        self.base.dim_obs()
    }

    fn drift(&self, t: f64, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (x, theta) = self.split(z);
        let f = self.base.drift(t, &x, u, &theta);
        let mut out = DVector::zeros(self.dim_state());
        out.rows_mut(0, f.len()).copy_from(&f);
        out
    }

    fn diffusion(&self, t: f64, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (x, theta) = self.split(z);
        let sigma = self.base.diffusion(t, &x, u, &theta);
        let (nx, nw) = (self.base.dim_state(), self.base.dim_noise());
        let mut out = DMatrix::zeros(self.dim_state(), self.dim_noise());
        out.view_mut((0, 0), (nx, nw)).copy_from(&sigma);
        if self.param_noise_active() {
            for (i, &s) in self.param_diffusion.iter().enumerate() {
                out[(nx + i, nw + i)] = s;
            }
        }
        out
    }

    fn measure(&self, t: f64, z: &DVector<f64>) -> DVector<f64> {
        let (x, theta) = self.split(z);
        self.base.measure(t, &x, &theta)
    }

    fn drift_jacobian(&self, t: f64, z: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (x, theta) = self.split(z);
        let (nx, np) = (self.base.dim_state(), self.dim_param());
        let dx = self
            .base
            .drift_jacobian(t, &x, u, &theta)
            .unwrap_or_else(|| numerical_jacobian(|v| self.base.drift(t, v, u, &theta), &x, nx));
        let dtheta = self
            .base
            .drift_param_jacobian(t, &x, u, &theta)
            .unwrap_or_else(|| numerical_jacobian(|p| self.base.drift(t, &x, u, p), &theta, nx));
        let mut jac = DMatrix::zeros(nx + np, nx + np);
        jac.view_mut((0, 0), (nx, nx)).copy_from(&dx);
        jac.view_mut((0, nx), (nx, np)).copy_from(&dtheta);
        Some(jac)
    }

    fn measure_jacobian(&self, t: f64, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (x, theta) = self.split(z);
        let (nx, np, ny) = (self.base.dim_state(), self.dim_param(), self.dim_obs());
        let dx = self
            .base
            .measure_jacobian(t, &x, &theta)
            .unwrap_or_else(|| numerical_jacobian(|v| self.base.measure(t, v, &theta), &x, ny));
        let dtheta = self
            .base
            .measure_param_jacobian(t, &x, &theta)
            .unwrap_or_else(|| numerical_jacobian(|p| self.base.measure(t, &x, p), &theta, ny));
        let mut jac = DMatrix::zeros(ny, nx + np);
        jac.view_mut((0, 0), (ny, nx)).copy_from(&dx);
        jac.view_mut((0, nx), (ny, np)).copy_from(&dtheta);
        Some(jac)
    }

    fn constrain(&self, z: &mut DVector<f64>) {
        let nx = self.base.dim_state();
        let mut x = z.rows(0, nx).into_owned();
        self.base.constrain(&mut x);
        z.rows_mut(0, nx).copy_from(&x);
    }
}

/// What a noise stream is used for. Combined with a member index this selects
/// an independent ChaCha substream of the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Truth = 1,
    MeasurementNoise = 2,
    EnsembleInit = 3,
    EnsemblePropagation = 4,
    EnsemblePerturbation = 5,
    ParticleInit = 6,
    ParticlePropagation = 7,
    Resampling = 8,
    Scratch = 15,
}

/// Stream identifier for member `index` of a given purpose.
pub fn stream_id(purpose: StreamPurpose, index: u64) -> u64 {
    ((purpose as u64) << 48) | (index & ((1 << 48) - 1))
}

/// SplitMix64 finalizer, used to derive independent per-component seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible source of Gaussian and uniform variates identified by
/// `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn for_member(seed: u64, purpose: StreamPurpose, index: usize) -> Self {
        Self::new(seed, stream_id(purpose, index as u64))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn standard_normal_vec(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.standard_normal())
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// One Wiener increment `dω ~ N(0, I·dt)`.
    pub fn increment(&mut self, dim: usize, dt: f64) -> DVector<f64> {
        let scale = dt.sqrt();
        DVector::from_fn(dim, |_, _| scale * self.standard_normal())
    }

    /// `n` i.i.d. increments of dimension `dim`.
    pub fn draw_increments(&mut self, n: usize, dim: usize, dt: f64) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.increment(dim, dt)).collect()
    }

    /// A draw from `N(mean, L Lᵀ)` given the lower factor `L`.
    pub fn gaussian(&mut self, mean: &DVector<f64>, sqrt_cov: &DMatrix<f64>) -> DVector<f64> {
        let z = self.standard_normal_vec(sqrt_cov.ncols());
        mean + sqrt_cov * z
    }
}

/// Piecewise-constant input `u(t)`: `values[i]` holds on `[breakpoints[i], breakpoints[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputProfile {
    pub breakpoints: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl InputProfile {
    pub fn new(breakpoints: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, SdeError> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(SdeError::Dimension("input profile needs one value per breakpoint".into()));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SdeError::Dimension("input breakpoints must be increasing".into()));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn constant(u: DVector<f64>) -> Self {
        Self { breakpoints: vec![0.0], values: vec![u] }
    }

    /// No inputs at all.
    pub fn empty() -> Self {
        Self::constant(DVector::zeros(0))
    }

    pub fn at(&self, t: f64) -> &DVector<f64> {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        &self.values[idx.saturating_sub(1)]
    }
}

/// A sampled path with the input applied on each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// State at the sample closest to `t`.
    pub fn state_at(&self, t: f64) -> &DVector<f64> {
        let idx = self.times.partition_point(|&s| s < t);
        let prev_closer = idx > 0 && (idx == self.times.len() || t - self.times[idx - 1] < self.times[idx] - t);
        let idx = if prev_closer { idx - 1 } else { idx };
        &self.states[idx]
    }
}

/// One Euler–Maruyama step `x + f·dt + σ·dω`.
pub fn euler_maruyama_step<M: SdeModel + ?Sized>(
    model: &M,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>, SdeError> {
    let f = model.drift(t, x, u);
    let sigma = model.diffusion(t, x, u);
    if !is_finite_vec(&f) || !is_finite_mat(&sigma) {
        return Err(SdeError::IntegrationFailure { time: t, state: x.iter().copied().collect() });
    }
    let mut next = x + f * dt;
    next.gemv(1.0, &sigma, dw, 1.0);
    Ok(next)
}

/// Number of equal substeps of length at most `max_step` covering `[t0, t1]`.
pub fn substep_count(t0: f64, t1: f64, max_step: f64) -> usize {
    let ratio = (t1 - t0) / max_step;
    (ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0) as usize
}

/// Integrates one member over `[t0, t1]` with Euler–Maruyama substeps,
/// projecting onto the admissible set after every substep.
pub fn propagate<M: SdeModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    inputs: &InputProfile,
    t0: f64,
    t1: f64,
    max_step: f64,
    noise: &mut NoiseStream,
) -> Result<DVector<f64>, SdeError> {
    let n = substep_count(t0, t1, max_step);
    let dt = (t1 - t0) / n as f64;
    let nw = model.dim_noise();
    let mut state = x.clone();
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        let dw = noise.increment(nw, dt);
        state = euler_maruyama_step(model, t, &state, inputs.at(t), dt, &dw)?;
        model.constrain(&mut state);
    }
    if !is_finite_vec(&state) {
        return Err(SdeError::IntegrationFailure { time: t1, state: state.iter().copied().collect() });
    }
    Ok(state)
}

/// Simulates one path on the grid `t0, t0 + dt, …, t1`.
pub fn simulate_path<M: SdeModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    inputs: &InputProfile,
    t0: f64,
    t1: f64,
    dt: f64,
    noise: &mut NoiseStream,
) -> Result<Trajectory, SdeError> {
    if !(t1 > t0) || !(dt > 0.0) {
        return Err(SdeError::InvalidStep { t0, t1, dt });
    }
    let span = t1 - t0;
    let steps = (span / dt).round();
    if steps < 1.0 || (steps * dt - span).abs() > 1e-9 * span {
        return Err(SdeError::InvalidStep { t0, t1, dt });
    }
    let steps = steps as usize;
    if x0.len() != model.dim_state() {
        return Err(SdeError::Dimension(format!(
            "initial state has length {}, model expects {}",
            x0.len(),
            model.dim_state()
        )));
    }
    let nw = model.dim_noise();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut applied = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let u = inputs.at(t);
        times.push(t);
        states.push(x.clone());
        applied.push(u.clone());
        let dw = noise.increment(nw, dt);
        x = euler_maruyama_step(model, t, &x, u, dt, &dw)?;
        model.constrain(&mut x);
    }
    times.push(t1);
    states.push(x);
    applied.push(inputs.at(t1).clone());
    Ok(Trajectory { times, states, inputs: applied })
}
