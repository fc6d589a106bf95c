//! Continuous-discrete filters over any [`SdeModel`].
//!
//! Each filter alternates a time update, which carries the belief from one
//! measurement time to the next through the SDE, with a measurement update
//! at the measurement instant:
//!
//! * [`ekf`]: mean and covariance moment equations linearized about the mean,
//!   Joseph-form update.
//! * [`ukf`]: sigma points over the state augmented with the interval's
//!   Wiener increment, then a sigma-point measurement update.
//! * [`enkf`]: Monte-Carlo ensemble with perturbed observations.
//! * [`pf`]: bootstrap particle filter with log-space weights and
//!   systematic resampling.

pub mod ekf;
pub mod enkf;
pub mod pf;
pub mod summary;
pub mod ukf;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_finite_mat, is_finite_vec, min_eigenvalue};
use crate::sde::{InputProfile, NoiseStream, SdeError, SdeModel, StreamPurpose};

pub use ekf::{ekf_predict, kalman_update, Analysis};
pub use enkf::{enkf_predict, enkf_update, Ensemble, EnsembleAnalysis};
pub use pf::{effective_sample_size, pf_step, systematic_resample, ParticleSet, PfCovariance, PfStep, ResamplePolicy};
pub use summary::{ensemble_summary, weighted_summary};
pub use ukf::{ukf_predict, ukf_sigma_points, ukf_update, SigmaPointSet, UkfScaling};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("filter diverged at t = {time}")]
    Divergence { time: f64 },
    #[error("member {index} diverged at t = {time}")]
    MemberDivergence { index: usize, time: f64 },
    #[error("innovation covariance is numerically singular (condition {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("covariance could not be factored at t = {time}")]
    Factorization { time: f64 },
    #[error("all particle weights vanished at t = {time}")]
    DegenerateLikelihood { time: f64 },
    #[error("invalid filter input: {0}")]
    InvalidInput(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<FilterError>,
    },
}

impl FilterError {
    /// The underlying error with any step annotation stripped.
    pub fn root(&self) -> &FilterError {
        match self {
            FilterError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<SdeError> for FilterError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::IntegrationFailure { time, .. } => FilterError::Divergence { time },
            other => FilterError::InvalidInput(other.to_string()),
        }
    }
}

/// Mean and covariance of a Gaussian approximation at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub time: f64,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, time: f64) -> Self {
        Self { mean, cov, time }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        is_finite_vec(&self.mean) && is_finite_mat(&self.cov)
    }

    /// Marginal standard deviations (negative variances read as zero).
    pub fn std_devs(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Symmetric within `1e-10` relative and eigenvalues at least `−tol·tr(P)`.
    pub fn is_valid_covariance(&self, tol: f64) -> bool {
        let scale = self.cov.abs().max();
        if scale == 0.0 {
            return true;
        }
        let asym = (&self.cov - self.cov.transpose()).abs().max();
        asym <= 1e-10 * scale && min_eigenvalue(&self.cov) >= -tol * self.cov.trace().abs()
    }
}

/// The four filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ukf,
    Enkf,
    Pf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [FilterKind::Ekf, FilterKind::Ukf, FilterKind::Enkf, FilterKind::Pf];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Ekf => "ekf",
            FilterKind::Ukf => "ukf",
            FilterKind::Enkf => "enkf",
            FilterKind::Pf => "pf",
        }
    }

    fn seed_tag(self) -> u64 {
        match self {
            FilterKind::Ekf => 0xE4F,
            FilterKind::Ukf => 0x04F,
            FilterKind::Enkf => 0xE34F,
            FilterKind::Pf => 0x9F,
        }
    }

    /// Seed for this filter derived from an experiment seed.
    pub fn derive_seed(self, seed: u64) -> u64 {
        crate::sde::derive_seed(seed, self.seed_tag())
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ekf" => Ok(FilterKind::Ekf),
            "ukf" => Ok(FilterKind::Ukf),
            "enkf" => Ok(FilterKind::Enkf),
            "pf" => Ok(FilterKind::Pf),
            other => Err(format!("unknown filter '{other}' (expected ekf, ukf, enkf or pf)")),
        }
    }
}

/// Tuning shared by all filters; each filter reads the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSettings {
    /// Largest integrator substep, s.
    pub max_step: f64,
    pub ukf: UkfScaling,
    pub ensemble_size: usize,
    pub particles: usize,
    pub resample: ResamplePolicy,
    pub pf_covariance: PfCovariance,
    /// Seed of this filter's noise streams.
    pub seed: u64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            max_step: 1.0,
            ukf: UkfScaling::default(),
            ensemble_size: 1000,
            particles: 1000,
            resample: ResamplePolicy::EssThreshold,
            pf_covariance: PfCovariance::Weighted,
            seed: 0,
        }
    }
}

/// One discrete-time measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time: f64,
    pub value: DVector<f64>,
}

/// What happened at one assimilation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub prior: GaussianBelief,
    pub posterior: GaussianBelief,
    /// `y − ŷ` (ensemble-mean predicted observation for the Monte-Carlo filters).
    pub innovation: DVector<f64>,
    /// Innovation covariance `R_e` / `R_yy`; `R` plus the weighted spread for the PF.
    pub innovation_cov: DMatrix<f64>,
    /// Condition number of the innovation covariance.
    pub condition: f64,
    /// Effective sample size, PF only.
    pub ess: Option<f64>,
    pub resampled: bool,
    /// Wall-clock seconds spent on this predict/update pair.
    pub seconds: f64,
}

impl StepRecord {
    /// Normalized innovation squared `eᵀ R_e⁻¹ e`.
    pub fn nis(&self) -> f64 {
        match self.innovation_cov.clone().cholesky() {
            Some(chol) => {
                let z = chol.solve(&self.innovation);
                self.innovation.dot(&z)
            }
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub kind: FilterKind,
    /// The belief the filter started from (the sample summary for EnKF/PF).
    pub initial: GaussianBelief,
    pub records: Vec<StepRecord>,
}

impl FilterOutput {
    pub fn final_belief(&self) -> &GaussianBelief {
        self.records.last().map(|r| &r.posterior).unwrap_or(&self.initial)
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    /// Mean wall-clock time per assimilation step.
    pub fn mean_step_seconds(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_seconds() / self.records.len() as f64
        }
    }
}

/// Running state of one filter.
// One value per run, so the size gap between variants costs nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum FilterState {
    Ekf(GaussianBelief),
    Ukf(GaussianBelief),
    Enkf(enkf::EnkfState),
    Pf(pf::PfState),
}

impl FilterState {
    /// Initializes a filter from `N(init.mean, init.cov)`. The Monte-Carlo
    /// filters draw their members from per-member streams of `settings.seed`.
    pub fn new(kind: FilterKind, init: &GaussianBelief, settings: &FilterSettings) -> Result<Self, FilterError> {
        if !init.is_finite() || init.cov.nrows() != init.dim() || init.cov.ncols() != init.dim() {
            return Err(FilterError::InvalidInput("initial belief is malformed".into()));
        }
        Ok(match kind {
            FilterKind::Ekf => FilterState::Ekf(init.clone()),
            FilterKind::Ukf => {
                settings.ukf.validate()?;
                FilterState::Ukf(init.clone())
            }
            FilterKind::Enkf => FilterState::Enkf(enkf::EnkfState::new(init, settings.ensemble_size, settings.seed)?),
            FilterKind::Pf => FilterState::Pf(pf::PfState::new(init, settings.particles, settings.seed)?),
        })
    }

    pub fn kind(&self) -> FilterKind {
        match self {
            FilterState::Ekf(_) => FilterKind::Ekf,
            FilterState::Ukf(_) => FilterKind::Ukf,
            FilterState::Enkf(_) => FilterKind::Enkf,
            FilterState::Pf(_) => FilterKind::Pf,
        }
    }

    pub fn belief(&self, settings: &FilterSettings) -> GaussianBelief {
        match self {
            FilterState::Ekf(b) | FilterState::Ukf(b) => b.clone(),
            FilterState::Enkf(s) => s.ensemble.summary(),
            FilterState::Pf(s) => s.particles.summary(settings.pf_covariance),
        }
    }

    /// Predicts to `measurement.time` and assimilates it.
    pub fn step<M: SdeModel + ?Sized>(
        &mut self,
        model: &M,
        settings: &FilterSettings,
        inputs: &InputProfile,
        measurement: &Measurement,
        obs_cov: &DMatrix<f64>,
    ) -> Result<StepRecord, FilterError> {
        let clock = Stopwatch::start();
        let t1 = measurement.time;
        let y = &measurement.value;
        let mut record = match self {
            FilterState::Ekf(belief) => {
                let prior = ekf_predict(model, belief, inputs, t1, settings.max_step)?;
                let analysis = kalman_update(&prior, model, y, obs_cov)?;
                *belief = analysis.belief.clone();
                StepRecord {
                    time: t1,
                    prior,
                    posterior: analysis.belief,
                    innovation: analysis.innovation,
                    innovation_cov: analysis.innovation_cov,
                    condition: analysis.condition,
                    ess: None,
                    resampled: false,
                    seconds: 0.0,
                }
            }
            FilterState::Ukf(belief) => {
                let prior = ukf_predict(model, belief, inputs, t1, &settings.ukf, settings.max_step)?;
                let analysis = ukf_update(&prior, model, y, obs_cov, &settings.ukf)?;
                *belief = analysis.belief.clone();
                StepRecord {
                    time: t1,
                    prior,
                    posterior: analysis.belief,
                    innovation: analysis.innovation,
                    innovation_cov: analysis.innovation_cov,
                    condition: analysis.condition,
                    ess: None,
                    resampled: false,
                    seconds: 0.0,
                }
            }
            FilterState::Enkf(state) => {
                let predicted =
                    enkf_predict(model, &state.ensemble, inputs, t1, settings.max_step, &mut state.propagation)?;
                let prior = predicted.summary();
                let analysis = enkf_update(&predicted, model, y, obs_cov, &mut state.perturbation)?;
                state.ensemble = analysis.ensemble;
                StepRecord {
                    time: t1,
                    prior,
                    posterior: analysis.belief,
                    innovation: analysis.innovation,
                    innovation_cov: analysis.innovation_cov,
                    condition: analysis.condition,
                    ess: None,
                    resampled: false,
                    seconds: 0.0,
                }
            }
            FilterState::Pf(state) => {
                let out = pf_step(
                    model,
                    &state.particles,
                    inputs,
                    t1,
                    y,
                    obs_cov,
                    &mut state.propagation,
                    &mut state.resampling,
                    settings.resample,
                    settings.pf_covariance,
                    settings.max_step,
                )?;
                state.particles = out.particles;
                StepRecord {
                    time: t1,
                    prior: out.prior,
                    posterior: out.posterior,
                    innovation: out.innovation,
                    innovation_cov: out.innovation_cov,
                    condition: 1.0,
                    ess: Some(out.ess),
                    resampled: out.resampled,
                    seconds: 0.0,
                }
            }
        };
        if !record.posterior.is_finite() {
            return Err(FilterError::Divergence { time: t1 });
        }
        record.seconds = clock.elapsed();
        Ok(record)
    }
}

/// Runs one filter over a measurement sequence.
pub fn run_filter<M: SdeModel + ?Sized>(
    kind: FilterKind,
    model: &M,
    settings: &FilterSettings,
    init: &GaussianBelief,
    obs_cov: &DMatrix<f64>,
    measurements: &[Measurement],
    inputs: &InputProfile,
) -> Result<FilterOutput, FilterError> {
    let mut prev = init.time;
    for m in measurements {
        if !(m.time > prev) {
            return Err(FilterError::InvalidInput(format!(
                "measurement times must be strictly increasing after t0 = {} (got {} after {prev})",
                init.time, m.time
            )));
        }
        if m.value.len() != model.dim_obs() {
            return Err(FilterError::InvalidInput(format!(
                "measurement at t = {} has dimension {}, model observes {}",
                m.time,
                m.value.len(),
                model.dim_obs()
            )));
        }
        prev = m.time;
    }
    if init.dim() != model.dim_state() {
        return Err(FilterError::InvalidInput(format!(
            "initial belief has dimension {}, model state has {}",
            init.dim(),
            model.dim_state()
        )));
    }
    let mut state = FilterState::new(kind, init, settings)?;
    let initial = state.belief(settings);
    let mut records = Vec::with_capacity(measurements.len());
    for (step, m) in measurements.iter().enumerate() {
        let record = state
            .step(model, settings, inputs, m, obs_cov)
            .map_err(|e| FilterError::AtStep { step, source: Box::new(e) })?;
        records.push(record);
    }
    Ok(FilterOutput { kind, initial, records })
}

/// Draws `n` members from `N(belief.mean, belief.cov)`, member `i` from its
/// own `(seed, purpose, i)` stream.
pub(crate) fn draw_members(
    belief: &GaussianBelief,
    n: usize,
    seed: u64,
    purpose: StreamPurpose,
) -> Result<Vec<DVector<f64>>, FilterError> {
    let sqrt = crate::linalg::psd_sqrt(&belief.cov).ok_or(FilterError::Factorization { time: belief.time })?;
    Ok((0..n).map(|i| NoiseStream::for_member(seed, purpose, i).gaussian(&belief.mean, &sqrt)).collect())
}

/// Applies `f` to every member with its own stream, in parallel when enabled.
/// The reported error is the one of the lowest failing index.
pub(crate) fn for_each_member<T, F>(members: &mut [T], streams: &mut [NoiseStream], f: F) -> Result<(), FilterError>
where
    T: Send,
    F: Fn(usize, &mut T, &mut NoiseStream) -> Result<(), FilterError> + Sync + Send,
{
    assert_eq!(members.len(), streams.len());
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), FilterError>> = {
        use rayon::prelude::*;
        members.par_iter_mut().zip(streams.par_iter_mut()).enumerate().map(|(i, (m, s))| f(i, m, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), FilterError>> =
        members.iter_mut().zip(streams.iter_mut()).enumerate().map(|(i, (m, s))| f(i, m, s)).collect();
    results.into_iter().collect()
}

/// Wall-clock timer; reads zero where no monotonic clock exists (wasm32).
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn elapsed(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}
