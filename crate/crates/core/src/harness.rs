//! Twin experiment: synthetic truth, the four filters, error metrics, the
//! comparison against a large particle filter and the ensemble-size sweep.

use nalgebra::DVector;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::cstr::{default_experiment_model, CstrError, CstrModel, ExperimentModel};
use crate::filters::{run_filter, FilterError, FilterKind, FilterOutput, FilterSettings, GaussianBelief, Measurement};
use crate::sde::{derive_seed, simulate_path, FixedParams, NoiseStream, SdeError, StreamPurpose, Trajectory};

/// Seed tag of the oracle particle filter.
const ORACLE_TAG: u64 = 0x0AC1E;

/// Steps per window of the innovation-consistency test.
pub const NIS_WINDOW: usize = 30;
/// Tail probability of the innovation-consistency test.
pub const NIS_ALPHA: f64 = 1e-3;
/// Length of the final segment over which the β error is averaged, s.
pub const TAIL_SECONDS: f64 = 300.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("truth simulation failed: {0}")]
    Simulation(#[from] SdeError),
    #[error("reactor setup failed: {0}")]
    Reactor(#[from] CstrError),
    #[error("{kind} failed: {source}")]
    Filter {
        kind: String,
        #[source]
        source: FilterError,
    },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

impl HarnessError {
    /// Numerical failures, as opposed to malformed experiments.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::Simulation(SdeError::IntegrationFailure { .. }) | HarnessError::Filter { .. })
    }
}

/// Truth path and the measurements drawn from it.
#[derive(Debug, Clone)]
pub struct TwinData {
    /// Physical states at every integrator substep.
    pub truth: Trajectory,
    /// `t₀ = 0` followed by the measurement times.
    pub sample_times: Vec<f64>,
    /// True `(C_A, C_B, T, β)` at `sample_times`.
    pub truth_samples: Vec<DVector<f64>>,
    pub measurements: Vec<Measurement>,
    pub flows: Vec<f64>,
}

pub fn experiment_model(config: &ExperimentConfig) -> Result<ExperimentModel, HarnessError> {
    Ok(default_experiment_model(&config.reactor, &config.flow_profile, config.obs_var, config.param_diffusion)?)
}

/// Simulates the true reactor at the substep resolution and measures its
/// temperature at every sample time with `N(0, R)` noise.
pub fn generate_truth_and_measurements(config: &ExperimentConfig) -> Result<TwinData, HarnessError> {
    if config.truth.x0.len() != 3 {
        return Err(HarnessError::Invalid("truth.x0 must have 3 entries".into()));
    }
    let beta = config.reactor.beta;
    let model = FixedParams::new(CstrModel::new(config.reactor.clone()), DVector::from_element(1, beta));
    let inputs = config.flow_profile.to_inputs()?;
    let x0 = DVector::from_column_slice(&config.truth.x0);
    let mut noise = NoiseStream::for_member(config.seed, StreamPurpose::Truth, 0);
    let truth = simulate_path(&model, &x0, &inputs, 0.0, config.horizon_s(), config.substep_s, &mut noise)?;

    let per_sample = (config.sample_interval_s() / config.substep_s).round() as usize;
    let mut meas_noise = NoiseStream::for_member(config.seed, StreamPurpose::MeasurementNoise, 0);
    let sd = config.obs_var.max(0.0).sqrt();
    let mut sample_times = Vec::with_capacity(config.n_samples + 1);
    let mut truth_samples = Vec::with_capacity(config.n_samples + 1);
    let mut flows = Vec::with_capacity(config.n_samples + 1);
    let mut measurements = Vec::with_capacity(config.n_samples);
    for k in 0..=config.n_samples {
        let idx = k * per_sample;
        let x = &truth.states[idx];
        let t = if k == 0 { 0.0 } else { k as f64 * config.sample_interval_s() };
        sample_times.push(t);
        truth_samples.push(DVector::from_column_slice(&[x[0], x[1], x[2], beta]));
        flows.push(config.flow_profile.flow_at(t));
        if k > 0 {
            let y = x[2] + sd * meas_noise.standard_normal();
            measurements.push(Measurement { time: t, value: DVector::from_element(1, y) });
        }
    }
    Ok(TwinData { truth, sample_times, truth_samples, measurements, flows })
}

/// Accuracy and cost of one filter run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterMetrics {
    /// Time average over assimilation steps of the squared error averaged over
    /// the three physical states, native units.
    pub mse_x: f64,
    /// Time average of the squared β error.
    pub mse_p: f64,
    /// Mean wall-clock seconds per assimilation step.
    pub t_cpu_s: f64,
    pub total_cpu_s: f64,
    pub final_beta: f64,
    /// Mean `|β̂ − β|` over the final [`TAIL_SECONDS`].
    pub tail_beta_error: f64,
}

/// Metrics of posterior means against the truth at the measurement times.
pub fn compute_metrics(output: &FilterOutput, data: &TwinData) -> FilterMetrics {
    let n = output.records.len();
    let horizon = data.sample_times.last().copied().unwrap_or(0.0);
    let (mut sx, mut sp, mut tail, mut tail_n) = (0.0, 0.0, 0.0, 0usize);
    for (k, rec) in output.records.iter().enumerate() {
        let truth = &data.truth_samples[k + 1];
        let e = &rec.posterior.mean - truth;
        sx += (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) / 3.0;
        sp += e[3] * e[3];
        if rec.time >= horizon - TAIL_SECONDS - 1e-9 {
            tail += e[3].abs();
            tail_n += 1;
        }
    }
    let denom = n.max(1) as f64;
    FilterMetrics {
        mse_x: sx / denom,
        mse_p: sp / denom,
        t_cpu_s: output.mean_step_seconds(),
        total_cpu_s: output.total_seconds(),
        final_beta: output.final_belief().mean[3],
        tail_beta_error: if tail_n > 0 { tail / tail_n as f64 } else { f64::NAN },
    }
}

/// One filter's run inside an experiment. Failures are kept, not propagated.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub kind: FilterKind,
    pub size: Option<usize>,
    pub result: Result<FilterOutput, FilterError>,
    pub metrics: Option<FilterMetrics>,
}

impl FilterRun {
    pub fn output(&self) -> Option<&FilterOutput> {
        self.result.as_ref().ok()
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub runs: Vec<FilterRun>,
    pub uncertainty: Option<UncertaintyReport>,
}

impl MetricsReport {
    pub fn run(&self, kind: FilterKind) -> Option<&FilterRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }

    pub fn metrics(&self, kind: FilterKind) -> Option<FilterMetrics> {
        self.run(kind).and_then(|r| r.metrics)
    }
}

fn member_count(kind: FilterKind, settings: &FilterSettings) -> Option<usize> {
    match kind {
        FilterKind::Enkf => Some(settings.ensemble_size),
        FilterKind::Pf => Some(settings.particles),
        _ => None,
    }
}

fn run_one(
    kind: FilterKind,
    settings: &FilterSettings,
    config: &ExperimentConfig,
    model: &ExperimentModel,
    data: &TwinData,
) -> FilterRun {
    let result = run_filter(
        kind,
        &model.model,
        settings,
        &config.initial_belief(),
        &model.obs_cov,
        &data.measurements,
        &model.inputs,
    );
    let metrics = result.as_ref().ok().map(|out| compute_metrics(out, data));
    FilterRun { kind, size: member_count(kind, settings), result, metrics }
}

/// Runs every filter listed in the config, one after another, from the same
/// initial belief. Each filter owns the streams of its own derived seed.
pub fn run_all_filters(config: &ExperimentConfig, data: &TwinData) -> Result<MetricsReport, HarnessError> {
    let model = experiment_model(config)?;
    let runs =
        config.filters.iter().map(|&kind| run_one(kind, &config.filter_settings(kind), config, &model, data)).collect();
    Ok(MetricsReport { seed: config.seed, config_hash: config.hash(), runs, uncertainty: None })
}

/// Discrepancy between a filter's posterior and the oracle's at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepComparison {
    pub time: f64,
    /// Euclidean norm of the mean difference.
    pub mean_error: f64,
    /// `‖P_filter − P_oracle‖_F`.
    pub cov_frobenius: f64,
    /// Filter over oracle marginal variance, per augmented coordinate.
    pub variance_ratios: [f64; 4],
}

impl StepComparison {
    pub fn temperature_std_ratio(&self) -> f64 {
        self.variance_ratios[2].sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterComparison {
    pub kind: FilterKind,
    pub steps: Vec<StepComparison>,
}

impl FilterComparison {
    /// Share of steps at which the temperature standard deviation is within
    /// a factor `factor` of the oracle's.
    pub fn temperature_std_within(&self, factor: f64) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let hits = self
            .steps
            .iter()
            .filter(|s| {
                let r = s.temperature_std_ratio();
                r.is_finite() && r >= 1.0 / factor && r <= factor
            })
            .count();
        hits as f64 / self.steps.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub oracle_particles: usize,
    pub oracle: FilterOutput,
    pub comparisons: Vec<FilterComparison>,
}

fn compare_beliefs(filter: &GaussianBelief, oracle: &GaussianBelief) -> StepComparison {
    let mut ratios = [f64::NAN; 4];
    for (i, r) in ratios.iter_mut().enumerate().take(filter.dim().min(4)) {
        *r = filter.cov[(i, i)] / oracle.cov[(i, i)];
    }
    StepComparison {
        time: filter.time,
        mean_error: (&filter.mean - &oracle.mean).norm(),
        cov_frobenius: (&filter.cov - &oracle.cov).norm(),
        variance_ratios: ratios,
    }
}

/// Step-by-step discrepancy of `filter` from `oracle` (matching records).
pub fn compare_to_oracle(kind: FilterKind, filter: &FilterOutput, oracle: &FilterOutput) -> FilterComparison {
    let steps =
        filter.records.iter().zip(&oracle.records).map(|(f, o)| compare_beliefs(&f.posterior, &o.posterior)).collect();
    FilterComparison { kind, steps }
}

/// Settings of the oracle particle filter.
pub fn oracle_settings(config: &ExperimentConfig) -> FilterSettings {
    let mut settings = config.filter_settings(FilterKind::Pf);
    settings.particles = config.oracle_particles;
    settings.seed = derive_seed(config.seed, ORACLE_TAG);
    settings
}

/// Runs the large particle filter and compares every successful run of `report` with it.
pub fn uncertainty_comparison(
    config: &ExperimentConfig,
    data: &TwinData,
    report: &MetricsReport,
) -> Result<UncertaintyReport, HarnessError> {
    let largest = config.ensemble_size.max(config.particles);
    if config.oracle_particles < 10 * largest {
        return Err(HarnessError::Invalid(format!(
            "oracle_particles ({}) must be at least 10x the largest filter size ({largest})",
            config.oracle_particles
        )));
    }
    let model = experiment_model(config)?;
    let oracle = run_filter(
        FilterKind::Pf,
        &model.model,
        &oracle_settings(config),
        &config.initial_belief(),
        &model.obs_cov,
        &data.measurements,
        &model.inputs,
    )
    .map_err(|source| HarnessError::Filter { kind: "oracle pf".into(), source })?;
    let comparisons =
        report.runs.iter().filter_map(|r| r.output().map(|out| compare_to_oracle(r.kind, out, &oracle))).collect();
    Ok(UncertaintyReport { oracle_particles: config.oracle_particles, oracle, comparisons })
}

/// Outcome of the windowed innovation-consistency test.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseVerdict {
    pub collapsed: bool,
    /// Largest mean NIS over the non-overlapping windows.
    pub max_window_nis: f64,
    /// Mean-NIS bound of the test.
    pub threshold: f64,
    pub reason: Option<String>,
}

/// Declares a run collapsed when it failed, or when the mean normalized
/// innovation squared over any window of [`NIS_WINDOW`] consecutive steps
/// exceeds the upper `1 − NIS_ALPHA` quantile of its χ² distribution: the
/// filter's own spread no longer accounts for the innovations it sees.
pub fn detect_collapse(result: &Result<FilterOutput, FilterError>) -> CollapseVerdict {
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            return CollapseVerdict {
                collapsed: true,
                max_window_nis: f64::INFINITY,
                threshold: f64::NAN,
                reason: Some(e.to_string()),
            }
        }
    };
    let ny = out.records.first().map(|r| r.innovation.len()).unwrap_or(1);
    let window = NIS_WINDOW.min(out.records.len().max(1));
    let dof = (window * ny) as f64;
    let threshold = ChiSquared::new(dof).expect("positive dof").inverse_cdf(1.0 - NIS_ALPHA) / window as f64;
    let nis: Vec<f64> = out.records.iter().map(|r| r.nis()).collect();
    let max_window_nis = nis
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .fold(0.0, f64::max);
    let collapsed = !(max_window_nis <= threshold);
    CollapseVerdict {
        collapsed,
        max_window_nis,
        threshold,
        reason: collapsed.then(|| format!("windowed mean NIS {max_window_nis:.3} exceeds {threshold:.3}")),
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub run: FilterRun,
    pub verdict: CollapseVerdict,
}

/// Reruns the EnKF and the PF for every size against the same truth and
/// measurements. Each filter keeps its derived seed across sizes.
pub fn ensemble_size_sweep(
    config: &ExperimentConfig,
    data: &TwinData,
    sizes: &[usize],
    kinds: &[FilterKind],
) -> Result<Vec<SweepEntry>, HarnessError> {
    if let Some(&bad) = sizes.iter().find(|&&n| n < 2) {
        return Err(HarnessError::Invalid(format!("sweep size {bad} is below 2")));
    }
    let model = experiment_model(config)?;
    let mut entries = Vec::new();
    for &kind in kinds.iter().filter(|k| matches!(k, FilterKind::Enkf | FilterKind::Pf)) {
        for &size in sizes {
            let mut settings = config.filter_settings(kind);
            settings.ensemble_size = size;
            settings.particles = size;
            let run = run_one(kind, &settings, config, &model, data);
            let verdict = detect_collapse(&run.result);
            entries.push(SweepEntry { run, verdict });
        }
    }
    Ok(entries)
}
