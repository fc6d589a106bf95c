//! Versioned JSON description of a twin experiment.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cstr::{CstrParams, FlowProfile};
use crate::filters::{FilterKind, FilterSettings, GaussianBelief, PfCovariance, ResamplePolicy, UkfScaling};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config JSON: {0}")]
    Syntax(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Truth initial state. The true β is `reactor.beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthInit {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterInit {
    pub x0: Vec<f64>,
    pub beta0: f64,
    /// Diagonal of `P₀` over `(C_A, C_B, T, β)`.
    pub p0_diag: Vec<f64>,
}

/// Temperature grid of the steady-state curve. `None` bounds default to the
/// admissible branch `(T_in, T_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyStateGrid {
    pub t_min_k: Option<f64>,
    pub t_max_k: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub horizon_min: f64,
    pub n_samples: usize,
    /// Euler–Maruyama / RK4 substep, s.
    pub substep_s: f64,
    pub seed: u64,
    pub reactor: CstrParams,
    pub truth: TruthInit,
    pub filter_init: FilterInit,
    /// Measurement noise variance `R`, K².
    pub obs_var: f64,
    /// `σ_θ` of the β random walk.
    pub param_diffusion: f64,
    pub ukf: UkfScaling,
    pub ensemble_size: usize,
    pub particles: usize,
    pub oracle_particles: usize,
    pub resample: ResamplePolicy,
    pub pf_covariance: PfCovariance,
    pub filters: Vec<FilterKind>,
    pub sweep_sizes: Vec<usize>,
    pub flow_profile: FlowProfile,
    pub steady_state: SteadyStateGrid,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            horizon_min: 35.0,
            n_samples: 210,
            substep_s: 1.0,
            seed: 42,
            reactor: CstrParams::default(),
            truth: TruthInit { x0: vec![0.0, 0.0, 273.65] },
            filter_init: FilterInit {
                x0: vec![0.1, 0.2, 293.65],
                beta0: 123.7792,
                p0_diag: vec![0.1 * 0.1, 0.1 * 0.1, 20.0 * 20.0, 10.0 * 10.0],
            },
            obs_var: 9.0,
            param_diffusion: 0.0,
            ukf: UkfScaling::default(),
            ensemble_size: 1000,
            particles: 1000,
            oracle_particles: 10_000,
            resample: ResamplePolicy::EssThreshold,
            pf_covariance: PfCovariance::Weighted,
            filters: FilterKind::ALL.to_vec(),
            sweep_sizes: vec![3, 4, 10, 50, 100, 1000],
            flow_profile: FlowProfile::default(),
            steady_state: SteadyStateGrid { t_min_k: None, t_max_k: None, points: 400 },
            output_dir: "out".into(),
        }
    }
}

/// Objects merge key by key; any other value replaces the default outright.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Paths of every object key in `value` absent from `reference`. Arrays are
/// checked element-wise against the reference's first element.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    match (value, reference) {
        (Value::Object(map), Value::Object(known)) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match known.get(k) {
                    Some(r) => unknown_keys(v, r, &path, out),
                    None => out.push(path),
                }
            }
        }
        (Value::Array(items), Value::Array(known)) => {
            if let Some(r) = known.first() {
                for (i, v) in items.iter().enumerate() {
                    unknown_keys(v, r, &format!("{prefix}[{i}]"), out);
                }
            }
        }
        // Optional fields serialize as null and accept any shape.
        _ => {}
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let reference = serde_json::to_value(Self::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let mut merged = reference;
        overlay(&mut merged, value);
        let config: Self = serde_json::from_value(merged).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization with `output_dir` blanked,
    /// hex encoded. Identical experiments hash equal wherever they are written.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["output_dir"] = Value::String(String::new());
        let compact = serde_json::to_string(&v).expect("config serializes");
        Sha256::digest(compact.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if !(self.horizon_min > 0.0 && self.horizon_min.is_finite()) {
            bad.push("horizon_min must be positive".into());
        }
        if self.n_samples < 1 {
            bad.push("n_samples must be at least 1".into());
        }
        if !(self.substep_s > 0.0) {
            bad.push("substep_s must be positive".into());
        } else if self.n_samples >= 1 && self.horizon_min > 0.0 {
            let ratio = self.sample_interval_s() / self.substep_s;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                bad.push("substep_s must divide the sample interval".into());
            }
        }
        bad.extend(self.reactor.validate().into_iter().map(|m| format!("reactor: {m}")));
        bad.extend(self.flow_profile.validate());
        if self.truth.x0.len() != 3 {
            bad.push("truth.x0 must have 3 entries (C_A, C_B, T)".into());
        }
        if self.filter_init.x0.len() != 3 {
            bad.push("filter_init.x0 must have 3 entries (C_A, C_B, T)".into());
        }
        if self.filter_init.p0_diag.len() != 4 || self.filter_init.p0_diag.iter().any(|&v| !(v >= 0.0)) {
            bad.push("filter_init.p0_diag must have 4 nonnegative entries".into());
        }
        if !(self.obs_var > 0.0) {
            bad.push("obs_var must be positive".into());
        }
        if !(self.param_diffusion >= 0.0) {
            bad.push("param_diffusion must be nonnegative".into());
        }
        if let Err(e) = self.ukf.validate() {
            bad.push(format!("ukf: {e}"));
        }
        for (name, v) in [
            ("ensemble_size", self.ensemble_size),
            ("particles", self.particles),
            ("oracle_particles", self.oracle_particles),
        ] {
            if v < 2 {
                bad.push(format!("{name} must be at least 2"));
            }
        }
        if self.sweep_sizes.iter().any(|&n| n < 2) {
            bad.push("sweep_sizes entries must be at least 2".into());
        }
        if self.filters.is_empty() {
            bad.push("filters must name at least one filter".into());
        }
        if self.steady_state.points < 2 {
            bad.push("steady_state.points must be at least 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_min * 60.0
    }

    pub fn sample_interval_s(&self) -> f64 {
        self.horizon_s() / self.n_samples as f64
    }

    /// `t_k = k·Δt` for `k = 1..=n_samples`.
    pub fn sample_times(&self) -> Vec<f64> {
        let dt = self.sample_interval_s();
        (1..=self.n_samples).map(|k| k as f64 * dt).collect()
    }

    pub fn obs_cov(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.obs_var)
    }

    /// Initial augmented belief `N((x_e0; β_e0), P₀)` at `t = 0`.
    pub fn initial_belief(&self) -> GaussianBelief {
        let f = &self.filter_init;
        let mean = DVector::from_iterator(4, f.x0.iter().copied().chain([f.beta0]));
        GaussianBelief::new(mean, DMatrix::from_diagonal(&DVector::from_row_slice(&f.p0_diag)), 0.0)
    }

    /// Settings of filter `kind`, with its seed derived from the experiment seed.
    pub fn filter_settings(&self, kind: FilterKind) -> FilterSettings {
        FilterSettings {
            max_step: self.substep_s,
            ukf: self.ukf,
            ensemble_size: self.ensemble_size,
            particles: self.particles,
            resample: self.resample,
            pf_covariance: self.pf_covariance,
            seed: kind.derive_seed(self.seed),
        }
    }
}
