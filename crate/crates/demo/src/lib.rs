//! Browser bindings. Every export returns a JSON string; the page parses it.
//! The `*_data` functions hold the logic so they can be tested natively.

use cdassim::config::ExperimentConfig;
use cdassim::cstr::{default_curve_range, simulate_reduced_models, steady_state_curve};
use cdassim::filters::FilterKind;
use cdassim::harness::{generate_truth_and_measurements, run_all_filters};
use cdassim::sde::{NoiseStream, StreamPurpose};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub t_s: Vec<f64>,
    pub f_s: Vec<f64>,
}

pub fn steady_state_data(beta: f64, points: usize) -> Result<Curve, String> {
    if !(beta.is_finite() && beta >= 0.0) || points < 2 {
        return Err("beta must be finite and non-negative, points at least 2".into());
    }
    let mut params = ExperimentConfig::default().reactor;
    params.beta = beta;
    let (lo, hi) = default_curve_range(&params);
    let curve = steady_state_curve(&params, lo, hi, points);
    Ok(Curve { t_s: curve.iter().map(|p| p.t_s).collect(), f_s: curve.iter().map(|p| p.f_s).collect() })
}

#[derive(Debug, Serialize)]
pub struct Reduced {
    pub t: Vec<f64>,
    pub flow: Vec<f64>,
    pub t3: Vec<f64>,
    pub t2: Vec<f64>,
    pub t1: Vec<f64>,
}

pub fn reduced_data(sigma_t: f64, seed: u64) -> Result<Reduced, String> {
    let mut config = ExperimentConfig::default();
    config.reactor.sigma_t = sigma_t;
    config.validate().map_err(|e| e.to_string())?;
    let mut noise = NoiseStream::for_member(seed, StreamPurpose::Truth, 1);
    let r = simulate_reduced_models(
        &config.reactor,
        &config.flow_profile,
        config.horizon_s(),
        config.substep_s,
        &mut noise,
    );
    Ok(Reduced { t: r.times, flow: r.flow, t3: r.t3, t2: r.t2, t1: r.t1 })
}

#[derive(Debug, Serialize)]
pub struct FilterTrace {
    pub filter: String,
    pub error: Option<String>,
    pub est_t: Vec<f64>,
    pub std_t: Vec<f64>,
    pub est_beta: Vec<f64>,
    pub std_beta: Vec<f64>,
    pub mse_x: Option<f64>,
    pub mse_p: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Twin {
    pub t: Vec<f64>,
    pub truth_t: Vec<f64>,
    pub truth_beta: Vec<f64>,
    /// Null at t0, where nothing is measured.
    pub measurement: Vec<Option<f64>>,
    pub filters: Vec<FilterTrace>,
}

pub fn twin_data(seed: u64, filters: &str, ensemble: usize, obs_var: f64) -> Result<Twin, String> {
    let kinds = filters
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<FilterKind>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let config = ExperimentConfig {
        seed,
        filters: kinds,
        ensemble_size: ensemble,
        particles: ensemble,
        obs_var,
        ..Default::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    let data = generate_truth_and_measurements(&config).map_err(|e| e.to_string())?;
    let report = run_all_filters(&config, &data).map_err(|e| e.to_string())?;

    let filters = report
        .runs
        .iter()
        .map(|run| {
            let mut trace = FilterTrace {
                filter: run.kind.to_string(),
                error: run.result.as_ref().err().map(|e| e.to_string()),
                est_t: Vec::new(),
                std_t: Vec::new(),
                est_beta: Vec::new(),
                std_beta: Vec::new(),
                mse_x: run.metrics.map(|m| m.mse_x),
                mse_p: run.metrics.map(|m| m.mse_p),
            };
            if let Some(out) = run.output() {
                for b in std::iter::once(&out.initial).chain(out.records.iter().map(|r| &r.posterior)) {
                    let sd = b.std_devs();
                    trace.est_t.push(b.mean[2]);
                    trace.est_beta.push(b.mean[3]);
                    trace.std_t.push(sd[2]);
                    trace.std_beta.push(sd[3]);
                }
            }
            trace
        })
        .collect();

    Ok(Twin {
        t: data.sample_times.clone(),
        truth_t: data.truth_samples.iter().map(|x| x[2]).collect(),
        truth_beta: data.truth_samples.iter().map(|x| x[3]).collect(),
        measurement: std::iter::once(None).chain(data.measurements.iter().map(|m| Some(m.value[0]))).collect(),
        filters,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Steady-state flow against temperature for a given heat-transfer coefficient.
#[wasm_bindgen]
pub fn steady_state(beta: f64, points: usize) -> Result<String, JsError> {
    to_js(steady_state_data(beta, points))
}

/// Temperatures of the 3-, 2- and 1-state models under one noise path.
#[wasm_bindgen]
pub fn simulate_reduced(sigma_t: f64, seed: u64) -> Result<String, JsError> {
    to_js(reduced_data(sigma_t, seed))
}

/// Full twin experiment; `filters` is a comma list such as `"ekf,ukf,enkf,pf"`.
#[wasm_bindgen]
pub fn run_twin(seed: u64, filters: &str, ensemble: usize, obs_var: f64) -> Result<String, JsError> {
    to_js(twin_data(seed, filters, ensemble, obs_var))
}
