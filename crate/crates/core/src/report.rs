//! Plot-ready CSV and JSON output. Floats are written with 17 significant
//! digits so every value round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::cstr::{ReducedComparison, SteadyPoint};
use crate::filters::FilterOutput;
use crate::harness::{FilterMetrics, MetricsReport, SweepEntry, TwinData, UncertaintyReport};

pub const METRICS_HEADER: &str = "filter,mse_x,mse_p,t_cpu_s";

/// What the metrics mean; repeated in every metrics file.
pub const MSE_DEFINITION: &str = "mse_x: time average over assimilation steps of the squared posterior-mean error \
averaged over C_A, C_B and T in native units; mse_p: time average of the squared beta error; \
t_cpu_s: mean wall-clock seconds per assimilation step";

#[derive(Debug, thiserror::Error)]
#[error("cannot write {path}: {source}")]
pub struct ReportError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

/// `{:.16e}`, or `nan` / `inf` / `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}

fn json_f64(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(fmt_f64(x))
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| ReportError { path: parent.to_path_buf(), source })?;
        }
    }
    fs::write(path, contents).map_err(|source| ReportError { path: path.to_path_buf(), source })
}

/// `config.json` (re-loadable with `--config`) and `config.sha256`.
pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<(), ReportError> {
    write_file(&dir.join("config.json"), &(config.to_json_pretty() + "\n"))?;
    write_file(&dir.join("config.sha256"), &(config.hash() + "\n"))
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for run in &report.runs {
        let m = run.metrics.unwrap_or(FilterMetrics {
            mse_x: f64::NAN,
            mse_p: f64::NAN,
            t_cpu_s: f64::NAN,
            total_cpu_s: f64::NAN,
            final_beta: f64::NAN,
            tail_beta_error: f64::NAN,
        });
        let _ = writeln!(s, "{},{},{},{}", run.kind, fmt_f64(m.mse_x), fmt_f64(m.mse_p), fmt_f64(m.t_cpu_s));
    }
    s
}

pub fn metrics_json(report: &MetricsReport) -> Value {
    let filters: Vec<Value> = report
        .runs
        .iter()
        .map(|run| match (&run.result, run.metrics) {
            (Ok(_), Some(m)) => json!({
                "filter": run.kind,
                "size": run.size,
                "status": "ok",
                "mse_x": json_f64(m.mse_x),
                "mse_p": json_f64(m.mse_p),
                "t_cpu_s": json_f64(m.t_cpu_s),
                "total_cpu_s": json_f64(m.total_cpu_s),
                "final_beta": json_f64(m.final_beta),
                "tail_beta_abs_error": json_f64(m.tail_beta_error),
            }),
            (Err(e), _) => json!({ "filter": run.kind, "size": run.size, "status": "failed", "error": e.to_string() }),
            (Ok(_), None) => json!({ "filter": run.kind, "size": run.size, "status": "no-metrics" }),
        })
        .collect();
    let mut v = json!({
        "seed": report.seed,
        "config_hash": report.config_hash,
        "definitions": MSE_DEFINITION,
        "filters": filters,
    });
    if let Some(u) = &report.uncertainty {
        v["uncertainty"] = uncertainty_json(u);
    }
    v
}

fn uncertainty_json(u: &UncertaintyReport) -> Value {
    let filters: Vec<Value> = u
        .comparisons
        .iter()
        .map(|c| {
            let n = c.steps.len().max(1) as f64;
            json!({
                "filter": c.kind,
                "mean_error_avg": json_f64(c.steps.iter().map(|s| s.mean_error).sum::<f64>() / n),
                "cov_frobenius_avg": json_f64(c.steps.iter().map(|s| s.cov_frobenius).sum::<f64>() / n),
                "temperature_std_within_factor_3": json_f64(c.temperature_std_within(3.0)),
            })
        })
        .collect();
    json!({ "oracle_particles": u.oracle_particles, "filters": filters })
}

pub fn trajectory_csv(output: &FilterOutput, data: &TwinData) -> String {
    let mut s = String::from(
        "t,truth_ca,truth_cb,truth_t,truth_beta,est_ca,est_cb,est_t,est_beta,std_ca,std_cb,std_t,std_beta,measurement\n",
    );
    let beliefs = std::iter::once(&output.initial).chain(output.records.iter().map(|r| &r.posterior));
    for (k, b) in beliefs.enumerate() {
        let mut cols = vec![fmt_f64(data.sample_times[k])];
        cols.extend(data.truth_samples[k].iter().map(|&v| fmt_f64(v)));
        cols.extend(b.mean.iter().map(|&v| fmt_f64(v)));
        cols.extend(b.std_devs().iter().map(|&v| fmt_f64(v)));
        cols.push(if k == 0 { String::new() } else { fmt_f64(data.measurements[k - 1].value[0]) });
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

/// `metrics.{csv,json}` and one `trajectory_<filter>.csv` per successful run.
pub fn write_report(dir: &Path, report: &MetricsReport, data: &TwinData) -> Result<(), ReportError> {
    write_file(&dir.join("metrics.csv"), &metrics_csv(report))?;
    let json = serde_json::to_string_pretty(&metrics_json(report)).expect("metrics serialize");
    write_file(&dir.join("metrics.json"), &(json + "\n"))?;
    for run in &report.runs {
        if let Some(out) = run.output() {
            write_file(&dir.join(format!("trajectory_{}.csv", run.kind)), &trajectory_csv(out, data))?;
        }
    }
    if let Some(u) = &report.uncertainty {
        write_file(&dir.join("trajectory_oracle.csv"), &trajectory_csv(&u.oracle, data))?;
        write_file(&dir.join("uncertainty.csv"), &uncertainty_csv(u))?;
    }
    Ok(())
}

pub fn uncertainty_csv(u: &UncertaintyReport) -> String {
    let mut s =
        String::from("filter,t,mean_error,cov_frobenius,var_ratio_ca,var_ratio_cb,var_ratio_t,var_ratio_beta\n");
    for c in &u.comparisons {
        for step in &c.steps {
            let _ = write!(
                s,
                "{},{},{},{}",
                c.kind,
                fmt_f64(step.time),
                fmt_f64(step.mean_error),
                fmt_f64(step.cov_frobenius)
            );
            for r in step.variance_ratios {
                let _ = write!(s, ",{}", fmt_f64(r));
            }
            s.push('\n');
        }
    }
    s
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = String::from("filter,size,mse_x,mse_p,t_cpu_s,collapsed,max_window_nis,status\n");
    for e in entries {
        let (mx, mp, tc) =
            e.run.metrics.map(|m| (m.mse_x, m.mse_p, m.t_cpu_s)).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let status = match &e.run.result {
            Ok(_) => "ok".to_string(),
            Err(err) => format!("\"{}\"", err.to_string().replace('"', "'")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.run.kind,
            e.run.size.unwrap_or(0),
            fmt_f64(mx),
            fmt_f64(mp),
            fmt_f64(tc),
            e.verdict.collapsed,
            fmt_f64(e.verdict.max_window_nis),
            status
        );
    }
    s
}

/// Truth states, flow and measurement at every sample time.
pub fn truth_csv(data: &TwinData) -> String {
    let mut s = String::from("t,ca,cb,t_k,beta,flow,measurement\n");
    for (k, x) in data.truth_samples.iter().enumerate() {
        let mut cols = vec![fmt_f64(data.sample_times[k])];
        cols.extend(x.iter().map(|&v| fmt_f64(v)));
        cols.push(fmt_f64(data.flows[k]));
        cols.push(if k == 0 { String::new() } else { fmt_f64(data.measurements[k - 1].value[0]) });
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

pub fn reduced_csv(r: &ReducedComparison) -> String {
    let mut s = String::from("t,flow,t_3state,t_2state,t_1state\n");
    for i in 0..r.times.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(r.times[i]),
            fmt_f64(r.flow[i]),
            fmt_f64(r.t3[i]),
            fmt_f64(r.t2[i]),
            fmt_f64(r.t1[i])
        );
    }
    s
}

pub fn steady_state_csv(curve: &[SteadyPoint]) -> String {
    let mut s = String::from("T_s,F_s\n");
    for p in curve {
        let _ = writeln!(s, "{},{}", fmt_f64(p.t_s), fmt_f64(p.f_s));
    }
    s
}
