//! `cdassim`: twin-experiment driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdassim::config::ExperimentConfig;
use cdassim::cstr::{default_curve_range, simulate_reduced_models, steady_state_curve};
use cdassim::filters::FilterKind;
use cdassim::harness::{
    ensemble_size_sweep, generate_truth_and_measurements, run_all_filters, uncertainty_comparison, HarnessError,
    MetricsReport,
};
use cdassim::report::{self, write_config, write_file};
use cdassim::sde::{NoiseStream, StreamPurpose};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cdassim", version, about = "Continuous-discrete filtering of the stochastic CSTR twin experiment")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run on a single worker thread for uncontended timing.
    #[arg(long, global = true)]
    serial: bool,

    /// Comma-separated filter list, e.g. `ekf,pf`.
    #[arg(long, global = true, value_name = "CSV", value_delimiter = ',')]
    filters: Option<Vec<FilterKind>>,

    /// Print per-filter summaries to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the truth and its measurements.
    Simulate {
        /// Also compare the 3-, 2- and 1-state models.
        #[arg(long)]
        reduced: bool,
    },
    /// Run every configured filter and write per-filter metrics.
    Estimate,
    /// Emit the steady-state flow/temperature curve.
    SteadyState,
    /// Rerun the EnKF and PF across ensemble sizes.
    Sweep {
        /// Comma-separated sizes.
        #[arg(long, value_name = "CSV", value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Compare every filter with a large particle filter.
    Oracle,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.display().to_string();
    }
    if let Some(filters) = &cli.filters {
        config.filters = filters.clone();
    }
    if let Command::Sweep { sizes: Some(sizes) } = &cli.command {
        config.sweep_sizes = sizes.clone();
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn configure_threads(serial: bool) -> Result<(), Failure> {
    let threads =
        if serial {
            Some(1)
        } else {
            match std::env::var("CDASSIM_THREADS") {
                Ok(v) => {
                    Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                        Failure::Usage(format!("CDASSIM_THREADS must be a positive integer, got '{v}'"))
                    })?)
                }
                Err(_) => None,
            }
        };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn summarize(report: &MetricsReport) {
    eprintln!("{:<6} {:>12} {:>12} {:>12} {:>10}", "filter", "mse_x", "mse_p", "t_cpu_s", "beta");
    for run in &report.runs {
        match (&run.result, run.metrics) {
            (Ok(_), Some(m)) => eprintln!(
                "{:<6} {:>12.5} {:>12.5} {:>12.3e} {:>10.4}",
                run.kind.to_string(),
                m.mse_x,
                m.mse_p,
                m.t_cpu_s,
                m.final_beta
            ),
            (Err(e), _) => eprintln!("{:<6} failed: {e}", run.kind.to_string()),
            _ => {}
        }
    }
}

fn failed_filters(report: &MetricsReport) -> Option<String> {
    let failed: Vec<String> =
        report.runs.iter().filter_map(|r| r.result.as_ref().err().map(|e| format!("{}: {e}", r.kind))).collect();
    (!failed.is_empty()).then(|| failed.join("; "))
}

fn run(cli: &Cli, config: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { reduced } => {
            let data = generate_truth_and_measurements(config)?;
            write_file(&out.join("truth.csv"), &report::truth_csv(&data))?;
            if *reduced {
                let mut noise = NoiseStream::for_member(config.seed, StreamPurpose::Truth, 1);
                let cmp = simulate_reduced_models(
                    &config.reactor,
                    &config.flow_profile,
                    config.horizon_s(),
                    config.substep_s,
                    &mut noise,
                );
                write_file(&out.join("reduced.csv"), &report::reduced_csv(&cmp))?;
            }
        }
        Command::Estimate => {
            let data = generate_truth_and_measurements(config)?;
            let metrics = run_all_filters(config, &data)?;
            report::write_report(out, &metrics, &data)?;
            if cli.verbose > 0 {
                summarize(&metrics);
            }
            if let Some(msg) = failed_filters(&metrics) {
                return Err(Failure::Numerical(msg));
            }
        }
        Command::SteadyState => {
            let (lo, hi) = default_curve_range(&config.reactor);
            let grid = &config.steady_state;
            let curve = steady_state_curve(
                &config.reactor,
                grid.t_min_k.unwrap_or(lo),
                grid.t_max_k.unwrap_or(hi),
                grid.points,
            );
            write_file(&out.join("steady_state.csv"), &report::steady_state_csv(&curve))?;
        }
        Command::Sweep { .. } => {
            let data = generate_truth_and_measurements(config)?;
            let entries = ensemble_size_sweep(config, &data, &config.sweep_sizes, &config.filters)?;
            write_file(&out.join("sweep.csv"), &report::sweep_csv(&entries))?;
            if cli.verbose > 0 {
                for e in &entries {
                    eprintln!(
                        "{:<5} {:>6} collapsed={} mse_x={:?}",
                        e.run.kind.to_string(),
                        e.run.size.unwrap_or(0),
                        e.verdict.collapsed,
                        e.run.metrics.map(|m| m.mse_x)
                    );
                }
            }
        }
        Command::Oracle => {
            let data = generate_truth_and_measurements(config)?;
            let mut metrics = run_all_filters(config, &data)?;
            metrics.uncertainty = Some(uncertainty_comparison(config, &data, &metrics)?);
            report::write_report(out, &metrics, &data)?;
            if cli.verbose > 0 {
                summarize(&metrics);
                for c in &metrics.uncertainty.as_ref().unwrap().comparisons {
                    eprintln!(
                        "{:<6} T std within 3x of oracle at {:.1}% of steps",
                        c.kind.to_string(),
                        100.0 * c.temperature_std_within(3.0)
                    );
                }
            }
            if let Some(msg) = failed_filters(&metrics) {
                return Err(Failure::Numerical(msg));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = resolve_config(&cli).and_then(|config| {
        configure_threads(cli.serial)?;
        let out = PathBuf::from(&config.output_dir);
        // The echo is written before any computation so aborted runs keep it.
        write_config(&out, &config)?;
        run(&cli, &config, &out)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
