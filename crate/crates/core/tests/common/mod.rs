//! Property checks shared by the proptest suite and the acceptance run.
//! Each check returns `Err(reason)` on violation.
#![allow(dead_code)]

use cdassim::cstr::{
    cstr3_drift_with_beta, cstr3_jacobian_with_beta, default_curve_range, steady_state_flow, steady_state_residual,
    CstrParams, CstrState, SteadyPoint,
};
use cdassim::filters::{
    effective_sample_size, ekf_predict, kalman_update, pf_step, systematic_resample, ukf_predict, ukf_sigma_points,
    ukf_update, GaussianBelief, ParticleSet, PfCovariance, ResamplePolicy, UkfScaling,
};
use cdassim::linalg::{min_eigenvalue, numerical_jacobian};
use cdassim::models::LinearSde;
use cdassim::sde::{euler_maruyama_step, InputProfile, NoiseStream, SdeModel, StreamPurpose};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn default_params() -> CstrParams {
    cdassim::config::ExperimentConfig::default().reactor
}

// ---------------------------------------------------------------- strategies

/// Square matrix with entries in `[-1, 1]`.
pub fn square(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

pub fn matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-1.0..1.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

pub fn vector(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

/// `A Aᵀ` scaled by `scale`, plus a small ridge.
pub fn spd(n: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    square(n).prop_map(move |a| (&a * a.transpose() + DMatrix::identity(n, n) * 1e-3) * scale)
}

#[derive(Debug, Clone)]
pub struct UpdateCase {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub fn update_case() -> impl Strategy<Value = UpdateCase> {
    (1usize..=5, 1usize..=3, 0.01f64..100.0).prop_flat_map(|(n, ny, scale)| {
        (vector(n, -10.0, 10.0), spd(n, scale), matrix(ny, n), spd(ny, 1.0), vector(ny, -10.0, 10.0))
            .prop_map(|(mean, cov, c, r, y)| UpdateCase { mean, cov, c, r, y })
    })
}

#[derive(Debug, Clone)]
pub struct SigmaCase {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub scaling: UkfScaling,
    pub noise_dim: usize,
    pub dt: f64,
}

pub fn sigma_case() -> impl Strategy<Value = SigmaCase> {
    (1usize..=6, 0usize..=2, 0.01f64..1e3, 0.1f64..=1.0, 0.0f64..3.0, 0.0f64..2.0, 0.01f64..20.0).prop_flat_map(
        |(n, noise_dim, scale, alpha, beta, kappa, dt)| {
            (vector(n, -300.0, 300.0), spd(n, scale)).prop_map(move |(mean, cov)| SigmaCase {
                mean,
                cov,
                scaling: UkfScaling { alpha, beta, kappa },
                noise_dim,
                dt,
            })
        },
    )
}

#[derive(Debug, Clone)]
pub struct LinearCase {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
    pub dt: f64,
}

pub fn linear_case() -> impl Strategy<Value = LinearCase> {
    (1usize..=4, 1usize..=2, 0.1f64..2.0).prop_flat_map(|(n, ny, dt)| {
        (square(n), matrix(ny, n), vector(n, -5.0, 5.0), spd(n, 1.0), spd(ny, 1.0), vector(ny, -5.0, 5.0))
            .prop_map(move |(a, c, mean, cov, r, y)| LinearCase { a, c, mean, cov, r, y, dt })
    })
}

/// Positive weights, some exactly zero, normalized.
pub fn weights() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![1 => Just(0.0), 4 => 1e-6f64..1.0], 1..200).prop_filter_map(
        "all-zero weights",
        |w| {
            let s: f64 = w.iter().sum();
            (s > 0.0).then(|| w.iter().map(|x| x / s).collect())
        },
    )
}

/// A state inside the operating envelope and a flow rate.
pub fn reactor_point() -> impl Strategy<Value = (CstrState, f64, f64)> {
    (0.0f64..1.5, 0.0f64..1.5, 273.0f64..500.0, 0.001f64..0.02, 50.0f64..200.0)
        .prop_map(|(ca, cb, t, f, beta)| (CstrState { ca, cb, t }, f, beta))
}

/// A fraction in `(0, 1)` of the admissible steady-state temperature range.
pub fn steady_fraction() -> impl Strategy<Value = f64> {
    0.0f64..1.0
}

#[derive(Debug, Clone)]
pub struct ParticleCase {
    pub particles: Vec<DVector<f64>>,
    pub y: f64,
    pub r: f64,
}

pub fn particle_case() -> impl Strategy<Value = ParticleCase> {
    (proptest::collection::vec(-50.0f64..50.0, 2..300), -100.0f64..100.0, 1e-4f64..100.0).prop_map(|(xs, y, r)| {
        ParticleCase { particles: xs.into_iter().map(|x| DVector::from_element(1, x)).collect(), y, r }
    })
}

// ---------------------------------------------------------------- checks

fn static_model(n: usize, c: &DMatrix<f64>) -> LinearSde {
    LinearSde::new(DMatrix::zeros(n, n), DMatrix::zeros(n, 1), c.clone())
}

/// Joseph-form update is symmetric and numerically PSD.
pub fn check_joseph(case: &UpdateCase) -> Check {
    let n = case.mean.len();
    let model = static_model(n, &case.c);
    let prior = GaussianBelief::new(case.mean.clone(), case.cov.clone(), 0.0);
    let a = kalman_update(&prior, &model, &case.y, &case.r).map_err(|e| e.to_string())?;
    let p = &a.belief.cov;
    let scale = p.abs().max().max(f64::MIN_POSITIVE);
    let asym = (p - p.transpose()).abs().max();
    ensure(asym < 1e-10 * scale, || format!("asymmetry {asym:e} vs scale {scale:e}"))?;
    let lam = min_eigenvalue(p);
    ensure(lam >= -1e-8 * p.trace(), || format!("min eigenvalue {lam:e}, trace {:e}", p.trace()))?;
    let simple = &case.cov - &a.gain * &case.c * &case.cov;
    let gap = (p - &simple).abs().max();
    ensure(gap <= 1e-8 * case.cov.abs().max(), || format!("Joseph differs from (I - KC)P by {gap:e}"))
}

/// Generation followed by weighted reconstruction is the identity on (mean, cov).
pub fn check_sigma_reconstruction(case: &SigmaCase) -> Check {
    let belief = GaussianBelief::new(case.mean.clone(), case.cov.clone(), 0.0);
    let set = ukf_sigma_points(&belief, &case.scaling, case.noise_dim, case.dt).map_err(|e| e.to_string())?;
    let w: f64 = set.mean_weights.sum();
    ensure((w - 1.0).abs() < 1e-12, || format!("mean weights sum to {w}"))?;
    let (m, p) = set.state_moments();
    let mean_scale = case.mean.amax().max(case.cov.diagonal().map(f64::sqrt).max()).max(1.0);
    let dm = (&m - &case.mean).amax();
    ensure(dm <= 1e-9 * mean_scale, || format!("mean off by {dm:e}"))?;
    let dp = (&p - &case.cov).abs().max();
    ensure(dp <= 1e-9 * case.cov.abs().max(), || format!("covariance off by {dp:e}"))?;
    if case.noise_dim > 0 {
        let (nm, np) = set.noise_moments();
        let target = DMatrix::identity(case.noise_dim, case.noise_dim) * case.dt;
        let dn = (&np - &target).abs().max();
        ensure(nm.amax() <= 1e-9 * case.dt.sqrt() && dn <= 1e-9 * case.dt, || {
            format!("noise moments off: mean {:e}, cov {dn:e}", nm.amax())
        })?;
    }
    Ok(())
}

/// On linear models the unscented predict and update reproduce the EKF.
pub fn check_ut_linear(case: &LinearCase) -> Check {
    let n = case.mean.len();
    let model = LinearSde::new(case.a.clone(), DMatrix::zeros(n, 1), case.c.clone());
    let scaling = UkfScaling::default();
    let prior = GaussianBelief::new(case.mean.clone(), case.cov.clone(), 0.0);
    let inputs = InputProfile::empty();
    // Fine enough that the two RK4 discretizations agree far below 1e-8.
    let max_step = case.dt / 1000.0;
    let e = ekf_predict(&model, &prior, &inputs, case.dt, max_step).map_err(|e| e.to_string())?;
    let u = ukf_predict(&model, &prior, &inputs, case.dt, &scaling, max_step).map_err(|e| e.to_string())?;
    let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).abs().max() <= 1e-8 * a.abs().max().max(1.0);
    ensure(
        close(
            &DMatrix::from_column_slice(n, 1, e.mean.as_slice()),
            &DMatrix::from_column_slice(n, 1, u.mean.as_slice()),
        ),
        || format!("predicted means differ: {} vs {}", e.mean, u.mean),
    )?;
    ensure(close(&e.cov, &u.cov), || format!("predicted covariances differ: {} vs {}", e.cov, u.cov))?;
    let ke = kalman_update(&e, &model, &case.y, &case.r).map_err(|e| e.to_string())?;
    let ku = ukf_update(&e, &model, &case.y, &case.r, &scaling).map_err(|e| e.to_string())?;
    ensure((&ke.belief.mean - &ku.belief.mean).amax() <= 1e-8 * ke.belief.mean.amax().max(1.0), || {
        "updated means differ".into()
    })?;
    ensure(close(&ke.belief.cov, &ku.belief.cov), || "updated covariances differ".into())
}

/// Systematic resampling: in-range, sorted, and each count within one of `n·wᵢ`.
pub fn check_resampling(w: &[f64], u_frac: f64) -> Check {
    let n = w.len();
    let u0 = u_frac / n as f64;
    let idx = systematic_resample(w, u0);
    ensure(idx.len() == n, || format!("{} outputs for {n} inputs", idx.len()))?;
    ensure(idx.windows(2).all(|p| p[0] <= p[1]), || "indices not sorted".into())?;
    let mut counts = vec![0usize; n];
    for &i in &idx {
        ensure(i < n, || format!("index {i} out of range"))?;
        counts[i] += 1;
    }
    for (i, (&c, &wi)) in counts.iter().zip(w).enumerate() {
        let expected = n as f64 * wi;
        ensure((c as f64 - expected).abs() < 1.0 + 1e-9, || format!("particle {i}: {c} copies, expected {expected}"))?;
        ensure(wi > 0.0 || c == 0, || format!("zero-weight particle {i} selected"))?;
    }
    let uniform = vec![1.0 / n as f64; n];
    let same = systematic_resample(&uniform, u0);
    ensure(same == (0..n).collect::<Vec<_>>(), || "uniform weights are not the identity".into())
}

pub fn check_ess(w: &[f64]) -> Check {
    let ess = effective_sample_size(w);
    let n = w.len() as f64;
    ensure(ess >= 1.0 - 1e-9 && ess <= n * (1.0 + 1e-9), || format!("ESS {ess} outside [1, {n}]"))
}

/// One PF reweighting on a static model: weights normalized, ESS bounded.
pub fn check_pf_weights(case: &ParticleCase) -> Check {
    let model = LinearSde::scalar(0.0, 0.0, 1.0);
    let set = ParticleSet::uniform(case.particles.clone(), 0.0).map_err(|e| e.to_string())?;
    let mut streams: Vec<NoiseStream> =
        (0..set.len()).map(|i| NoiseStream::for_member(1, StreamPurpose::ParticlePropagation, i)).collect();
    let mut resampling = NoiseStream::for_member(1, StreamPurpose::Resampling, 0);
    let out = pf_step(
        &model,
        &set,
        &InputProfile::empty(),
        1.0,
        &DVector::from_element(1, case.y),
        &DMatrix::from_element(1, 1, case.r),
        &mut streams,
        &mut resampling,
        ResamplePolicy::Never,
        PfCovariance::Weighted,
        1.0,
    )
    .map_err(|e| e.to_string())?;
    let sum: f64 = out.particles.weights.iter().sum();
    ensure((sum - 1.0).abs() < 1e-12, || format!("weights sum to {sum}"))?;
    ensure(out.particles.weights.iter().all(|&w| w >= 0.0), || "negative weight".into())?;
    ensure(out.ess >= 1.0 - 1e-9 && out.ess <= set.len() as f64 * (1.0 + 1e-9), || format!("ESS {}", out.ess))
}

/// Reaction terms cancel in the stoichiometric and adiabatic combinations.
pub fn check_drift_identities(s: &CstrState, flow: f64, beta: f64) -> Check {
    let p = default_params();
    let f = cstr3_drift_with_beta(s, flow, beta, &p);
    let d = flow / p.volume;
    let ra = f[0] - d * (p.ca_in - s.ca);
    let rb = f[1] - d * (p.cb_in - s.cb);
    let rt = f[2] - d * (p.t_in - s.t);
    let scale = ra.abs().max(1.0);
    ensure((rb - 2.0 * ra).abs() <= 1e-10 * scale * 2.0, || format!("stoichiometric residual {:e}", rb - 2.0 * ra))?;
    ensure((rt + beta * ra).abs() <= 1e-10 * scale * beta, || format!("adiabatic residual {:e}", rt + beta * ra))
}

/// Analytic Jacobian of `(C_A, C_B, T; β)` against central differences.
pub fn check_jacobian(s: &CstrState, flow: f64, beta: f64) -> Check {
    let p = default_params();
    let x = DVector::from_vec(vec![s.ca, s.cb, s.t, beta]);
    let rates = |v: &DVector<f64>| {
        DVector::from_row_slice(&cstr3_drift_with_beta(&CstrState { ca: v[0], cb: v[1], t: v[2] }, flow, v[3], &p))
    };
    let fd = numerical_jacobian(rates, &x, 3);
    let mut analytic = DMatrix::zeros(3, 4);
    analytic.view_mut((0, 0), (3, 3)).copy_from(&cstr3_jacobian_with_beta(s, flow, beta, &p));
    let r = cdassim::cstr::rate_constant(s.t, &p) * s.ca * s.cb;
    analytic[(2, 3)] = r;
    for i in 0..3 {
        let row_scale = analytic.row(i).amax().max(1e-12);
        let err = (analytic.row(i) - fd.row(i)).amax();
        ensure(err <= 1e-5 * row_scale, || format!("row {i}: analytic {} vs fd {}", analytic.row(i), fd.row(i)))?;
    }
    Ok(())
}

/// The flow implied by a steady temperature zeroes the drift.
pub fn check_steady_residual(fraction: f64) -> Check {
    let p = default_params();
    let (lo, hi) = default_curve_range(&p);
    let t_s = lo + fraction * (hi - lo);
    let f_s = steady_state_flow(t_s, &p).map_err(|e| e.to_string())?;
    let res = steady_state_residual(&SteadyPoint { t_s, f_s }, &p);
    ensure(res < 1e-8, || format!("residual {res:e} at T_s = {t_s}"))
}

/// Every filter update is the identity when the measurement carries no state information.
pub fn check_gain_free(mean: &DVector<f64>, cov: &DMatrix<f64>, y: f64) -> Check {
    use cdassim::filters::{enkf_update, Ensemble};
    let n = mean.len();
    let c = DMatrix::zeros(1, n);
    let model = static_model(n, &c);
    let r = DMatrix::from_element(1, 1, 1.0);
    let yv = DVector::from_element(1, y);
    let prior = GaussianBelief::new(mean.clone(), cov.clone(), 0.0);
    let k = kalman_update(&prior, &model, &yv, &r).map_err(|e| e.to_string())?;
    ensure(k.belief.mean == prior.mean && (&k.belief.cov - cov).abs().max() == 0.0, || "EKF moved".into())?;
    let u = ukf_update(&prior, &model, &yv, &r, &UkfScaling::default()).map_err(|e| e.to_string())?;
    ensure(
        (&u.belief.mean - mean).amax() <= 1e-12 * mean.amax().max(1.0)
            && (&u.belief.cov - cov).abs().max() <= 1e-12 * cov.abs().max(),
        || "UKF moved".into(),
    )?;
    let members: Vec<DVector<f64>> = (0..8).map(|i| mean.add_scalar(i as f64 - 3.5)).collect();
    let ens = Ensemble::new(members.clone(), 0.0).map_err(|e| e.to_string())?;
    let mut streams: Vec<NoiseStream> =
        (0..8).map(|i| NoiseStream::for_member(2, StreamPurpose::EnsemblePerturbation, i)).collect();
    let a = enkf_update(&ens, &model, &yv, &r, &mut streams).map_err(|e| e.to_string())?;
    ensure(a.ensemble.members == members, || "EnKF members moved".into())?;
    let set = ParticleSet::uniform(members.clone(), 0.0).map_err(|e| e.to_string())?;
    let mut prop: Vec<NoiseStream> =
        (0..8).map(|i| NoiseStream::for_member(3, StreamPurpose::ParticlePropagation, i)).collect();
    let mut res = NoiseStream::for_member(3, StreamPurpose::Resampling, 0);
    let out = pf_step(
        &model,
        &set,
        &InputProfile::empty(),
        1.0,
        &yv,
        &r,
        &mut prop,
        &mut res,
        ResamplePolicy::EssThreshold,
        PfCovariance::Weighted,
        1.0,
    )
    .map_err(|e| e.to_string())?;
    ensure(out.particles.particles == members && !out.resampled, || "PF particles moved".into())?;
    ensure(out.particles.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15), || "PF weights moved".into())
}

// ---------------------------------------------------------------- GBM

/// `dx = μx dt + νx dω`.
pub struct Gbm {
    pub mu: f64,
    pub nu: f64,
}

impl SdeModel for Gbm {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn dim_obs(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        x * self.mu
    }
    fn diffusion(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.nu * x[0])
    }
    fn measure(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub const GBM_LEVELS: [u32; 5] = [4, 5, 6, 7, 8];

/// Mean `|X_EM(1) − X(1)|` at `dt = 2⁻ᵏ` with every level driven by the same
/// Brownian path sampled at `2⁻⁸`.
pub fn gbm_strong_errors(paths: usize, seed: u64) -> Vec<f64> {
    let model = Gbm { mu: 0.05, nu: 0.2 };
    let fine = 1usize << 8;
    let dt_fine = 1.0 / fine as f64;
    let u = DVector::zeros(0);
    let mut err = vec![0.0; GBM_LEVELS.len()];
    for p in 0..paths {
        let mut noise = NoiseStream::for_member(seed, StreamPurpose::Scratch, p);
        let dw: Vec<f64> = (0..fine).map(|_| noise.standard_normal() * dt_fine.sqrt()).collect();
        let w1: f64 = dw.iter().sum();
        let exact = ((model.mu - 0.5 * model.nu * model.nu) + model.nu * w1).exp();
        for (l, &k) in GBM_LEVELS.iter().enumerate() {
            let steps = 1usize << k;
            let stride = fine / steps;
            let dt = 1.0 / steps as f64;
            let mut x = DVector::from_element(1, 1.0);
            for s in 0..steps {
                let inc: f64 = dw[s * stride..(s + 1) * stride].iter().sum();
                x = euler_maruyama_step(&model, s as f64 * dt, &x, &u, dt, &DVector::from_element(1, inc)).unwrap();
            }
            err[l] += (x[0] - exact).abs();
        }
    }
    err.iter().map(|e| e / paths as f64).collect()
}

/// `|E[X_EM(1)] − e^μ|` with μ = 2, ν = 0.1, estimated from `paths` samples per level.
pub fn gbm_weak_errors(paths: usize, seed: u64) -> Vec<f64> {
    let model = Gbm { mu: 2.0, nu: 0.1 };
    let u = DVector::zeros(0);
    GBM_LEVELS
        .iter()
        .map(|&k| {
            let steps = 1usize << k;
            let dt = 1.0 / steps as f64;
            let mut sum = 0.0;
            for p in 0..paths {
                let mut noise = NoiseStream::for_member(seed ^ k as u64, StreamPurpose::Scratch, p);
                let mut x = DVector::from_element(1, 1.0);
                for s in 0..steps {
                    let dw = noise.increment(1, dt);
                    x = euler_maruyama_step(&model, s as f64 * dt, &x, &u, dt, &dw).unwrap();
                }
                sum += x[0];
            }
            (sum / paths as f64 - model.mu.exp()).abs()
        })
        .collect()
}

pub fn gbm_dts() -> Vec<f64> {
    GBM_LEVELS.iter().map(|&k| 1.0 / (1u64 << k) as f64).collect()
}
