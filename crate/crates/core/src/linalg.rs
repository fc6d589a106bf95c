//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Condition number above which an innovation covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative jitter levels tried, in order, when a covariance refuses to factor.
const JITTER_LEVELS: [f64; 2] = [1e-10, 1e-6];

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn is_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Lower-triangular square root `L` with `L Lᵀ ≈ p`.
///
/// A matrix that fails to factor gets `δ·I` added with `δ = 1e-10·tr(p)/n`, then
/// `δ = 1e-6·tr(p)/n`, before giving up. An all-zero matrix has a zero root.
pub fn psd_sqrt(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if !is_finite_mat(p) {
        return None;
    }
    if p.iter().all(|&v| v == 0.0) {
        return Some(DMatrix::zeros(n, n));
    }
    if let Some(chol) = Cholesky::new(p.clone()) {
        return Some(chol.l());
    }
    let scale = p.trace() / n as f64;
    if scale <= 0.0 {
        return None;
    }
    for level in JITTER_LEVELS {
        let jittered = p + DMatrix::identity(n, n) * (level * scale);
        if let Some(chol) = Cholesky::new(jittered) {
            return Some(chol.l());
        }
    }
    None
}

/// Spectral condition number of a symmetric matrix; infinite when it is not
/// positive definite.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return if m[(0, 0)] > 0.0 { 1.0 } else { f64::INFINITY };
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive-definite matrix after a condition check.
pub fn spd_factor(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), f64> {
    let cond = spd_condition(m);
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    Cholesky::new(m.clone()).map(|c| (c, cond)).ok_or(cond)
}

/// Solves `K · S = B` for `K` with `S` symmetric positive definite, i.e. `K = B S⁻¹`.
pub fn right_solve(chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    chol.solve(&b.transpose()).transpose()
}

/// Central finite-difference Jacobian of `f` at `x`, step `1e-6·max(1, |xᵢ|)`.
pub fn numerical_jacobian<F>(f: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    let mut probe = x.clone();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        let col = (plus - minus) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}
