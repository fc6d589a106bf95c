//! Reference models with closed-form behaviour.

use nalgebra::{DMatrix, DVector};

use crate::sde::SdeModel;

/// Linear time-invariant SDE `dx = A x dt + S dω`, observed as `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSde {
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSde {
    pub fn new(a: DMatrix<f64>, s: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(s.nrows(), a.nrows());
        assert_eq!(c.ncols(), a.nrows());
        Self { a, s, c }
    }

    /// Scalar Ornstein–Uhlenbeck form `dx = a x dt + s dω`, `y = c x`.
    pub fn scalar(a: f64, s: f64, c: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, s), DMatrix::from_element(1, 1, c))
    }
}

impl SdeModel for LinearSde {
    fn dim_state(&self) -> usize {
        self.a.nrows()
    }
    fn dim_noise(&self) -> usize {
        self.s.ncols()
    }
    fn dim_obs(&self) -> usize {
        self.c.nrows()
    }
    fn drift(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.s.clone()
    }
    fn measure(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
    fn drift_jacobian(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
    fn measure_jacobian(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.c.clone())
    }
}
