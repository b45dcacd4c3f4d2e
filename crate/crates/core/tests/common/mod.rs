#![allow(dead_code)]

use std::sync::Arc;

use fbsde_core::model::{
    AffineField, CoefficientSet, ControlRegion, PolynomialField, QuadraticGenerator, QuadraticTerminal, TimeGrid,
    VectorField,
};
use fbsde_core::{Problem, SingularControl, SingularControlPath};
use nalgebra::{DMatrix, DVector};

/// Scalar problem on `[0, 1]` with `U = [-1, 1]`.
pub struct Scalar {
    pub drift: Arc<dyn VectorField>,
    pub diffusion: Arc<dyn VectorField>,
    pub generator: QuadraticGenerator,
    pub terminal: QuadraticTerminal,
    pub g: f64,
    pub k: f64,
    pub x0: f64,
    pub steps: usize,
}

impl Default for Scalar {
    fn default() -> Self {
        Self {
            drift: affine(0.0, 0.0, 0.0),
            diffusion: affine(0.0, 0.0, 0.0),
            generator: QuadraticGenerator::zero(1, 1),
            terminal: QuadraticTerminal::linear(vec![0.0]),
            g: 1.0,
            k: 1.0,
            x0: 0.0,
            steps: 20,
        }
    }
}

impl Scalar {
    pub fn build(self) -> Problem {
        let c = CoefficientSet::new(
            1,
            1,
            self.drift,
            self.diffusion,
            Arc::new(self.generator),
            Arc::new(self.terminal),
            DMatrix::from_element(1, 1, self.g),
            DVector::from_element(1, self.k),
        )
        .unwrap();
        Problem::new(
            "test",
            c,
            ControlRegion::new(vec![-1.0], vec![1.0], 41).unwrap(),
            TimeGrid::new(0.0, 1.0, self.steps).unwrap(),
            vec![self.x0],
        )
        .unwrap()
    }
}

/// `a x + b u + c`.
pub fn affine(a: f64, b: f64, c: f64) -> Arc<dyn VectorField> {
    Arc::new(AffineField::scalar(a, b, c))
}

pub fn poly(terms: Vec<(u32, u32, f64)>) -> Arc<dyn VectorField> {
    Arc::new(PolynomialField::new(terms))
}

/// `c + g.w + w' M w / 2` over `w = (x, y, z, u)` from sparse entries.
pub fn generator(c: f64, grad: [f64; 4], hess: &[(usize, usize, f64)]) -> QuadraticGenerator {
    let mut m = DMatrix::zeros(4, 4);
    for &(i, j, v) in hess {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    QuadraticGenerator::new(c, DVector::from_row_slice(&grad), m).unwrap()
}

/// `c + g x + m x^2 / 2`.
pub fn terminal(c: f64, g: f64, m: f64) -> QuadraticTerminal {
    QuadraticTerminal::new(c, DVector::from_element(1, g), DMatrix::from_element(1, 1, m)).unwrap()
}

pub fn no_push(p: &Problem) -> SingularControl {
    SingularControl::Path(SingularControlPath::zero(p.grid.n_steps, p.coefficients.m))
}

pub fn max_abs(values: &[f64], target: f64) -> f64 {
    values.iter().fold(0.0f64, |a, v| a.max((v - target).abs()))
}
