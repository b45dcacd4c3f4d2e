//! Problem description: time grid, control region, coefficients and controls.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::paths::PathTensor;
use crate::rng::path_rng;

/// Uniform time grid on `[t0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t0) || n_steps == 0 || !t0.is_finite() || !t_end.is_finite() {
            return Err(FbsdeError::InvalidParameter(format!(
                "time grid needs t_end > t0 and n_steps >= 1 (got t0={t0}, t_end={t_end}, n_steps={n_steps})"
            )));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self { n_steps, ..*self }
    }

    /// Index of the grid time closest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt()).round();
        k.clamp(0.0, self.n_steps as f64) as usize
    }
}

/// Box control region with a resolution used wherever it is discretized.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRegion {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub resolution: usize,
}

impl ControlRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, resolution: usize) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(FbsdeError::Dimension("control bounds must have equal, positive length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(FbsdeError::InvalidParameter("control region needs lower <= upper".into()));
        }
        if resolution < 2 {
            return Err(FbsdeError::InvalidParameter("control resolution must be at least 2".into()));
        }
        Ok(Self { lower: DVector::from_vec(lower), upper: DVector::from_vec(upper), resolution })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter().enumerate().all(|(i, &v)| {
                let tol = 1e-12 * (1.0 + self.upper[i].abs().max(self.lower[i].abs()));
                v >= self.lower[i] - tol && v <= self.upper[i] + tol
            })
    }

    pub fn project(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| v.clamp(self.lower[i], self.upper[i])))
    }

    /// Tensor grid of controls in lexicographic order, smallest values first.
    pub fn discretize(&self) -> Vec<DVector<f64>> {
        let k = self.dim();
        let r = self.resolution;
        let axis = |i: usize, j: usize| {
            if self.upper[i] == self.lower[i] {
                self.lower[i]
            } else {
                self.lower[i] + (self.upper[i] - self.lower[i]) * j as f64 / (r - 1) as f64
            }
        };
        let total = r.pow(k as u32);
        (0..total)
            .map(|mut idx| {
                let mut u = DVector::zeros(k);
                for i in (0..k).rev() {
                    u[i] = axis(i, idx % r);
                    idx /= r;
                }
                u
            })
            .collect()
    }
}

/// A vector-valued coefficient `(t, x, u) -> R^n` with analytic derivatives.
///
/// Derivative shapes: `d_x` is n x n and `d_u` is n x k; the second-order
/// methods return one matrix per output component (n x n, n x k and k x k).
pub trait VectorField: Send + Sync {
    fn value(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn d_x(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn d_u(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn d_xx(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>>;
    fn d_xu(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>>;
    fn d_uu(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>>;

    /// All derivatives at once for n = k = 1, without allocating.
    fn scalar_jet(&self, t: f64, x: f64, u: f64) -> ScalarFieldJet {
        let (x, u) = ([x], [u]);
        ScalarFieldJet {
            value: self.value(t, &x, &u)[0],
            x: self.d_x(t, &x, &u)[(0, 0)],
            u: self.d_u(t, &x, &u)[(0, 0)],
            xx: self.d_xx(t, &x, &u)[0][(0, 0)],
            xu: self.d_xu(t, &x, &u)[0][(0, 0)],
            uu: self.d_uu(t, &x, &u)[0][(0, 0)],
        }
    }
}

/// Value and derivatives of a scalar coefficient at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarFieldJet {
    pub value: f64,
    pub x: f64,
    pub u: f64,
    pub xx: f64,
    pub xu: f64,
    pub uu: f64,
}

/// Generator value, gradient and Hessian in `(x, y, z, u)` for n = k = 1.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarGeneratorJet {
    pub value: f64,
    pub grad: [f64; 4],
    pub hess: [[f64; 4]; 4],
}

impl ScalarGeneratorJet {
    pub fn f_x(&self) -> f64 {
        self.grad[0]
    }
    pub fn f_y(&self) -> f64 {
        self.grad[1]
    }
    pub fn f_z(&self) -> f64 {
        self.grad[2]
    }
    pub fn f_u(&self) -> f64 {
        self.grad[3]
    }
    pub fn f_uu(&self) -> f64 {
        self.hess[3][3]
    }
    pub fn f_xu(&self) -> f64 {
        self.hess[0][3]
    }
    pub fn f_yu(&self) -> f64 {
        self.hess[1][3]
    }
    pub fn f_zu(&self) -> f64 {
        self.hess[2][3]
    }
    pub fn f_zz(&self) -> f64 {
        self.hess[2][2]
    }
}

/// The backward generator `f(t, x, y, z, u)` with gradient and Hessian in the
/// stacked variable `w = (x, y, z, u)`.
pub trait Generator: Send + Sync {
    fn value(&self, t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> DVector<f64>;
    fn hessian(&self, t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> DMatrix<f64>;

    /// Value, gradient and Hessian for n = k = 1, without allocating.
    fn scalar_jet(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> ScalarGeneratorJet {
        let (x, u) = ([x], [u]);
        let g = self.gradient(t, &x, y, z, &u);
        let h = self.hessian(t, &x, y, z, &u);
        ScalarGeneratorJet {
            value: self.value(t, &x, y, z, &u),
            grad: [g[0], g[1], g[2], g[3]],
            hess: std::array::from_fn(|i| std::array::from_fn(|j| h[(i, j)])),
        }
    }
}

/// Terminal cost `Phi(x)`.
pub trait Terminal: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Generator derivatives at one point, split by variable block.
#[derive(Debug, Clone)]
pub struct GeneratorJet {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    n: usize,
    k: usize,
}

impl GeneratorJet {
    pub fn at(f: &dyn Generator, n: usize, k: usize, t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> Self {
        Self { value: f.value(t, x, y, z, u), grad: f.gradient(t, x, y, z, u), hess: f.hessian(t, x, y, z, u), n, k }
    }
    pub fn f_x(&self) -> DVector<f64> {
        self.grad.rows(0, self.n).into_owned()
    }
    pub fn f_y(&self) -> f64 {
        self.grad[self.n]
    }
    pub fn f_z(&self) -> f64 {
        self.grad[self.n + 1]
    }
    pub fn f_u(&self) -> DVector<f64> {
        self.grad.rows(self.n + 2, self.k).into_owned()
    }
    pub fn f_uu(&self) -> DMatrix<f64> {
        self.hess.view((self.n + 2, self.n + 2), (self.k, self.k)).into_owned()
    }
    /// n x k block of mixed x-u derivatives.
    pub fn f_xu(&self) -> DMatrix<f64> {
        self.hess.view((0, self.n + 2), (self.n, self.k)).into_owned()
    }
    pub fn f_yu(&self) -> DVector<f64> {
        self.hess.view((self.n, self.n + 2), (1, self.k)).transpose().column(0).into_owned()
    }
    pub fn f_zu(&self) -> DVector<f64> {
        self.hess.view((self.n + 1, self.n + 2), (1, self.k)).transpose().column(0).into_owned()
    }
    pub fn f_zz(&self) -> f64 {
        self.hess[(self.n + 1, self.n + 1)]
    }
    /// Hessian restricted to `(x, y, z)`.
    pub fn hess_xyz(&self) -> DMatrix<f64> {
        self.hess.view((0, 0), (self.n + 2, self.n + 2)).into_owned()
    }
}

/// `b(t, x, u) = A x + B u + c`.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl AffineField {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = c.len();
        if a.shape() != (n, n) || b.nrows() != n {
            return Err(FbsdeError::Dimension("affine field needs A: n x n, B: n x k, c: n".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn scalar(a: f64, b: f64, c: f64) -> Self {
        Self { a: DMatrix::from_element(1, 1, a), b: DMatrix::from_element(1, 1, b), c: DVector::from_element(1, c) }
    }
}

impl VectorField for AffineField {
    fn value(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) + &self.b * DVector::from_column_slice(u) + &self.c
    }
    fn d_x(&self, _t: f64, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }
    fn d_u(&self, _t: f64, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.b.clone()
    }
    fn d_xx(&self, _t: f64, x: &[f64], _u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(x.len(), x.len()); self.c.len()]
    }
    fn d_xu(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(x.len(), u.len()); self.c.len()]
    }
    fn d_uu(&self, _t: f64, _x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(u.len(), u.len()); self.c.len()]
    }
    fn scalar_jet(&self, _t: f64, x: f64, u: f64) -> ScalarFieldJet {
        let (a, b) = (self.a[(0, 0)], self.b[(0, 0)]);
        ScalarFieldJet { value: a * x + b * u + self.c[0], x: a, u: b, ..Default::default() }
    }
}

/// Scalar polynomial `sum c x^i u^j` for one state and one control.
#[derive(Debug, Clone)]
pub struct PolynomialField {
    pub terms: Vec<(u32, u32, f64)>,
}

fn dpow(v: f64, p: u32, d: u32) -> f64 {
    if d > p {
        return 0.0;
    }
    let mut c = 1.0;
    for i in 0..d {
        c *= (p - i) as f64;
    }
    c * v.powi((p - d) as i32)
}

impl PolynomialField {
    pub fn new(terms: Vec<(u32, u32, f64)>) -> Self {
        Self { terms }
    }

    fn eval(&self, x: f64, u: f64, dx: u32, du: u32) -> f64 {
        self.terms.iter().map(|&(i, j, c)| c * dpow(x, i, dx) * dpow(u, j, du)).sum()
    }
}

impl VectorField for PolynomialField {
    fn value(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.eval(x[0], u[0], 0, 0))
    }
    fn d_x(&self, _t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.eval(x[0], u[0], 1, 0))
    }
    fn d_u(&self, _t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.eval(x[0], u[0], 0, 1))
    }
    fn d_xx(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_element(1, 1, self.eval(x[0], u[0], 2, 0))]
    }
    fn d_xu(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_element(1, 1, self.eval(x[0], u[0], 1, 1))]
    }
    fn d_uu(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_element(1, 1, self.eval(x[0], u[0], 0, 2))]
    }
    fn scalar_jet(&self, _t: f64, x: f64, u: f64) -> ScalarFieldJet {
        ScalarFieldJet {
            value: self.eval(x, u, 0, 0),
            x: self.eval(x, u, 1, 0),
            u: self.eval(x, u, 0, 1),
            xx: self.eval(x, u, 2, 0),
            xu: self.eval(x, u, 1, 1),
            uu: self.eval(x, u, 0, 2),
        }
    }
}

/// Scalar coefficient whose derivatives are supplied as separate polynomials
/// rather than derived from the value; [`validate_coefficients`] checks that
/// they agree.
#[derive(Debug, Clone)]
pub struct ExplicitField {
    pub value: PolynomialField,
    pub d_x: PolynomialField,
    pub d_u: PolynomialField,
    pub d_xx: PolynomialField,
    pub d_xu: PolynomialField,
    pub d_uu: PolynomialField,
}

fn poly1(p: &PolynomialField, x: &[f64], u: &[f64]) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, p.eval(x[0], u[0], 0, 0))
}

impl VectorField for ExplicitField {
    fn value(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.value.eval(x[0], u[0], 0, 0))
    }
    fn d_x(&self, _t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        poly1(&self.d_x, x, u)
    }
    fn d_u(&self, _t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        poly1(&self.d_u, x, u)
    }
    fn d_xx(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![poly1(&self.d_xx, x, u)]
    }
    fn d_xu(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![poly1(&self.d_xu, x, u)]
    }
    fn d_uu(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![poly1(&self.d_uu, x, u)]
    }
}

/// `f = c + g.w + w' M w / 2` in the stacked variable `w = (x, y, z, u)`.
#[derive(Debug, Clone)]
pub struct QuadraticGenerator {
    pub c: f64,
    pub g: DVector<f64>,
    pub m: DMatrix<f64>,
}

fn stack(x: &[f64], y: f64, z: f64, u: &[f64]) -> DVector<f64> {
    let mut w = Vec::with_capacity(x.len() + 2 + u.len());
    w.extend_from_slice(x);
    w.push(y);
    w.push(z);
    w.extend_from_slice(u);
    DVector::from_vec(w)
}

impl QuadraticGenerator {
    pub fn new(c: f64, g: DVector<f64>, m: DMatrix<f64>) -> Result<Self> {
        let d = g.len();
        if m.shape() != (d, d) {
            return Err(FbsdeError::Dimension("quadratic generator needs M square of size n+2+k".into()));
        }
        let m = (&m + m.transpose()) * 0.5;
        Ok(Self { c, g, m })
    }

    pub fn zero(n: usize, k: usize) -> Self {
        let d = n + 2 + k;
        Self { c: 0.0, g: DVector::zeros(d), m: DMatrix::zeros(d, d) }
    }

    /// Index of `y`, `z` and the first control in the stacked variable.
    pub fn y_index(n: usize) -> usize {
        n
    }
    pub fn z_index(n: usize) -> usize {
        n + 1
    }
    pub fn u_index(n: usize) -> usize {
        n + 2
    }
}

impl Generator for QuadraticGenerator {
    fn value(&self, _t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> f64 {
        let w = stack(x, y, z, u);
        self.c + self.g.dot(&w) + 0.5 * w.dot(&(&self.m * &w))
    }
    fn gradient(&self, _t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> DVector<f64> {
        let w = stack(x, y, z, u);
        &self.g + &self.m * w
    }
    fn hessian(&self, _t: f64, _x: &[f64], _y: f64, _z: f64, _u: &[f64]) -> DMatrix<f64> {
        self.m.clone()
    }
    fn scalar_jet(&self, _t: f64, x: f64, y: f64, z: f64, u: f64) -> ScalarGeneratorJet {
        let w = [x, y, z, u];
        let hess: [[f64; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| self.m[(i, j)]));
        let grad: [f64; 4] = std::array::from_fn(|i| self.g[i] + (0..4).map(|j| hess[i][j] * w[j]).sum::<f64>());
        let value = self.c + (0..4).map(|i| (self.g[i] + 0.5 * (0..4).map(|j| hess[i][j] * w[j]).sum::<f64>()) * w[i]).sum::<f64>();
        ScalarGeneratorJet { value, grad, hess }
    }
}

/// `Phi(x) = c + g.x + x' M x / 2`.
#[derive(Debug, Clone)]
pub struct QuadraticTerminal {
    pub c: f64,
    pub g: DVector<f64>,
    pub m: DMatrix<f64>,
}

impl QuadraticTerminal {
    pub fn new(c: f64, g: DVector<f64>, m: DMatrix<f64>) -> Result<Self> {
        let n = g.len();
        if m.shape() != (n, n) {
            return Err(FbsdeError::Dimension("quadratic terminal needs M: n x n".into()));
        }
        let m = (&m + m.transpose()) * 0.5;
        Ok(Self { c, g, m })
    }

    pub fn linear(g: Vec<f64>) -> Self {
        let n = g.len();
        Self { c: 0.0, g: DVector::from_vec(g), m: DMatrix::zeros(n, n) }
    }
}

impl Terminal for QuadraticTerminal {
    fn value(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        self.c + self.g.dot(&x) + 0.5 * x.dot(&(&self.m * &x))
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        &self.g + &self.m * DVector::from_column_slice(x)
    }
    fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.m.clone()
    }
}

/// Drift, diffusion, generator, terminal cost and the singular-control data
/// `G` (n x m) and `K` (m, strictly positive).
#[derive(Clone)]
pub struct CoefficientSet {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub drift: Arc<dyn VectorField>,
    pub diffusion: Arc<dyn VectorField>,
    pub generator: Arc<dyn Generator>,
    pub terminal: Arc<dyn Terminal>,
    pub g: DMatrix<f64>,
    pub cost: DVector<f64>,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("n", &self.n)
            .field("k", &self.k)
            .field("m", &self.m)
            .field("g", &self.g)
            .field("cost", &self.cost)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new(
        n: usize,
        k: usize,
        drift: Arc<dyn VectorField>,
        diffusion: Arc<dyn VectorField>,
        generator: Arc<dyn Generator>,
        terminal: Arc<dyn Terminal>,
        g: DMatrix<f64>,
        cost: DVector<f64>,
    ) -> Result<Self> {
        let m = cost.len();
        if n == 0 || k == 0 || m == 0 {
            return Err(FbsdeError::Dimension("n, k and m must be positive".into()));
        }
        if g.shape() != (n, m) {
            return Err(FbsdeError::Dimension(format!("G must be {n} x {m}, got {:?}", g.shape())));
        }
        if let Some(c) = cost.iter().find(|c| !(**c > 0.0)) {
            return Err(FbsdeError::InvalidParameter(format!("singular cost K must be positive, got {c}")));
        }
        let x = vec![0.0; n];
        let u = vec![0.0; k];
        for (name, fld) in [("drift", &drift), ("diffusion", &diffusion)] {
            if fld.value(0.0, &x, &u).len() != n || fld.d_u(0.0, &x, &u).shape() != (n, k) {
                return Err(FbsdeError::Dimension(format!("{name} has the wrong output shape")));
            }
        }
        if generator.gradient(0.0, &x, 0.0, 0.0, &u).len() != n + 2 + k {
            return Err(FbsdeError::Dimension("generator gradient must have length n+2+k".into()));
        }
        if terminal.gradient(&x).len() != n {
            return Err(FbsdeError::Dimension("terminal gradient must have length n".into()));
        }
        Ok(Self { n, k, m, drift, diffusion, generator, terminal, g, cost })
    }

    pub fn jet(&self, t: f64, x: &[f64], y: f64, z: f64, u: &[f64]) -> GeneratorJet {
        GeneratorJet::at(self.generator.as_ref(), self.n, self.k, t, x, y, z, u)
    }

    /// One state and one control: the hot loops use the scalar jets.
    pub fn is_scalar(&self) -> bool {
        self.n == 1 && self.k == 1
    }
}

/// Feedback map `(t, x) -> value`.
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>;

/// Regular control: constant, open-loop per step (shared or per path), or feedback.
#[derive(Clone)]
pub enum RegularControl {
    Constant(DVector<f64>),
    /// `n_steps` slots; one path (shared by all) or one per simulated path.
    OpenLoop(PathTensor),
    Feedback(FeedbackFn),
    /// `base + scale * direction`.
    Shifted { base: Box<RegularControl>, direction: Box<RegularControl>, scale: f64 },
}

impl RegularControl {
    pub fn constant(u: Vec<f64>) -> Self {
        Self::Constant(DVector::from_vec(u))
    }

    pub fn shifted(base: &RegularControl, direction: &RegularControl, scale: f64) -> Self {
        Self::Shifted { base: Box::new(base.clone()), direction: Box::new(direction.clone()), scale }
    }

    pub fn value(&self, k: usize, path: usize, t: f64, x: &[f64]) -> DVector<f64> {
        match self {
            Self::Constant(u) => u.clone(),
            Self::OpenLoop(tensor) => {
                let p = if tensor.paths() == 1 { 0 } else { path };
                DVector::from_column_slice(tensor.get(k, p))
            }
            Self::Feedback(f) => f(t, x),
            Self::Shifted { base, direction, scale } => {
                base.value(k, path, t, x) + direction.value(k, path, t, x) * *scale
            }
        }
    }
}

/// Increments `dxi[k]` of a nondecreasing singular control on the grid. A mass
/// `dxi[k]` acts at `t_k`: it moves the state between indices k and k+1.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularControlPath {
    increments: PathTensor,
}

impl SingularControlPath {
    pub fn zero(n_steps: usize, m: usize) -> Self {
        Self { increments: PathTensor::zeros(n_steps, 1, m) }
    }

    /// Path shared by every simulated path.
    pub fn deterministic(increments: Vec<Vec<f64>>) -> Result<Self> {
        let m = increments.first().map(|v| v.len()).unwrap_or(0);
        let slots = increments.len();
        let flat: Vec<f64> = increments.into_iter().flatten().collect();
        Self::from_tensor(PathTensor::from_path_major(slots, m, &[flat]))
    }

    /// Single atom of size `mass` (column `column`) at step `step`.
    pub fn atom(n_steps: usize, m: usize, step: usize, column: usize, mass: f64) -> Result<Self> {
        let mut inc = vec![vec![0.0; m]; n_steps];
        inc[step][column] = mass;
        Self::deterministic(inc)
    }

    pub fn from_tensor(increments: PathTensor) -> Result<Self> {
        for k in 0..increments.slots() {
            for p in 0..increments.paths() {
                for (c, &v) in increments.get(k, p).iter().enumerate() {
                    if !(v >= 0.0) {
                        return Err(FbsdeError::NegativeIncrement { step: k, path: p, column: c, value: v });
                    }
                }
            }
        }
        Ok(Self { increments })
    }

    pub fn n_steps(&self) -> usize {
        self.increments.slots()
    }

    pub fn m(&self) -> usize {
        self.increments.dim()
    }

    pub fn increment(&self, k: usize, path: usize) -> &[f64] {
        let p = if self.increments.paths() == 1 { 0 } else { path };
        self.increments.get(k, p)
    }

    pub fn tensor(&self) -> &PathTensor {
        &self.increments
    }

    /// Cumulative value `xi[k] = sum_{j<k} dxi[j]` on one path (`n_steps + 1` entries).
    pub fn cumulative(&self, path: usize) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.m()];
        let mut out = vec![acc.clone()];
        for k in 0..self.n_steps() {
            for (a, d) in acc.iter_mut().zip(self.increment(k, path)) {
                *a += d;
            }
            out.push(acc.clone());
        }
        out
    }
}

/// Singular control: a prescribed path or a state feedback returning the
/// increment to apply at the current state.
#[derive(Clone)]
pub enum SingularControl {
    Path(SingularControlPath),
    Feedback(FeedbackFn),
}

impl From<SingularControlPath> for SingularControl {
    fn from(p: SingularControlPath) -> Self {
        Self::Path(p)
    }
}

/// Kind of a grid increment of a singular control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementKind {
    Diffuse,
    Jump,
}

/// Labels step k a jump iff `|dxi[k]| > threshold` (Euclidean norm over the
/// m columns, first path). A natural threshold is a multiple of `dt`:
/// absolutely continuous parts move `O(dt)` per step.
pub fn classify_increments(path: &SingularControlPath, threshold: f64) -> Result<Vec<IncrementKind>> {
    if !(threshold >= 0.0) {
        return Err(FbsdeError::InvalidParameter(format!("jump threshold must be nonnegative, got {threshold}")));
    }
    Ok((0..path.n_steps())
        .map(|k| {
            let size = path.increment(k, 0).iter().map(|v| v * v).sum::<f64>().sqrt();
            if size > threshold {
                IncrementKind::Jump
            } else {
                IncrementKind::Diffuse
            }
        })
        .collect())
}

/// A complete control problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub name: String,
    pub coefficients: CoefficientSet,
    pub region: ControlRegion,
    pub grid: TimeGrid,
    pub x0: DVector<f64>,
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        coefficients: CoefficientSet,
        region: ControlRegion,
        grid: TimeGrid,
        x0: Vec<f64>,
    ) -> Result<Self> {
        if x0.len() != coefficients.n {
            return Err(FbsdeError::Dimension("x0 must have length n".into()));
        }
        if region.dim() != coefficients.k {
            return Err(FbsdeError::Dimension("control region dimension must equal k".into()));
        }
        Ok(Self { name: name.into(), coefficients, region, grid, x0: DVector::from_vec(x0) })
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self { grid: self.grid.with_steps(n_steps), ..self.clone() }
    }

    pub fn with_horizon(&self, t_end: f64) -> Self {
        Self { grid: TimeGrid { t_end, ..self.grid }, ..self.clone() }
    }
}

/// The one-dimensional quadratic benchmark: `dx = u dt + u dW`,
/// `-dy = u^2 dt - z dW`, `y(T) = x(T)^2 / 2`, `U = [-1, 1]`, `x(0) = 0`,
/// with an inactive singular part (`G = 0`, `K = 1`). The control `u = 0` is
/// optimal with cost 0.
pub fn worked_example() -> Problem {
    let n = 1;
    let k = 1;
    let mut m = DMatrix::zeros(4, 4);
    m[(3, 3)] = 2.0;
    let coefficients = CoefficientSet::new(
        n,
        k,
        Arc::new(AffineField::scalar(0.0, 1.0, 0.0)),
        Arc::new(AffineField::scalar(0.0, 1.0, 0.0)),
        Arc::new(QuadraticGenerator::new(0.0, DVector::zeros(4), m).expect("shape")),
        Arc::new(QuadraticTerminal::new(0.0, DVector::zeros(1), DMatrix::identity(1, 1)).expect("shape")),
        DMatrix::zeros(1, 1),
        DVector::from_element(1, 1.0),
    )
    .expect("valid coefficients");
    Problem::new(
        "worked_example",
        coefficients,
        ControlRegion::new(vec![-1.0], vec![1.0], 41).expect("region"),
        TimeGrid::new(0.0, 1.0, 200).expect("grid"),
        vec![0.0],
    )
    .expect("valid problem")
}

/// Summary of a derivative-oracle validation.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub points_checked: usize,
    pub max_error: f64,
    pub worst: String,
}

const VALIDATION_TOL: f64 = 1e-4;

struct Tracker {
    max_error: f64,
    worst: String,
}

impl Tracker {
    fn check(&mut self, name: &str, oracle: f64, fd: f64, point: &[f64]) -> Result<()> {
        let err = (oracle - fd).abs() / (1.0 + fd.abs());
        if !err.is_finite() || err > VALIDATION_TOL {
            return Err(FbsdeError::DerivativeMismatch { name: name.to_string(), error: err, point: point.to_vec() });
        }
        if err > self.max_error {
            self.max_error = err;
            self.worst = name.to_string();
        }
        Ok(())
    }
}

fn bump(v: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut w = v.to_vec();
    w[i] += h;
    w
}

fn step(v: f64) -> f64 {
    1e-5 * (1.0 + v.abs())
}

fn validate_field(name: &str, f: &dyn VectorField, t: f64, x: &[f64], u: &[f64], tr: &mut Tracker) -> Result<()> {
    let n = x.len();
    let k = u.len();
    let point: Vec<f64> = x.iter().chain(u).copied().collect();
    let bx = f.d_x(t, x, u);
    let bu = f.d_u(t, x, u);
    let bxx = f.d_xx(t, x, u);
    let bxu = f.d_xu(t, x, u);
    let buu = f.d_uu(t, x, u);
    for j in 0..n {
        let h = step(x[j]);
        let (xp, xm) = (bump(x, j, h), bump(x, j, -h));
        let cd = (f.value(t, &xp, u) - f.value(t, &xm, u)) / (2.0 * h);
        let cdx = (f.d_x(t, &xp, u) - f.d_x(t, &xm, u)) / (2.0 * h);
        let cdu = (f.d_u(t, &xp, u) - f.d_u(t, &xm, u)) / (2.0 * h);
        for i in 0..n {
            tr.check(&format!("{name}.d_x[{i},{j}]"), bx[(i, j)], cd[i], &point)?;
            for l in 0..n {
                tr.check(&format!("{name}.d_xx[{i}][{l},{j}]"), bxx[i][(l, j)], cdx[(i, l)], &point)?;
            }
            for l in 0..k {
                tr.check(&format!("{name}.d_xu[{i}][{j},{l}]"), bxu[i][(j, l)], cdu[(i, l)], &point)?;
            }
        }
    }
    for j in 0..k {
        let h = step(u[j]);
        let (up, um) = (bump(u, j, h), bump(u, j, -h));
        let cd = (f.value(t, x, &up) - f.value(t, x, &um)) / (2.0 * h);
        let cdu = (f.d_u(t, x, &up) - f.d_u(t, x, &um)) / (2.0 * h);
        for i in 0..n {
            tr.check(&format!("{name}.d_u[{i},{j}]"), bu[(i, j)], cd[i], &point)?;
            for l in 0..k {
                tr.check(&format!("{name}.d_uu[{i}][{l},{j}]"), buu[i][(l, j)], cdu[(i, l)], &point)?;
            }
        }
    }
    Ok(())
}

fn validate_generator(f: &dyn Generator, t: f64, w: &[f64], n: usize, tr: &mut Tracker) -> Result<()> {
    let split = |w: &[f64]| -> (Vec<f64>, f64, f64, Vec<f64>) { (w[..n].to_vec(), w[n], w[n + 1], w[n + 2..].to_vec()) };
    let (x, y, z, u) = split(w);
    let g = f.gradient(t, &x, y, z, &u);
    let hs = f.hessian(t, &x, y, z, &u);
    for j in 0..w.len() {
        let h = step(w[j]);
        let (a, b) = (split(&bump(w, j, h)), split(&bump(w, j, -h)));
        let cd = (f.value(t, &a.0, a.1, a.2, &a.3) - f.value(t, &b.0, b.1, b.2, &b.3)) / (2.0 * h);
        tr.check(&format!("generator.gradient[{j}]"), g[j], cd, w)?;
        let cdg = (f.gradient(t, &a.0, a.1, a.2, &a.3) - f.gradient(t, &b.0, b.1, b.2, &b.3)) / (2.0 * h);
        for i in 0..w.len() {
            tr.check(&format!("generator.hessian[{i},{j}]"), hs[(i, j)], cdg[i], w)?;
        }
    }
    Ok(())
}

fn validate_terminal(f: &dyn Terminal, x: &[f64], tr: &mut Tracker) -> Result<()> {
    let g = f.gradient(x);
    let hs = f.hessian(x);
    for j in 0..x.len() {
        let h = step(x[j]);
        let (a, b) = (bump(x, j, h), bump(x, j, -h));
        tr.check(&format!("terminal.gradient[{j}]"), g[j], (f.value(&a) - f.value(&b)) / (2.0 * h), x)?;
        let cdg = (f.gradient(&a) - f.gradient(&b)) / (2.0 * h);
        for i in 0..x.len() {
            tr.check(&format!("terminal.hessian[{i},{j}]"), hs[(i, j)], cdg[i], x)?;
        }
    }
    Ok(())
}

/// Compares every analytic derivative against central differences with step
/// `1e-5 (1 + |v|)` at `n_points` seeded sample points in `[-1, 1]` (controls
/// drawn inside the region). Fails on the first entry whose relative error
/// `|oracle - fd| / (1 + |fd|)` exceeds `1e-4`.
pub fn validate_coefficients(problem: &Problem, n_points: usize, seed: u64) -> Result<ValidationReport> {
    if n_points == 0 {
        return Err(FbsdeError::InvalidParameter("validation needs at least one sample point".into()));
    }
    let c = &problem.coefficients;
    let mut rng = path_rng(seed, 0);
    let mut tr = Tracker { max_error: 0.0, worst: String::new() };
    for _ in 0..n_points {
        let t = rng.random_range(problem.grid.t0..=problem.grid.t_end);
        let x: Vec<f64> = (0..c.n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let u: Vec<f64> = (0..c.k)
            .map(|i| {
                let (l, h) = (problem.region.lower[i], problem.region.upper[i]);
                if h > l {
                    rng.random_range(l..=h)
                } else {
                    l
                }
            })
            .collect();
        let y = rng.random_range(-1.0..=1.0);
        let z = rng.random_range(-1.0..=1.0);
        validate_field("drift", c.drift.as_ref(), t, &x, &u, &mut tr)?;
        validate_field("diffusion", c.diffusion.as_ref(), t, &x, &u, &mut tr)?;
        let w: Vec<f64> = x.iter().copied().chain([y, z]).chain(u.iter().copied()).collect();
        validate_generator(c.generator.as_ref(), t, &w, c.n, &mut tr)?;
        validate_terminal(c.terminal.as_ref(), &x, &mut tr)?;
    }
    Ok(ValidationReport { points_checked: n_points, max_error: tr.max_error, worst: tr.worst })
}
