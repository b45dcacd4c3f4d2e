//! Least-squares regression on polynomial features of the state, the
//! conditional-expectation engine behind every backward solver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Polynomial features in standardized coordinates `(x - mean) / scale`.
#[derive(Debug, Clone)]
pub struct Basis {
    mean: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn multi_indices(dims: &[usize], n: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; n]];
    for total in 1..=degree {
        let mut acc = Vec::new();
        fill(dims, n, total as u32, 0, &mut vec![0u32; n], &mut acc);
        out.extend(acc);
    }
    out
}

fn fill(dims: &[usize], n: usize, left: u32, start: usize, cur: &mut Vec<u32>, acc: &mut Vec<Vec<u32>>) {
    if left == 0 {
        acc.push(cur.clone());
        return;
    }
    for i in start..dims.len() {
        cur[dims[i]] += 1;
        fill(dims, n, left - 1, i, cur, acc);
        cur[dims[i]] -= 1;
    }
}

impl Basis {
    /// Fits standardization constants to `states` (path-major, `dim` values per path).
    /// Coordinates without spread are left out of the polynomial part.
    pub fn fit(states: &[f64], dim: usize, degree: usize) -> Self {
        let n = states.len() / dim.max(1);
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = Vec::new();
        for c in 0..dim {
            let m = (0..n).map(|p| states[p * dim + c]).sum::<f64>() / n.max(1) as f64;
            let v = (0..n).map(|p| (states[p * dim + c] - m).powi(2)).sum::<f64>() / n.max(1) as f64;
            let s = v.sqrt();
            mean[c] = m;
            if s > 1e-12 * m.abs().max(1.0) {
                scale[c] = s;
                active.push(c);
            }
        }
        let exponents = multi_indices(&active, dim, degree);
        Self { mean, scale, exponents }
    }

    pub fn constant(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim], exponents: vec![vec![0; dim]] }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Highest total degree present.
    pub fn degree(&self) -> usize {
        self.exponents.iter().map(|e| e.iter().sum::<u32>() as usize).max().unwrap_or(0)
    }

    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, e) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (c, &p) in e.iter().enumerate() {
                if p > 0 {
                    v *= ((x[c] - self.mean[c]) / self.scale[c]).powi(p as i32);
                }
            }
            out[j] = v;
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.features_into(x, &mut out);
        out
    }

    pub fn evaluate(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        let f = self.features(x);
        f.iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }

    /// For a one-dimensional state, the linear map taking standardized-basis
    /// coefficients to coefficients of the raw monomials `1, x, x^2, ...`.
    pub fn raw_monomial_map(&self) -> Option<DMatrix<f64>> {
        if self.mean.len() != 1 {
            return None;
        }
        let d = self.degree();
        let (mu, s) = (self.mean[0], self.scale[0]);
        let mut t = DMatrix::zeros(d + 1, self.len());
        for (j, e) in self.exponents.iter().enumerate() {
            let p = e[0] as usize;
            // ((x - mu)/s)^p = sum_i C(p,i) x^i (-mu)^(p-i) / s^p
            let mut binom = 1.0;
            for i in 0..=p {
                t[(i, j)] += binom * (-mu).powi((p - i) as i32) / s.powi(p as i32);
                binom = binom * (p - i) as f64 / (i + 1) as f64;
            }
        }
        Some(t)
    }
}

/// Options for building a [`Regressor`].
#[derive(Debug, Clone, Default)]
pub struct RegressionOptions {
    pub degree: usize,
    /// Sample weights (weighted least squares); all ones when absent.
    pub weights: Option<Vec<f64>>,
    /// Extra per-path factors; each adds a block `basis * multiplier` to the design.
    pub multipliers: Vec<Vec<f64>>,
}

/// A factored least-squares problem on fixed regressors; many targets can be
/// projected against the same factorization.
#[derive(Debug, Clone)]
pub struct Regressor {
    basis: Basis,
    design: DMatrix<f64>,
    weights: Option<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    /// Set when the design was numerically singular and the fit fell back to a constant.
    pub warning: bool,
}

const RCOND_FLOOR: f64 = 1e-12;

impl Regressor {
    pub fn new(states: &[f64], dim: usize, opts: &RegressionOptions) -> Self {
        let basis = Basis::fit(states, dim, opts.degree);
        let n = states.len() / dim.max(1);
        let mult: Vec<&Vec<f64>> = opts
            .multipliers
            .iter()
            .filter(|m| {
                let mean = m.iter().sum::<f64>() / n.max(1) as f64;
                let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
                var.sqrt() > 1e-12 * mean.abs().max(1.0)
            })
            .collect();
        if let Some(r) = Self::try_build(basis, states, dim, &mult, opts.weights.clone()) {
            return r;
        }
        let basis = Basis::constant(dim);
        let mut r = Self::try_build(basis, states, dim, &[], opts.weights.clone())
            .expect("constant regression requires positive total weight");
        r.warning = true;
        r
    }

    fn try_build(
        basis: Basis,
        states: &[f64],
        dim: usize,
        mult: &[&Vec<f64>],
        weights: Option<Vec<f64>>,
    ) -> Option<Self> {
        let n = states.len() / dim.max(1);
        let b = basis.len();
        let cols = b * (1 + mult.len());
        let mut design = DMatrix::zeros(n, cols);
        let mut row = vec![0.0; b];
        for p in 0..n {
            basis.features_into(&states[p * dim..(p + 1) * dim], &mut row);
            for j in 0..b {
                design[(p, j)] = row[j];
            }
            for (mi, m) in mult.iter().enumerate() {
                for j in 0..b {
                    design[(p, (mi + 1) * b + j)] = row[j] * m[p];
                }
            }
        }
        let gram = match &weights {
            None => design.tr_mul(&design),
            Some(w) => {
                let mut wd = design.clone();
                for p in 0..n {
                    let s = w[p];
                    for j in 0..cols {
                        wd[(p, j)] *= s;
                    }
                }
                design.tr_mul(&wd)
            }
        };
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= RCOND_FLOOR * max {
            return None;
        }
        let chol = Cholesky::new(gram)?;
        Some(Self { basis, design, weights, chol, warning: false })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Number of regression paths.
    pub fn len(&self) -> usize {
        self.design.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.design.nrows() == 0
    }

    fn rhs(&self, target: &[f64]) -> DVector<f64> {
        let y = match &self.weights {
            None => DVector::from_column_slice(target),
            Some(w) => DVector::from_iterator(target.len(), target.iter().zip(w).map(|(a, b)| a * b)),
        };
        self.design.tr_mul(&y)
    }

    pub fn coefficients(&self, target: &[f64]) -> DVector<f64> {
        self.chol.solve(&self.rhs(target))
    }

    /// Fitted values of `target` at every regression path.
    pub fn fitted(&self, target: &[f64]) -> Vec<f64> {
        let c = self.coefficients(target);
        (&self.design * c).as_slice().to_vec()
    }

    /// Coefficients together with their estimated covariance matrix.
    pub fn coefficients_with_covariance(&self, target: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        if self.weights.is_some() {
            return self.coefficients_with_robust_covariance(target);
        }
        let c = self.coefficients(target);
        let fit = &self.design * &c;
        let n = target.len();
        let k = c.len();
        let rss: f64 = target.iter().zip(fit.iter()).map(|(y, f)| (y - f).powi(2)).sum();
        let cov = self.chol.inverse() * (rss / (n.saturating_sub(k)).max(1) as f64);
        (c, cov)
    }

    /// Coefficients with the heteroscedasticity-robust sandwich covariance.
    pub fn coefficients_with_robust_covariance(&self, target: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let c = self.coefficients(target);
        let fit = &self.design * &c;
        let k = c.len();
        let inv = self.chol.inverse();
        let mut meat = DMatrix::zeros(k, k);
        for p in 0..target.len() {
            let w = self.weights.as_ref().map_or(1.0, |w| w[p]);
            let r = w * (target[p] - fit[p]);
            let row = self.design.row(p).transpose();
            meat += &row * row.transpose() * (r * r);
        }
        (c, &inv * meat * &inv)
    }
}
