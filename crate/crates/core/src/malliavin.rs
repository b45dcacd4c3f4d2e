//! Malliavin derivatives by re-simulation with bumped Brownian increments, the
//! right-diagonal operator `nabla` for adapted processes, and estimation of
//! martingale-representation kernels.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FbsdeError, Result};
use crate::paths::PathTensor;
use crate::regression::{Basis, RegressionOptions, Regressor};

/// A process computed pathwise from the Brownian increments of one path.
///
/// `evaluate` returns the process on the grid, slot-major: `(n_steps + 1) * dim`
/// values for `n_steps` increments. It must be a pure function of `dw`.
pub trait WienerFunctional: Sync {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, dw: &[f64]) -> Vec<f64>;

    /// Closed-form `D_theta` of the process at every grid time, same layout as `evaluate`.
    fn malliavin(&self, _theta: usize, _dw: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// How derivatives are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MalliavinMode {
    Bump,
    ClosedForm,
}

#[derive(Debug, Clone, Copy)]
pub struct MalliavinConfig {
    /// Bump size; `1e-3 * sqrt(dt)` when absent.
    pub eps: Option<f64>,
    pub mode: MalliavinMode,
}

impl Default for MalliavinConfig {
    fn default() -> Self {
        Self { eps: None, mode: MalliavinMode::Bump }
    }
}

impl MalliavinConfig {
    pub fn closed_form() -> Self {
        Self { eps: None, mode: MalliavinMode::ClosedForm }
    }

    pub fn bump_size(&self, dt: f64) -> Result<f64> {
        let e = self.eps.unwrap_or(1e-3 * dt.sqrt());
        if !(e > 0.0 && e.is_finite()) {
            return Err(FbsdeError::InvalidParameter(format!("bump size must be positive, got {e}")));
        }
        Ok(e)
    }
}

fn evaluate_checked(f: &dyn WienerFunctional, dw: &[f64]) -> Result<Vec<f64>> {
    let expected = (dw.len() + 1) * f.dim();
    let a = f.evaluate(dw);
    if a.len() != expected {
        return Err(FbsdeError::Dimension(format!("functional returned {} values, expected {expected}", a.len())));
    }
    Ok(a)
}

/// `D_theta phi(t_j)` for every grid index `j` on one path. A bump of the
/// increment `dw[theta]` (the step from `t_theta` to `t_theta+1`) is applied
/// and differenced centrally. Entries with `j <= theta` are zero: the grid
/// value at `t_theta` does not see that increment.
pub fn malliavin_derivative_fd(
    f: &dyn WienerFunctional,
    dw: &[f64],
    theta: usize,
    dt: f64,
    cfg: &MalliavinConfig,
) -> Result<Vec<f64>> {
    let steps = dw.len();
    if theta >= steps {
        return Err(FbsdeError::InvalidParameter(format!("theta index {theta} outside 0..{steps}")));
    }
    let d = f.dim();
    let mut out = match cfg.mode {
        MalliavinMode::ClosedForm => {
            let v = f.malliavin(theta, dw).ok_or_else(|| {
                FbsdeError::MissingInput("closed-form Malliavin derivative not provided by this functional".into())
            })?;
            if v.len() != (steps + 1) * d {
                return Err(FbsdeError::Dimension("closed-form derivative has the wrong length".into()));
            }
            v
        }
        MalliavinMode::Bump => {
            let base = evaluate_checked(f, dw)?;
            let again = evaluate_checked(f, dw)?;
            if base.iter().zip(&again).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(FbsdeError::NonReproducible(
                    "functional returned different values for identical increments".into(),
                ));
            }
            let eps = cfg.bump_size(dt)?;
            let mut up = dw.to_vec();
            up[theta] += eps;
            let mut down = dw.to_vec();
            down[theta] -= eps;
            let (a, b) = (evaluate_checked(f, &up)?, evaluate_checked(f, &down)?);
            a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * eps)).collect()
        }
    };
    for v in out.iter_mut().take((theta + 1) * d) {
        *v = 0.0;
    }
    Ok(out)
}

/// Right-diagonal derivative `nabla phi(t_s) = D_s phi(t_{s+1})` for
/// `s = 0..n_steps`, `n_steps * dim` values.
pub fn nabla(f: &dyn WienerFunctional, dw: &[f64], dt: f64, cfg: &MalliavinConfig) -> Result<Vec<f64>> {
    let d = f.dim();
    let mut out = Vec::with_capacity(dw.len() * d);
    for s in 0..dw.len() {
        let ds = malliavin_derivative_fd(f, dw, s, dt, cfg)?;
        out.extend_from_slice(&ds[(s + 1) * d..(s + 2) * d]);
    }
    Ok(out)
}

/// `nabla` on every path of a noise tensor, in parallel; `n_steps` slots of `dim`.
pub fn nabla_paths(
    f: &dyn WienerFunctional,
    dw: &PathTensor,
    dt: f64,
    cfg: &MalliavinConfig,
) -> Result<PathTensor> {
    let rows: Vec<Vec<f64>> = (0..dw.paths())
        .into_par_iter()
        .map(|p| nabla(f, &dw.series(p, 0), dt, cfg))
        .collect::<Result<_>>()?;
    Ok(PathTensor::from_path_major(dw.slots(), f.dim(), &rows))
}

/// `D_theta phi` on every path, `n_steps + 1` slots of `dim`.
pub fn malliavin_derivative_paths(
    f: &dyn WienerFunctional,
    dw: &PathTensor,
    theta: usize,
    dt: f64,
    cfg: &MalliavinConfig,
) -> Result<PathTensor> {
    let rows: Vec<Vec<f64>> = (0..dw.paths())
        .into_par_iter()
        .map(|p| malliavin_derivative_fd(f, &dw.series(p, 0), theta, dt, cfg))
        .collect::<Result<_>>()?;
    Ok(PathTensor::from_path_major(dw.slots() + 1, f.dim(), &rows))
}

/// A process that does not depend on the noise.
#[derive(Debug, Clone)]
pub struct DeterministicProcess {
    /// Slot-major values, `(n_steps + 1) * dim`.
    pub values: Vec<f64>,
    pub dim: usize,
}

impl WienerFunctional for DeterministicProcess {
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, _dw: &[f64]) -> Vec<f64> {
        self.values.clone()
    }
    fn malliavin(&self, _theta: usize, _dw: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.values.len()])
    }
}

/// The Brownian path `W(t_j) = sum_{i<j} dw[i]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BrownianPath;

impl WienerFunctional for BrownianPath {
    fn evaluate(&self, dw: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; dw.len() + 1];
        for (k, d) in dw.iter().enumerate() {
            w[k + 1] = w[k] + d;
        }
        w
    }
    fn malliavin(&self, theta: usize, dw: &[f64]) -> Option<Vec<f64>> {
        Some((0..=dw.len()).map(|j| if j > theta { 1.0 } else { 0.0 }).collect())
    }
}

/// `dX = b X dt + a X dW` sampled exactly, `X(t_j) = x0 exp((b - a^2/2) t_j + a W(t_j))`,
/// so the pathwise derivative equals the closed form `D_theta X(t) = a X(t)` for `t > theta`.
#[derive(Debug, Clone, Copy)]
pub struct GeometricSde {
    pub x0: f64,
    pub drift: f64,
    pub vol: f64,
    pub dt: f64,
}

impl WienerFunctional for GeometricSde {
    fn evaluate(&self, dw: &[f64]) -> Vec<f64> {
        let mut w = 0.0;
        let mut x = Vec::with_capacity(dw.len() + 1);
        x.push(self.x0);
        for (k, d) in dw.iter().enumerate() {
            w += d;
            let t = (k + 1) as f64 * self.dt;
            x.push(self.x0 * ((self.drift - 0.5 * self.vol * self.vol) * t + self.vol * w).exp());
        }
        x
    }
    fn malliavin(&self, theta: usize, dw: &[f64]) -> Option<Vec<f64>> {
        let x = self.evaluate(dw);
        Some(x.iter().enumerate().map(|(j, v)| if j > theta { self.vol * v } else { 0.0 }).collect())
    }
}

/// Options for [`martingale_kernel`].
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    pub degree: usize,
    /// Only pairs with `t - s <= max_lag` are estimated.
    pub max_lag: Option<usize>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { degree: 3, max_lag: None }
    }
}

/// Kernel fit for one pair `(s, t)`, one row per target component.
#[derive(Debug, Clone, Serialize)]
pub struct KernelEntry {
    pub s: usize,
    pub t: usize,
    pub coefficients: Vec<Vec<f64>>,
    pub standard_errors: Vec<Vec<f64>>,
    /// Root-mean-square regression residual per component.
    pub residual_rms: Vec<f64>,
    #[serde(skip)]
    pub covariances: Vec<DMatrix<f64>>,
}

impl KernelEntry {
    fn new(s: usize, t: usize) -> Self {
        Self { s, t, coefficients: Vec::new(), standard_errors: Vec::new(), residual_rms: Vec::new(), covariances: Vec::new() }
    }

    fn push(&mut self, c: DVector<f64>, cov: DMatrix<f64>, rms: f64) {
        self.coefficients.push(c.as_slice().to_vec());
        self.standard_errors.push(cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
        self.residual_rms.push(rms);
        self.covariances.push(cov);
    }
}

/// Estimated `psi(s, t)` with `phi(t) = E phi(t) + sum_{s<t} psi(s, t) dW_s`,
/// each `psi(s, t)` a polynomial in the state at `t_s`.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub dim: usize,
    pub state_dim: usize,
    /// Basis per time index `s`.
    pub bases: Vec<Basis>,
    pub entries: BTreeMap<(usize, usize), KernelEntry>,
    /// `E phi(t)` per time index, `dim` values each.
    pub means: Vec<Vec<f64>>,
    /// Times `s` whose regression fell back to a constant basis.
    pub warnings: Vec<usize>,
}

impl KernelEstimate {
    pub fn entry(&self, s: usize, t: usize) -> Option<&KernelEntry> {
        self.entries.get(&(s, t))
    }

    /// `psi(s, t)` at state `x`.
    pub fn evaluate(&self, s: usize, t: usize, x: &[f64]) -> Result<DVector<f64>> {
        let e = self
            .entry(s, t)
            .ok_or_else(|| FbsdeError::InvalidParameter(format!("kernel not estimated at (s, t) = ({s}, {t})")))?;
        let f = self.bases[s].features(x);
        Ok(DVector::from_iterator(
            self.dim,
            e.coefficients.iter().map(|c| c.iter().zip(&f).map(|(a, b)| a * b).sum()),
        ))
    }

    /// Coefficients of `psi(s, t)` in raw monomials `1, x, x^2, ...` (scalar
    /// state only), with their standard errors.
    pub fn raw_coefficients(&self, s: usize, t: usize, component: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self
            .entry(s, t)
            .ok_or_else(|| FbsdeError::InvalidParameter(format!("kernel not estimated at (s, t) = ({s}, {t})")))?;
        let map = self.bases[s]
            .raw_monomial_map()
            .ok_or_else(|| FbsdeError::Dimension("raw coefficients need a scalar state".into()))?;
        let c = DVector::from_column_slice(&e.coefficients[component]);
        let cov = &e.covariances[component];
        let raw = &map * c;
        let raw_cov = &map * cov * map.transpose();
        Ok((raw.as_slice().to_vec(), raw_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()))
    }

    /// `E phi(t) + sum_s psi(s, t) dW_s` along one path.
    pub fn reconstruct(&self, t: usize, states: &PathTensor, dw: &PathTensor, path: usize) -> Result<Vec<f64>> {
        let mut out = self.means[t].clone();
        for s in 0..t {
            if self.entry(s, t).is_none() {
                continue;
            }
            let psi = self.evaluate(s, t, states.get(s, path))?;
            let d = dw.scalar(s, path);
            for (o, v) in out.iter_mut().zip(psi.iter()) {
                *o += v * d;
            }
        }
        Ok(out)
    }
}

/// Estimates the martingale-representation kernel of `target` (slots
/// `0..T`, any dimension). For each `t`: `M_s = E[phi(t) | X_s]` by
/// regression (with `M_t = phi(t)`), then
/// `psi(s, t) = E[(M_{s+1} - M_s) dW_s | X_s] / dt`.
pub fn martingale_kernel(
    target: &PathTensor,
    states: &PathTensor,
    dw: &PathTensor,
    dt: f64,
    opts: &KernelOptions,
) -> Result<KernelEstimate> {
    let slots = target.slots();
    let np = target.paths();
    let d = target.dim();
    if slots == 0 || states.slots() < slots || dw.slots() + 1 < slots || states.paths() != np || dw.paths() != np {
        return Err(FbsdeError::Dimension("kernel target, states and increments do not line up".into()));
    }
    if !(dt > 0.0) {
        return Err(FbsdeError::InvalidParameter("dt must be positive".into()));
    }
    let sd = states.dim();
    let ropts = RegressionOptions { degree: opts.degree, ..Default::default() };
    let regs: Vec<Regressor> = (0..slots).into_par_iter().map(|s| Regressor::new(states.slot(s), sd, &ropts)).collect();
    let warnings: Vec<usize> = regs.iter().enumerate().filter(|(_, r)| r.warning).map(|(s, _)| s).collect();
    let means: Vec<Vec<f64>> = (0..slots)
        .map(|t| (0..d).map(|c| target.component(t, c).iter().sum::<f64>() / np as f64).collect())
        .collect();
    let per_t: Vec<Vec<KernelEntry>> = (1..slots)
        .into_par_iter()
        .map(|t| {
            let lo = opts.max_lag.map_or(0, |l| t.saturating_sub(l));
            let mut out = Vec::with_capacity(t - lo);
            let mut next: Vec<Vec<f64>> = (0..d).map(|c| target.component(t, c)).collect();
            for s in (lo..t).rev() {
                let reg = &regs[s];
                let w = dw.component(s, 0);
                let mut entry = KernelEntry::new(s, t);
                let mut current = Vec::with_capacity(d);
                for next_c in next.iter() {
                    let m_s = reg.fitted(next_c);
                    let y: Vec<f64> = (0..np).map(|p| (next_c[p] - m_s[p]) * w[p] / dt).collect();
                    let (c, cov) = reg.coefficients_with_robust_covariance(&y);
                    let fit = reg.fitted(&y);
                    let rms = (y.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / np as f64).sqrt();
                    entry.push(c, cov, rms);
                    current.push(m_s);
                }
                next = current;
                out.push(entry);
            }
            out
        })
        .collect();
    let entries = per_t.into_iter().flatten().map(|e| ((e.s, e.t), e)).collect();
    Ok(KernelEstimate { dim: d, state_dim: sd, bases: regs.iter().map(|r| r.basis().clone()).collect(), entries, means, warnings })
}
