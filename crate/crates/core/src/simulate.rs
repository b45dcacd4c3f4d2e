//! Forward Euler simulation of the controlled state and least-squares Monte
//! Carlo for the controlled backward equation.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{FbsdeError, Result};
use crate::model::{Problem, RegularControl, SingularControl, TimeGrid};
use crate::paths::{mean_and_se, PathTensor};
use crate::regression::{RegressionOptions, Regressor};
use crate::rng::brownian_increments;

/// Monte Carlo settings shared by every path-based solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Total polynomial degree of the regression basis.
    pub degree: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, seed: 1, degree: 3 }
    }
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, ..Self::default() }
    }

    pub(crate) fn regression(&self) -> RegressionOptions {
        RegressionOptions { degree: self.degree, ..Default::default() }
    }
}

/// Simulated forward trajectories together with the noise and controls that produced them.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    pub grid: TimeGrid,
    /// `n_steps + 1` slots of dimension n.
    pub x: PathTensor,
    /// Brownian increments, `n_steps` slots of dimension 1.
    pub dw: PathTensor,
    /// Regular control applied on each step, dimension k.
    pub u: PathTensor,
    /// Singular increments applied on each step, dimension m.
    pub dxi: PathTensor,
}

impl ForwardPaths {
    pub fn n_paths(&self) -> usize {
        self.x.paths()
    }
}

/// Backward solution on the forward paths.
#[derive(Debug, Clone)]
pub struct BackwardPaths {
    /// `n_steps + 1` slots.
    pub y: PathTensor,
    /// `n_steps` slots.
    pub z: PathTensor,
    /// Pathwise accumulated cost `Phi(X_T) + sum (f dt + K dxi)`; its sample
    /// mean equals `Y[0]` because the regression basis contains constants.
    pub pathwise_cost: Vec<f64>,
    /// Steps whose regression fell back to a constant basis.
    pub warnings: Vec<usize>,
}

/// One simulated path.
pub(crate) struct PathRecord {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub dxi: Vec<f64>,
}

/// Failure on a path, ordered by (step, path) to report the earliest one.
type PathFailure = (usize, usize, FbsdeError);

pub(crate) fn simulate_path(
    problem: &Problem,
    control: &RegularControl,
    singular: &SingularControl,
    path: usize,
    dw: &[f64],
) -> std::result::Result<PathRecord, PathFailure> {
    let c = &problem.coefficients;
    let (n, k, m) = (c.n, c.k, c.m);
    let grid = &problem.grid;
    let dt = grid.dt();
    let steps = grid.n_steps;
    let mut x = Vec::with_capacity((steps + 1) * n);
    let mut us = Vec::with_capacity(steps * k);
    let mut dxis = Vec::with_capacity(steps * m);
    x.extend(problem.x0.iter());
    let mut cur = problem.x0.clone();
    for step in 0..steps {
        let t = grid.time(step);
        let u = control.value(step, path, t, cur.as_slice());
        if u.len() != k || !problem.region.contains(u.as_slice()) {
            return Err((step, path, FbsdeError::ControlOutOfRegion { step, value: u.as_slice().to_vec() }));
        }
        let d: DVector<f64> = match singular {
            SingularControl::Path(p) => DVector::from_column_slice(p.increment(step, path)),
            SingularControl::Feedback(f) => f(t, cur.as_slice()),
        };
        if d.len() != m {
            return Err((step, path, FbsdeError::Dimension(format!("singular increment must have length {m}"))));
        }
        if let Some((col, v)) = d.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err((step, path, FbsdeError::NegativeIncrement { step, path, column: col, value: *v }));
        }
        if c.is_scalar() {
            let b = c.drift.scalar_jet(t, cur[0], u[0]).value;
            let s = c.diffusion.scalar_jet(t, cur[0], u[0]).value;
            let push: f64 = (0..m).map(|j| c.g[(0, j)] * d[j]).sum();
            cur[0] += b * dt + s * dw[step] + push;
        } else {
            let b = c.drift.value(t, cur.as_slice(), u.as_slice());
            let s = c.diffusion.value(t, cur.as_slice(), u.as_slice());
            cur = &cur + b * dt + s * dw[step] + &c.g * &d;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err((step + 1, path, FbsdeError::NonFinite { step: step + 1, path }));
        }
        x.extend(cur.iter());
        us.extend(u.iter());
        dxis.extend(d.iter());
    }
    Ok(PathRecord { x, u: us, dxi: dxis })
}

/// Simulates with the given Brownian increments (`n_steps` slots, one path each).
pub fn simulate_forward_with_noise(
    problem: &Problem,
    control: &RegularControl,
    singular: &SingularControl,
    dw: PathTensor,
) -> Result<ForwardPaths> {
    let c = &problem.coefficients;
    let steps = problem.grid.n_steps;
    if dw.slots() != steps || dw.dim() != 1 {
        return Err(FbsdeError::Dimension(format!("noise must have {steps} slots of dimension 1")));
    }
    if let RegularControl::OpenLoop(t) = control {
        if t.slots() != steps || t.dim() != c.k || (t.paths() != 1 && t.paths() != dw.paths()) {
            return Err(FbsdeError::Dimension("open-loop control has the wrong shape".into()));
        }
    }
    if let SingularControl::Path(p) = singular {
        if p.n_steps() != steps || p.m() != c.m {
            return Err(FbsdeError::Dimension("singular control path has the wrong shape".into()));
        }
    }
    let n_paths = dw.paths();
    if n_paths < 2 {
        return Err(FbsdeError::InvalidParameter("at least 2 paths are needed for regression and standard errors".into()));
    }
    let records: Vec<std::result::Result<PathRecord, PathFailure>> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path(problem, control, singular, p, &dw.series(p, 0)))
        .collect();
    let mut first: Option<PathFailure> = None;
    let mut ok = Vec::with_capacity(n_paths);
    for r in records {
        match r {
            Ok(rec) => ok.push(rec),
            Err(f) => {
                if first.as_ref().is_none_or(|g| (f.0, f.1) < (g.0, g.1)) {
                    first = Some(f);
                }
            }
        }
    }
    if let Some((_, _, e)) = first {
        return Err(e);
    }
    let xs: Vec<Vec<f64>> = ok.iter().map(|r| r.x.clone()).collect();
    let us: Vec<Vec<f64>> = ok.iter().map(|r| r.u.clone()).collect();
    let ds: Vec<Vec<f64>> = ok.iter().map(|r| r.dxi.clone()).collect();
    Ok(ForwardPaths {
        grid: problem.grid,
        x: PathTensor::from_path_major(steps + 1, c.n, &xs),
        u: PathTensor::from_path_major(steps, c.k, &us),
        dxi: PathTensor::from_path_major(steps, c.m, &ds),
        dw,
    })
}

/// Brownian increments for `mc.n_paths` paths on the problem grid.
pub fn brownian_noise(problem: &Problem, mc: &McConfig) -> PathTensor {
    let steps = problem.grid.n_steps;
    let dt = problem.grid.dt();
    let rows: Vec<Vec<f64>> =
        (0..mc.n_paths).into_par_iter().map(|p| brownian_increments(mc.seed, p, steps, dt)).collect();
    PathTensor::from_path_major(steps, 1, &rows)
}

/// Euler scheme `X[k+1] = X[k] + b dt + sigma dW + G dxi[k]`; the singular
/// mass at step k therefore shows up in `X[k+1]` onward.
pub fn simulate_forward(
    problem: &Problem,
    control: &RegularControl,
    singular: &SingularControl,
    mc: &McConfig,
) -> Result<ForwardPaths> {
    simulate_forward_with_noise(problem, control, singular, brownian_noise(problem, mc))
}

/// Explicit backward scheme on the forward paths:
/// `Yhat = E[Y[k+1] | X[k]]`, `Z[k] = E[(Y[k+1] - Yhat) dW[k] | X[k]] / dt`,
/// `Y[k] = Yhat + f(t_k, X[k], Yhat, Z[k], u[k]) dt + K . dxi[k]`.
pub fn solve_bsde(problem: &Problem, fwd: &ForwardPaths, mc: &McConfig) -> Result<BackwardPaths> {
    let c = &problem.coefficients;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let mut y = PathTensor::zeros(steps + 1, np, 1);
    let mut z = PathTensor::zeros(steps, np, 1);
    let mut cost: Vec<f64> = (0..np).map(|p| c.terminal.value(fwd.x.get(steps, p))).collect();
    for p in 0..np {
        y.set_scalar(steps, p, cost[p]);
    }
    if let Some(p) = cost.iter().position(|v| !v.is_finite()) {
        return Err(FbsdeError::NonFinite { step: steps, path: p });
    }
    let opts = mc.regression();
    let mut warnings = Vec::new();
    for k in (0..steps).rev() {
        let reg = Regressor::new(fwd.x.slot(k), c.n, &opts);
        if reg.warning {
            warnings.push(k);
        }
        let next = y.slot(k + 1).to_vec();
        let yhat = reg.fitted(&next);
        let zt: Vec<f64> = (0..np).map(|p| (next[p] - yhat[p]) * fwd.dw.scalar(k, p)).collect();
        let zhat = reg.fitted(&zt);
        let t = fwd.grid.time(k);
        let rows: Vec<(f64, f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let zk = zhat[p] / dt;
                let f = if c.is_scalar() {
                    c.generator.scalar_jet(t, fwd.x.scalar(k, p), yhat[p], zk, fwd.u.scalar(k, p)).value
                } else {
                    c.generator.value(t, fwd.x.get(k, p), yhat[p], zk, fwd.u.get(k, p))
                };
                let jump: f64 = c.cost.iter().zip(fwd.dxi.get(k, p)).map(|(a, b)| a * b).sum();
                (yhat[p] + f * dt + jump, zk, f * dt + jump)
            })
            .collect();
        for (p, (yk, zk, inc)) in rows.into_iter().enumerate() {
            if !yk.is_finite() {
                return Err(FbsdeError::NonFinite { step: k, path: p });
            }
            y.set_scalar(k, p, yk);
            z.set_scalar(k, p, zk);
            cost[p] += inc;
        }
    }
    warnings.reverse();
    Ok(BackwardPaths { y, z, pathwise_cost: cost, warnings })
}

/// Cost estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub value: f64,
    pub standard_error: f64,
}

/// `J = mean Y[0]`; the standard error is that of the pathwise accumulated cost.
pub fn cost_estimate(bwd: &BackwardPaths) -> CostEstimate {
    let y0: Vec<f64> = bwd.y.slot(0).to_vec();
    let value = y0.iter().sum::<f64>() / y0.len() as f64;
    let (_, se) = mean_and_se(&bwd.pathwise_cost);
    CostEstimate { value, standard_error: se }
}

pub fn evaluate_cost(
    problem: &Problem,
    control: &RegularControl,
    singular: &SingularControl,
    mc: &McConfig,
) -> Result<CostEstimate> {
    let fwd = simulate_forward(problem, control, singular, mc)?;
    let bwd = solve_bsde(problem, &fwd, mc)?;
    Ok(cost_estimate(&bwd))
}
