//! Finite-difference solver for the HJB variational inequality
//! `min(v_x G_l + K_l, v_t + min_u [L^u v + f(t, x, v, v_x sigma, u)]) = 0`
//! in one space dimension, with feedback extraction, jet probes and the
//! checks linking the value function to the adjoint processes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::ClassicalAdjoints;
use crate::error::{FbsdeError, Result};
use crate::model::{FeedbackFn, Problem, RegularControl, SingularControl, TimeGrid};
use crate::paths::mean_and_se;
use crate::simulate::ForwardPaths;

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Uniform grid on `[x_min, x_max]` with `n_x` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
}

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, n_x: usize) -> Result<Self> {
        if !(x_min < x_max) || n_x < 3 {
            return Err(FbsdeError::InvalidParameter(format!(
                "spatial grid needs x_min < x_max and n_x >= 3, got [{x_min}, {x_max}] with {n_x}"
            )));
        }
        Ok(Self { x_min, x_max, n_x })
    }

    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.h()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min - 1e-12 && x <= self.x_max + 1e-12
    }

    pub fn nearest(&self, x: f64) -> usize {
        (((x - self.x_min) / self.h()).round().max(0.0) as usize).min(self.n_x - 1)
    }

    /// Cell index `i` and weight `w` with `x = (1 - w) x_i + w x_{i+1}`.
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.x_min) / self.h()).clamp(0.0, (self.n_x - 1) as f64);
        let i = (s.floor() as usize).min(self.n_x - 2);
        (i, s - i as f64)
    }
}

/// Solution of the variational inequality on a time-space grid.
#[derive(Debug, Clone, Serialize)]
pub struct ValueGrid {
    pub grid: TimeGrid,
    pub space: SpatialGrid,
    /// `v[k][i]`, `n_steps + 1` rows.
    pub v: Vec<Vec<f64>>,
    /// Active singular column on push cells, `None` on continuation cells.
    pub push: Vec<Vec<Option<usize>>>,
    /// Minimizing control per cell.
    pub u_star: Vec<Vec<Vec<f64>>>,
    /// Inner iterations used per time step.
    pub iterations: Vec<usize>,
}

impl ValueGrid {
    /// Grid filled with `v(t, x)`, no push cells and zero controls.
    pub fn from_fn(grid: TimeGrid, space: SpatialGrid, k: usize, v: impl Fn(f64, f64) -> f64) -> Self {
        let rows = grid.n_steps + 1;
        Self {
            grid,
            space,
            v: (0..rows).map(|s| (0..space.n_x).map(|i| v(grid.time(s), space.x(i))).collect()).collect(),
            push: vec![vec![None; space.n_x]; rows],
            u_star: vec![vec![vec![0.0; k]; space.n_x]; rows],
            iterations: vec![0; grid.n_steps],
        }
    }

    pub fn mask(&self, k: usize, i: usize) -> u8 {
        u8::from(self.push[k][i].is_some())
    }

    pub fn push_cells(&self) -> usize {
        self.push.iter().flatten().filter(|p| p.is_some()).count()
    }

    /// Grid points where the push mask changes, per time row.
    pub fn free_boundaries(&self) -> Vec<Vec<f64>> {
        self.push
            .iter()
            .map(|row| {
                (1..row.len())
                    .filter(|&i| row[i].is_some() != row[i - 1].is_some())
                    .map(|i| 0.5 * (self.space.x(i - 1) + self.space.x(i)))
                    .collect()
            })
            .collect()
    }

    fn row_index(&self, t: f64) -> usize {
        self.grid.nearest_index(t).min(self.grid.n_steps)
    }

    /// Linear interpolation of `v(t_k, .)` at `x`.
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        interpolate(&self.v[k], &self.space, x)
    }
}

fn interpolate(row: &[f64], space: &SpatialGrid, x: f64) -> f64 {
    let (i, w) = space.locate(x);
    (1.0 - w) * row[i] + w * row[i + 1]
}

/// Central first difference, one-sided at the ends.
fn gradient(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| match i {
            0 => (v[1] - v[0]) / h,
            _ if i == n - 1 => (v[n - 1] - v[n - 2]) / h,
            _ => (v[i + 1] - v[i - 1]) / (2.0 * h),
        })
        .collect()
}

/// Second difference, zero at the ends.
fn second_difference(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.0 } else { (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h) })
        .collect()
}

/// Coefficients of `v_i - dt L^u v` on row `i`: upwind drift, central
/// diffusion, `v_xx = 0` with an inward difference at the ends.
fn operator_row(i: usize, n_x: usize, b: f64, s: f64, dt: f64, h: f64) -> (f64, f64, f64) {
    if i == 0 {
        (0.0, 1.0 + dt * b / h, -dt * b / h)
    } else if i == n_x - 1 {
        (dt * b / h, 1.0 - dt * b / h, 0.0)
    } else {
        let a = 0.5 * s * s / (h * h);
        let (bp, bm) = (b.max(0.0) / h, (-b).max(0.0) / h);
        (-dt * (bm + a), 1.0 + dt * (bp + bm + 2.0 * a), -dt * (bp + a))
    }
}

/// Row `i` of the push branch for singular column with direction `g`:
/// `v_i - v_{i+1} - K h / g` (g > 0) or `v_i - v_{i-1} - K h / |g|` (g < 0).
fn push_row(i: usize, n_x: usize, g: f64, cost: f64, h: f64) -> Option<(f64, f64, f64, f64)> {
    if g > 0.0 && i + 1 < n_x {
        Some((0.0, 1.0, -1.0, cost * h / g))
    } else if g < 0.0 && i > 0 {
        Some((-1.0, 1.0, 0.0, cost * h / -g))
    } else {
        None
    }
}

fn apply(row: (f64, f64, f64), v: &[f64], i: usize) -> f64 {
    let (lo, di, up) = row;
    let mut r = di * v[i];
    if i > 0 {
        r += lo * v[i - 1];
    }
    if i + 1 < v.len() {
        r += up * v[i + 1];
    }
    r
}

/// Solves a tridiagonal system by the Thomas algorithm.
fn thomas(lo: &[f64], di: &[f64], up: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = di.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut den = di[0];
    if den.abs() < 1e-300 {
        return Err(FbsdeError::InvalidParameter("singular tridiagonal system".into()));
    }
    c[0] = up[0] / den;
    d[0] = rhs[0] / den;
    for i in 1..n {
        den = di[i] - lo[i] * c[i - 1];
        if den.abs() < 1e-300 {
            return Err(FbsdeError::InvalidParameter("singular tridiagonal system".into()));
        }
        c[i] = up[i] / den;
        d[i] = (rhs[i] - lo[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Drift and diffusion of every (cell, control) pair at one time.
struct StepData {
    t: f64,
    xs: Vec<f64>,
    controls: Vec<DVector<f64>>,
    b: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

impl StepData {
    fn new(problem: &Problem, space: &SpatialGrid, controls: &[DVector<f64>], t: f64) -> Self {
        let c = &problem.coefficients;
        let xs: Vec<f64> = (0..space.n_x).map(|i| space.x(i)).collect();
        let b = xs.iter().map(|&x| controls.iter().map(|u| c.drift.value(t, &[x], u.as_slice())[0]).collect()).collect();
        let s = xs.iter().map(|&x| controls.iter().map(|u| c.diffusion.value(t, &[x], u.as_slice())[0]).collect()).collect();
        Self { t, xs, controls: controls.to_vec(), b, s }
    }

    fn f(&self, problem: &Problem, i: usize, j: usize, y: f64, q: f64) -> f64 {
        problem.coefficients.generator.value(self.t, &[self.xs[i]], y, q * self.s[i][j], self.controls[j].as_slice())
    }

    /// `argmin_u 1/2 sigma^2 X + q b + f(t, x, y, q sigma, u)`, ties to the first control.
    fn argmin_hamiltonian(&self, problem: &Problem, i: usize, y: f64, q: f64, xx: f64) -> usize {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.controls.len() {
            let s = self.s[i][j];
            let val = 0.5 * s * s * xx + q * self.b[i][j] + self.f(problem, i, j, y, q);
            if val < best.1 {
                best = (j, val);
            }
        }
        best.0
    }
}

fn check_scalar(problem: &Problem) -> Result<()> {
    if problem.coefficients.n != 1 {
        return Err(FbsdeError::Dimension("the HJB solver handles a scalar state only".into()));
    }
    Ok(())
}

/// How the gradient constraint enters each time step.
#[derive(Debug, Clone, Copy)]
enum Constraint {
    /// Policy iteration over {continuation, push}.
    Projection,
    /// Penalty `lambda * max(push residual, 0)` added to the continuation row.
    Penalty(f64),
}

/// Solves the variational inequality backward in time, fully implicit, with
/// policy iteration in each step: every row takes the branch with the largest
/// residual among the continuation rows (one per discrete control, `f` frozen
/// at the current iterate) and the push rows. Ties go to continuation and to
/// the first control.
pub fn solve_hjb_vi(problem: &Problem, space: &SpatialGrid) -> Result<ValueGrid> {
    solve(problem, space, Constraint::Projection)
}

/// Penalized variant of [`solve_hjb_vi`], used as a cross-check.
pub fn solve_hjb_penalty(problem: &Problem, space: &SpatialGrid, lambda: f64) -> Result<ValueGrid> {
    if !(lambda > 0.0) {
        return Err(FbsdeError::InvalidParameter("penalty must be positive".into()));
    }
    solve(problem, space, Constraint::Penalty(lambda))
}

fn solve(problem: &Problem, space: &SpatialGrid, mode: Constraint) -> Result<ValueGrid> {
    check_scalar(problem)?;
    let c = &problem.coefficients;
    let grid = problem.grid;
    let (nx, steps, dt, h) = (space.n_x, grid.n_steps, grid.dt(), space.h());
    let controls = problem.region.discretize();
    let mut v = vec![vec![0.0; nx]; steps + 1];
    let mut push = vec![vec![None; nx]; steps + 1];
    let mut u_star = vec![vec![vec![0.0; c.k]; nx]; steps + 1];
    let mut iterations = vec![0; steps];
    v[steps] = (0..nx).map(|i| c.terminal.value(&[space.x(i)])).collect();
    let terminal = StepData::new(problem, space, &controls, grid.time(steps));
    fill_controls(problem, &terminal, &v[steps], h, &mut u_star[steps]);
    for k in (0..steps).rev() {
        let data = StepData::new(problem, space, &controls, grid.time(k));
        let next = v[k + 1].clone();
        let mut cur = next.clone();
        let mut history = Vec::new();
        let mut active = vec![None; nx];
        let mut converged = false;
        for it in 0..MAX_ITER {
            let grad = gradient(&cur, h);
            let rows: Vec<((f64, f64, f64), f64, Option<usize>)> = (0..nx)
                .into_par_iter()
                .map(|i| {
                    let mut best: Option<((f64, f64, f64), f64, f64)> = None;
                    for j in 0..controls.len() {
                        let row = operator_row(i, nx, data.b[i][j], data.s[i][j], dt, h);
                        let rhs = next[i] + dt * data.f(problem, i, j, cur[i], grad[i]);
                        let res = apply(row, &cur, i) - rhs;
                        if best.is_none_or(|b| res > b.2) {
                            best = Some((row, rhs, res));
                        }
                    }
                    let (row, rhs, res) = best.expect("nonempty control set");
                    let mut out = (row, rhs, None);
                    let mut top = (res, 0.0, None);
                    for l in 0..c.m {
                        if let Some((lo, di, up, r)) = push_row(i, nx, c.g[(0, l)], c.cost[l], h) {
                            let pres = apply((lo, di, up), &cur, i) - r;
                            match mode {
                                Constraint::Projection if pres > top.0 => {
                                    top = (pres, 0.0, Some(l));
                                    out = ((lo, di, up), r, Some(l));
                                }
                                Constraint::Penalty(lambda) if pres > 0.0 && lambda * pres > top.1 => {
                                    top.1 = lambda * pres;
                                    out = (
                                        (row.0 + lambda * lo, row.1 + lambda * di, row.2 + lambda * up),
                                        rhs + lambda * r,
                                        Some(l),
                                    );
                                }
                                _ => {}
                            }
                        }
                    }
                    out
                })
                .collect();
            let lo: Vec<f64> = rows.iter().map(|r| r.0 .0).collect();
            let di: Vec<f64> = rows.iter().map(|r| r.0 .1).collect();
            let up: Vec<f64> = rows.iter().map(|r| r.0 .2).collect();
            let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let new = thomas(&lo, &di, &up, &rhs)?;
            let diff = new.iter().zip(&cur).fold(0.0f64, |a, (x, y)| {
                let d = (x - y).abs();
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    a.max(d)
                }
            });
            history.push(diff);
            let policy: Vec<Option<usize>> = rows.iter().map(|r| r.2).collect();
            active = policy;
            cur = new;
            if !diff.is_finite() {
                break;
            }
            if diff < TOL {
                iterations[k] = it + 1;
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(FbsdeError::NoConvergence { time_index: k, history });
        }
        v[k] = cur;
        push[k] = active;
        fill_controls(problem, &data, &v[k], h, &mut u_star[k]);
    }
    Ok(ValueGrid { grid, space: *space, v, push, u_star, iterations })
}

fn fill_controls(problem: &Problem, data: &StepData, v: &[f64], h: f64, out: &mut [Vec<f64>]) {
    let grad = gradient(v, h);
    let xx = second_difference(v, h);
    for (i, o) in out.iter_mut().enumerate() {
        let j = data.argmin_hamiltonian(problem, i, v[i], grad[i], xx[i]);
        *o = data.controls[j].as_slice().to_vec();
    }
}

/// Complementarity residual of a value grid, per time row and overall.
#[derive(Debug, Clone, Serialize)]
pub struct ComplementarityReport {
    pub per_time: Vec<f64>,
    pub max: f64,
}

/// `max |min(v_x G_l + K_l, v_t + min_u [L^u v + f])|` over interior cells,
/// with the discrete operators of the solver.
pub fn complementarity_residual(vg: &ValueGrid, problem: &Problem) -> Result<ComplementarityReport> {
    check_scalar(problem)?;
    let c = &problem.coefficients;
    let space = vg.space;
    let (nx, dt, h) = (space.n_x, vg.grid.dt(), space.h());
    let controls = problem.region.discretize();
    let per_time: Vec<f64> = (0..vg.grid.n_steps)
        .into_par_iter()
        .map(|k| {
            let data = StepData::new(problem, &space, &controls, vg.grid.time(k));
            let (cur, next) = (&vg.v[k], &vg.v[k + 1]);
            let grad = gradient(cur, h);
            let mut worst = 0.0f64;
            for i in 1..nx - 1 {
                let mut pde = f64::INFINITY;
                for j in 0..controls.len() {
                    let row = operator_row(i, nx, data.b[i][j], data.s[i][j], dt, h);
                    let e = apply(row, cur, i) - next[i] - dt * data.f(problem, i, j, cur[i], grad[i]);
                    pde = pde.min(-e / dt);
                }
                let mut val = pde;
                for l in 0..c.m {
                    let g = c.g[(0, l)];
                    let a = if g > 0.0 {
                        g * (cur[i + 1] - cur[i]) / h + c.cost[l]
                    } else if g < 0.0 {
                        g * (cur[i] - cur[i - 1]) / h + c.cost[l]
                    } else {
                        c.cost[l]
                    };
                    val = val.min(a);
                }
                worst = worst.max(val.abs());
            }
            worst
        })
        .collect();
    let max = per_time.iter().cloned().fold(0.0, f64::max);
    Ok(ComplementarityReport { per_time, max })
}

/// Feedback controls read off a value grid by nearest-cell lookup.
#[derive(Clone)]
pub struct ExtractedFeedback {
    pub regular: RegularControl,
    /// Pushes from a push cell to the nearest continuation cell in the push direction.
    pub singular: SingularControl,
    pub push_cells: usize,
}

/// Builds the feedback pair from a solved grid.
pub fn extract_feedback(vg: &ValueGrid, problem: &Problem) -> Result<ExtractedFeedback> {
    check_scalar(problem)?;
    let c = &problem.coefficients;
    let shared = Arc::new(vg.clone());
    let g: Vec<f64> = (0..c.m).map(|l| c.g[(0, l)]).collect();
    let reg = Arc::clone(&shared);
    let regular: FeedbackFn = Arc::new(move |t: f64, x: &[f64]| {
        let k = reg.row_index(t);
        let i = reg.space.nearest(x[0]);
        DVector::from_column_slice(&reg.u_star[k][i])
    });
    let sing = Arc::clone(&shared);
    let m = c.m;
    let singular: FeedbackFn = Arc::new(move |t: f64, x: &[f64]| {
        let mut d = DVector::zeros(m);
        let k = sing.row_index(t).min(sing.grid.n_steps - 1);
        let i = sing.space.nearest(x[0]);
        if let Some(l) = sing.push[k][i] {
            let gl = g[l];
            let row = &sing.push[k];
            let mut j = i;
            while row[j].is_some() {
                match (gl > 0.0, j) {
                    (true, j0) if j0 + 1 < row.len() => j += 1,
                    (false, j0) if j0 > 0 => j -= 1,
                    _ => break,
                }
            }
            let delta = (sing.space.x(j) - x[0]) / gl;
            d[l] = delta.max(0.0);
        }
        d
    });
    Ok(ExtractedFeedback {
        regular: RegularControl::Feedback(regular),
        singular: SingularControl::Feedback(singular),
        push_cells: vg.push_cells(),
    })
}

/// Least-squares parabolic jet at a grid point and its membership verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct SuperjetReport {
    pub p_bar: f64,
    pub q_bar: f64,
    pub theta_bar: f64,
    /// RMS residual of the local fit.
    pub fit_residual: f64,
    /// Max of `(v - model) / (|s - t| + |y - x|^2)` on the innermost ring.
    pub max_normalized: f64,
    /// Min of the same quantity.
    pub min_normalized: f64,
    pub tolerance: f64,
    pub in_superjet: bool,
    pub in_subjet: bool,
}

/// Fits `v(s, y) = v(t, x) + p (s - t) + q (y - x) + Theta/2 (y - x)^2` over
/// the cells within `radius` steps of `(t_k, x_i)`, then tests the one-sided
/// jet inequalities on the innermost ring with the residual normalized by
/// `|s - t| + |y - x|^2`. The tolerance is built from the local third space
/// difference, the second time difference and the mixed difference.
pub fn superjet_probe(vg: &ValueGrid, k: usize, i: usize, radius: usize) -> Result<SuperjetReport> {
    let (nx, steps) = (vg.space.n_x, vg.grid.n_steps);
    if radius < 2 || i < radius || i + radius >= nx || k > steps {
        return Err(FbsdeError::InvalidParameter(format!(
            "jet probe needs radius >= 2 and the point {radius} cells inside the spatial grid"
        )));
    }
    let (h, dt) = (vg.space.h(), vg.grid.dt());
    let center = vg.v[k][i];
    let k_lo = k.saturating_sub(radius);
    let k_hi = (k + radius).min(steps);
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut pts = Vec::new();
    for kk in k_lo..=k_hi {
        for ii in i - radius..=i + radius {
            if kk == k && ii == i {
                continue;
            }
            let (ds, dy) = (vg.grid.time(kk) - vg.grid.time(k), vg.space.x(ii) - vg.space.x(i));
            rows.push([ds, dy, 0.5 * dy * dy]);
            rhs.push(vg.v[kk][ii] - center);
            pts.push((kk, ii, ds, dy));
        }
    }
    let time_varies = k_hi > k_lo;
    let cols = if time_varies { 3 } else { 2 };
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| if time_varies { rows[r][c] } else { rows[r][c + 1] });
    let b = DVector::from_column_slice(&rhs);
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| FbsdeError::InvalidParameter(format!("jet fit failed: {e}")))?;
    let (p_bar, q_bar, theta_bar) = if time_varies { (sol[0], sol[1], sol[2]) } else { (0.0, sol[0], sol[1]) };
    let fit = &a * &sol;
    let fit_residual = ((&b - fit).norm_squared() / rhs.len() as f64).sqrt();
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for &(kk, ii, ds, dy) in &pts {
        if kk.abs_diff(k) > 1 || ii.abs_diff(i) > 1 {
            continue;
        }
        let model = p_bar * ds + q_bar * dy + 0.5 * theta_bar * dy * dy;
        let r = (vg.v[kk][ii] - center - model) / (ds.abs() + dy * dy);
        hi = hi.max(r);
        lo = lo.min(r);
    }
    let row = &vg.v[k];
    let third = (row[i + 2] - 2.0 * row[i + 1] + 2.0 * row[i - 1] - row[i - 2]) / (2.0 * h.powi(3));
    let (vtt, vtx) = if k >= 1 && k < steps {
        let vtt = (vg.v[k + 1][i] - 2.0 * row[i] + vg.v[k - 1][i]) / (dt * dt);
        let vtx = (vg.v[k + 1][i + 1] - vg.v[k + 1][i - 1] - vg.v[k - 1][i + 1] + vg.v[k - 1][i - 1]) / (4.0 * dt * h);
        (vtt, vtx)
    } else {
        (0.0, 0.0)
    };
    let tolerance = 10.0 * third.abs() * h + 10.0 * vtt.abs() * dt + 10.0 * vtx.abs() * h + 1e-8;
    Ok(SuperjetReport {
        p_bar,
        q_bar,
        theta_bar,
        fit_residual,
        max_normalized: hi,
        min_normalized: lo,
        tolerance,
        in_superjet: hi <= tolerance,
        in_subjet: lo >= -tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiconcavityReport {
    /// `max (D^2 v - 2 C0)` over time rows and interior cells.
    pub max_value: f64,
    pub pass: bool,
}

/// Semiconcavity with constant `c0`: `v - c0 x^2` concave in `x`, checked by
/// second differences.
pub fn semiconcavity_check(vg: &ValueGrid, c0: f64) -> SemiconcavityReport {
    let h = vg.space.h();
    let max_value = vg
        .v
        .iter()
        .flat_map(|row| (1..row.len() - 1).map(move |i| (row[i + 1] - 2.0 * row[i] + row[i - 1]) / (h * h) - 2.0 * c0))
        .fold(f64::NEG_INFINITY, f64::max);
    SemiconcavityReport { max_value, pass: max_value <= 1e-9 }
}

/// Discrete derivatives of a value grid at a time-space point.
struct Derivatives {
    v: f64,
    v_t: f64,
    v_x: f64,
    v_xx: f64,
}

fn derivatives(vg: &ValueGrid, t: f64, x: f64) -> Result<Derivatives> {
    let k = vg.row_index(t).min(vg.grid.n_steps - 1);
    let h = vg.space.h();
    let row = &vg.v[k];
    Ok(Derivatives {
        v: interpolate(row, &vg.space, x),
        v_t: (interpolate(&vg.v[k + 1], &vg.space, x) - interpolate(row, &vg.space, x)) / vg.grid.dt(),
        v_x: interpolate(&gradient(row, h), &vg.space, x),
        v_xx: interpolate(&second_difference(row, h), &vg.space, x),
    })
}

fn check_inside(vg: &ValueGrid, fwd: &ForwardPaths) -> Result<()> {
    for k in 0..fwd.x.slots() {
        for p in 0..fwd.n_paths() {
            let x = fwd.x.scalar(k, p);
            if !vg.space.contains(x) {
                return Err(FbsdeError::OutsideGrid { step: k, path: p, x });
            }
        }
    }
    Ok(())
}

/// Comparison between the value function and the adjoint processes along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct ConnectionReport {
    /// `min K_l + p G_l` over steps, paths and columns.
    pub min_push_margin: f64,
    /// `sup |p - v_x(t, X)|`.
    pub max_gradient_gap: f64,
    /// `max (P - v_xx(t, X))`.
    pub max_p_excess: f64,
    /// `max (v_xx(t, X) - P)`.
    pub max_vxx_excess: f64,
    pub tolerance: f64,
    pub margin_pass: bool,
    pub gradient_pass: bool,
    /// `P <= v_xx + tolerance`.
    pub p_below_vxx_pass: bool,
    /// `v_xx <= P + tolerance`.
    pub vxx_below_p_pass: bool,
}

/// Evaluates `K + p G >= 0`, `p = v_x` and both orderings of `P` and `v_xx`
/// along the simulated trajectory, with `v_x`, `v_xx` interpolated from the grid.
pub fn check_dpp_mp_connection(
    problem: &Problem,
    vg: &ValueGrid,
    fwd: &ForwardPaths,
    adj: &ClassicalAdjoints,
    tolerance: f64,
) -> Result<ConnectionReport> {
    check_scalar(problem)?;
    check_inside(vg, fwd)?;
    let c = &problem.coefficients;
    let mut margin = f64::INFINITY;
    let (mut gap, mut p_ex, mut v_ex) = (0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in 0..fwd.x.slots() {
        let t = fwd.grid.time(k);
        for path in 0..fwd.n_paths() {
            let x = fwd.x.scalar(k, path);
            let d = derivatives(vg, t, x)?;
            let p = adj.p.scalar(k, path);
            for l in 0..c.m {
                margin = margin.min(c.cost[l] + p * c.g[(0, l)]);
            }
            gap = gap.max((p - d.v_x).abs());
            let big_p = adj.big_p.scalar(k, path);
            p_ex = p_ex.max(big_p - d.v_xx);
            v_ex = v_ex.max(d.v_xx - big_p);
        }
    }
    Ok(ConnectionReport {
        min_push_margin: margin,
        max_gradient_gap: gap,
        max_p_excess: p_ex,
        max_vxx_excess: v_ex,
        tolerance,
        margin_pass: margin >= 0.0,
        gradient_pass: gap <= tolerance,
        p_below_vxx_pass: p_ex <= tolerance,
        vxx_below_p_pass: v_ex <= tolerance,
    })
}

/// Verification residual along a trajectory: `E int (v_t + H) dt` with
/// `H = 1/2 sigma^2 v_xx + v_x b + f(t, X, v, v_x sigma, u)` at the simulated control.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub integral: f64,
    pub standard_error: f64,
    /// Largest absolute per-step mean of `v_t + H`.
    pub max_step_mean: f64,
    pub tolerance: f64,
    /// `|integral| <= tolerance`.
    pub pass: bool,
    /// `E v_t <= -E H + tolerance`.
    pub inequality_pass: bool,
}

pub fn verification_check(problem: &Problem, vg: &ValueGrid, fwd: &ForwardPaths) -> Result<VerificationReport> {
    check_scalar(problem)?;
    check_inside(vg, fwd)?;
    let c = &problem.coefficients;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let mut total = vec![0.0; np];
    let mut max_step = 0.0f64;
    for k in 0..steps {
        let t = fwd.grid.time(k);
        let mut mean = 0.0;
        for (path, tot) in total.iter_mut().enumerate() {
            let x = fwd.x.get(k, path);
            let u = fwd.u.get(k, path);
            let d = derivatives(vg, t, x[0])?;
            let b = c.drift.value(t, x, u)[0];
            let s = c.diffusion.value(t, x, u)[0];
            let f = c.generator.value(t, x, d.v, d.v_x * s, u);
            let r = d.v_t + 0.5 * s * s * d.v_xx + d.v_x * b + f;
            *tot += r * dt;
            mean += r / np as f64;
        }
        max_step = max_step.max(mean.abs());
    }
    let (integral, se) = mean_and_se(&total);
    let tolerance = 3.0 * se + 5.0 * (vg.space.h() + vg.grid.dt()).max(1e-6);
    Ok(VerificationReport {
        integral,
        standard_error: se,
        max_step_mean: max_step,
        tolerance,
        pass: integral.abs() <= tolerance,
        inequality_pass: integral <= tolerance,
    })
}
