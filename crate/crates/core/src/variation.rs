//! Variational equations: singular perturbations, first- and second-order
//! regular variations, the state transition matrix, and convergence studies.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::solve_classical_adjoints;
use crate::error::{FbsdeError, Result};
use crate::model::{Problem, RegularControl, SingularControl, SingularControlPath};
use crate::paths::{mean_and_se, PathTensor};
use crate::regression::{RegressionOptions, Regressor};
use crate::simulate::{simulate_forward_with_noise, solve_bsde, BackwardPaths, ForwardPaths, McConfig};

/// Response `(x1, y1, z1)` to a perturbation of the singular control.
#[derive(Debug, Clone)]
pub struct SingularVariation {
    /// `n_steps + 1` slots of dimension n.
    pub x1: PathTensor,
    /// `n_steps + 1` slots.
    pub y1: PathTensor,
    /// `n_steps` slots.
    pub z1: PathTensor,
    /// Pathwise accumulated `y1` increments; their mean equals `y1[0]`.
    pub pathwise: Vec<f64>,
    pub warnings: Vec<usize>,
}

impl SingularVariation {
    /// `y1[0]` with the standard error of its pathwise representation.
    pub fn initial_value(&self) -> (f64, f64) {
        let v = self.y1.slot(0).iter().sum::<f64>() / self.y1.paths() as f64;
        (v, mean_and_se(&self.pathwise).1)
    }
}

/// First- and second-order state variations for a regular perturbation.
#[derive(Debug, Clone)]
pub struct RegularVariation {
    pub x1: PathTensor,
    pub x2: PathTensor,
}

/// `Psi` and its inverse along each path, matrices stored row-major.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub n: usize,
    pub psi: PathTensor,
    pub psi_inv: PathTensor,
}

impl TransitionMatrix {
    pub fn psi_at(&self, k: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.psi.get(k, p))
    }
    pub fn psi_inv_at(&self, k: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.psi_inv.get(k, p))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn check_shapes(problem: &Problem, fwd: &ForwardPaths) -> Result<()> {
    if fwd.grid.n_steps != problem.grid.n_steps || fwd.x.dim() != problem.coefficients.n {
        return Err(FbsdeError::Dimension("paths do not match the problem grid".into()));
    }
    Ok(())
}

/// Solves the linearized system driven by `d(xi - xi_bar)`:
/// `x1[k+1] = x1 + b_x x1 dt + sigma_x x1 dW + G (dxi - dxi_bar)`,
/// `y1[k] = E[y1[k+1]] + (f_x.x1 + f_y y1 + f_z z1) dt + K.(dxi - dxi_bar)`,
/// with `y1[n] = Phi_x(X[n]).x1[n]`. The backward regression uses the basis in
/// `X` augmented by its products with `x1`, since `y1` is linear in `x1`.
///
/// Written as a differential, `dy1 = -(...) dt + z1 dW - K d(xi - xi_bar)`,
/// so added singular mass raises `y1[0]` by `K` per unit.
pub fn solve_singular_variation(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    xi: &SingularControlPath,
    mc: &McConfig,
) -> Result<SingularVariation> {
    check_shapes(problem, fwd)?;
    let c = &problem.coefficients;
    let (n, m) = (c.n, c.m);
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    if xi.n_steps() != steps || xi.m() != m {
        return Err(FbsdeError::Dimension("perturbed singular control has the wrong shape".into()));
    }
    let diff = |k: usize, p: usize| -> DVector<f64> {
        DVector::from_iterator(m, xi.increment(k, p).iter().zip(fwd.dxi.get(k, p)).map(|(a, b)| a - b))
    };
    let rows: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity((steps + 1) * n);
            let mut x1 = DVector::zeros(n);
            out.extend(x1.iter());
            if c.is_scalar() {
                let mut v = 0.0;
                for k in 0..steps {
                    let (t, x, u) = (fwd.grid.time(k), fwd.x.scalar(k, p), fwd.u.scalar(k, p));
                    let bx = c.drift.scalar_jet(t, x, u).x;
                    let sx = c.diffusion.scalar_jet(t, x, u).x;
                    let push: f64 = (0..m).map(|j| c.g[(0, j)] * (xi.increment(k, p)[j] - fwd.dxi.get(k, p)[j])).sum();
                    v += bx * v * dt + sx * v * fwd.dw.scalar(k, p) + push;
                    out.push(v);
                }
                return out;
            }
            for k in 0..steps {
                let (t, x, u) = (fwd.grid.time(k), fwd.x.get(k, p), fwd.u.get(k, p));
                let bx = c.drift.d_x(t, x, u);
                let sx = c.diffusion.d_x(t, x, u);
                x1 = &x1 + &bx * &x1 * dt + &sx * &x1 * fwd.dw.scalar(k, p) + &c.g * diff(k, p);
                out.extend(x1.iter());
            }
            out
        })
        .collect();
    let x1 = PathTensor::from_path_major(steps + 1, n, &rows);
    let mut y1 = PathTensor::zeros(steps + 1, np, 1);
    let mut z1 = PathTensor::zeros(steps, np, 1);
    let mut pathwise = vec![0.0; np];
    for p in 0..np {
        let g = c.terminal.gradient(fwd.x.get(steps, p));
        let v = g.dot(&DVector::from_column_slice(x1.get(steps, p)));
        y1.set_scalar(steps, p, v);
        pathwise[p] = v;
    }
    let mut warnings = Vec::new();
    for k in (0..steps).rev() {
        let multipliers: Vec<Vec<f64>> = (0..n).map(|i| x1.component(k, i)).collect();
        let opts = RegressionOptions { degree: mc.degree, weights: None, multipliers };
        let reg = Regressor::new(fwd.x.slot(k), n, &opts);
        if reg.warning {
            warnings.push(k);
        }
        let next = y1.slot(k + 1).to_vec();
        let hat = reg.fitted(&next);
        let r: Vec<f64> = (0..np).map(|p| (next[p] - hat[p]) * fwd.dw.scalar(k, p)).collect();
        let zhat = reg.fitted(&r);
        let t = fwd.grid.time(k);
        for p in 0..np {
            let z = zhat[p] / dt;
            let (y, zb) = (bwd.y.scalar(k, p), bwd.z.scalar(k, p));
            let drv = if c.is_scalar() {
                let j = c.generator.scalar_jet(t, fwd.x.scalar(k, p), y, zb, fwd.u.scalar(k, p));
                j.f_x() * x1.scalar(k, p) + j.f_y() * hat[p] + j.f_z() * z
            } else {
                let j = c.jet(t, fwd.x.get(k, p), y, zb, fwd.u.get(k, p));
                j.f_x().dot(&DVector::from_column_slice(x1.get(k, p))) + j.f_y() * hat[p] + j.f_z() * z
            };
            let jump: f64 = (0..m).map(|j| c.cost[j] * (xi.increment(k, p)[j] - fwd.dxi.get(k, p)[j])).sum();
            let inc = drv * dt + jump;
            y1.set_scalar(k, p, hat[p] + inc);
            z1.set_scalar(k, p, z);
            pathwise[p] += inc;
        }
    }
    warnings.reverse();
    Ok(SingularVariation { x1, y1, z1, pathwise, warnings })
}

/// First and second variations along `(X, u)` in the direction `v`:
/// `dx1 = (b_x x1 + b_u v) dt + (sigma_x x1 + sigma_u v) dW`,
/// `dx2 = (b_x x2 + x1' b_xx x1 + 2 x1' b_xu v + v' b_uu v) dt + (same for sigma) dW`.
pub fn solve_regular_variations(
    problem: &Problem,
    fwd: &ForwardPaths,
    direction: &RegularControl,
) -> Result<RegularVariation> {
    check_shapes(problem, fwd)?;
    let c = &problem.coefficients;
    let n = c.n;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let quad = |hxx: &[DMatrix<f64>], hxu: &[DMatrix<f64>], huu: &[DMatrix<f64>], x1: &DVector<f64>, v: &DVector<f64>| {
        DVector::from_fn(n, |i, _| {
            x1.dot(&(&hxx[i] * x1)) + 2.0 * x1.dot(&(&hxu[i] * v)) + v.dot(&(&huu[i] * v))
        })
    };
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..fwd.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut a = Vec::with_capacity((steps + 1) * n);
            let mut b = Vec::with_capacity((steps + 1) * n);
            let mut x1 = DVector::zeros(n);
            let mut x2 = DVector::zeros(n);
            a.extend(x1.iter());
            b.extend(x2.iter());
            for k in 0..steps {
                let (t, x, u) = (fwd.grid.time(k), fwd.x.get(k, p), fwd.u.get(k, p));
                let v = direction.value(k, p, t, x);
                let dw = fwd.dw.scalar(k, p);
                let (dr, df) = (c.drift.as_ref(), c.diffusion.as_ref());
                let (bx, bu, sx, su) = (dr.d_x(t, x, u), dr.d_u(t, x, u), df.d_x(t, x, u), df.d_u(t, x, u));
                let qb = quad(&dr.d_xx(t, x, u), &dr.d_xu(t, x, u), &dr.d_uu(t, x, u), &x1, &v);
                let qs = quad(&df.d_xx(t, x, u), &df.d_xu(t, x, u), &df.d_uu(t, x, u), &x1, &v);
                let nx2 = &x2 + (&bx * &x2 + qb) * dt + (&sx * &x2 + qs) * dw;
                let nx1 = &x1 + (&bx * &x1 + &bu * &v) * dt + (&sx * &x1 + &su * &v) * dw;
                x1 = nx1;
                x2 = nx2;
                a.extend(x1.iter());
                b.extend(x2.iter());
            }
            (a, b)
        })
        .collect();
    let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(RegularVariation {
        x1: PathTensor::from_path_major(steps + 1, n, &a),
        x2: PathTensor::from_path_major(steps + 1, n, &b),
    })
}

const MAX_CONDITION: f64 = 1e8;

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().singular_values();
    let max = s.iter().cloned().fold(0.0f64, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Euler scheme for `dPsi = b_x Psi dt + sigma_x Psi dW`, `Psi[0] = I`, with the
/// inverse computed per step, and `x1` assembled from
/// `x1 = Psi [ int Psi^-1 (b_u - sigma_x sigma_u) v dr + int Psi^-1 sigma_u v dW ]`
/// using left-point sums.
pub fn transition_and_representation(
    problem: &Problem,
    fwd: &ForwardPaths,
    direction: &RegularControl,
) -> Result<(TransitionMatrix, PathTensor)> {
    check_shapes(problem, fwd)?;
    let c = &problem.coefficients;
    let n = c.n;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    type Row = (Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<std::result::Result<Row, FbsdeError>> = (0..fwd.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut psi = DMatrix::<f64>::identity(n, n);
            let mut inv = DMatrix::<f64>::identity(n, n);
            let mut acc = DVector::<f64>::zeros(n);
            let (mut ps, mut is, mut xs) = (row_major(&psi), row_major(&inv), vec![0.0; n]);
            for k in 0..steps {
                let (t, x, u) = (fwd.grid.time(k), fwd.x.get(k, p), fwd.u.get(k, p));
                let v = direction.value(k, p, t, x);
                let dw = fwd.dw.scalar(k, p);
                let (dr, df) = (c.drift.as_ref(), c.diffusion.as_ref());
                let (bx, bu, sx, su) = (dr.d_x(t, x, u), dr.d_u(t, x, u), df.d_x(t, x, u), df.d_u(t, x, u));
                acc += &inv * ((&bu - &sx * &su) * &v * dt + &su * &v * dw);
                psi = &psi + (&bx * &psi) * dt + (&sx * &psi) * dw;
                let cond = condition_number(&psi);
                if !(cond <= MAX_CONDITION) {
                    return Err(FbsdeError::IllConditioned { step: k + 1, path: p, cond });
                }
                inv = psi.clone().try_inverse().ok_or(FbsdeError::IllConditioned { step: k + 1, path: p, cond })?;
                ps.extend(row_major(&psi));
                is.extend(row_major(&inv));
                xs.extend((&psi * &acc).iter());
            }
            Ok((ps, is, xs))
        })
        .collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut x = Vec::new();
    for r in rows {
        let (ps, is, xs) = r?;
        a.push(ps);
        b.push(is);
        x.push(xs);
    }
    Ok((
        TransitionMatrix {
            n,
            psi: PathTensor::from_path_major(steps + 1, n * n, &a),
            psi_inv: PathTensor::from_path_major(steps + 1, n * n, &b),
        },
        PathTensor::from_path_major(steps + 1, n, &x),
    ))
}

/// Which control is perturbed in a convergence study.
#[derive(Clone)]
pub enum Perturbation {
    /// `u = reference + eps * direction`.
    Regular { reference: RegularControl, direction: RegularControl },
    /// `xi = reference + alpha * (target - reference)`, regular control fixed.
    Singular { control: RegularControl, reference: SingularControlPath, target: SingularControlPath },
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRecord {
    pub level: f64,
    pub norm_name: String,
    pub value: f64,
}

/// Fitted orders; `None` when every value is zero to machine precision.
#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub kind: String,
    pub levels: Vec<f64>,
    pub records: Vec<StudyRecord>,
    pub slopes: BTreeMap<String, Option<f64>>,
    pub max_values: BTreeMap<String, f64>,
}

impl StudyResult {
    pub fn values(&self, norm: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.norm_name == norm).map(|r| r.value).collect()
    }
}

/// Least-squares slope of `log(values)` against `log(levels)`; `None` when
/// fewer than two values are positive.
pub fn fit_slope(levels: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        levels.iter().zip(values).filter(|(_, v)| **v > 0.0).map(|(l, v)| (l.ln(), v.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx > 0.0 {
        Some(sxy / sxx)
    } else {
        None
    }
}

const EXACT_FLOOR: f64 = 1e-12;

fn sup_norm(a: &PathTensor, f: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
    let np = a.paths();
    let slots = a.slots();
    let per: Vec<f64> = (0..np).into_par_iter().map(|p| (0..slots).map(|k| f(k, p)).fold(0.0, f64::max)).collect();
    (per.iter().sum::<f64>() / np as f64).sqrt()
}

/// Runs a perturbation study with common random numbers across levels.
///
/// Regular study norms (levels are `eps`):
/// * `first_order`: `[E sup_k |dx - eps x1|^2]^(1/2)` (expected order 2),
/// * `second_order`: `[E sup_k |dx - eps x1 - eps^2/2 x2|^2]^(1/2)` (expected order 3),
/// * `y_remainder`: `[sup_k E |yhat|^2]^(1/2)` with
///   `yhat = y - ybar - p.(eps x1 + eps^2/2 x2) - eps^2/2 x1' P x1`.
///
/// Singular study norms (levels are `alpha`):
/// * `state_quotient`: `max_k E |(X^a - X)/a - x1|^2`,
/// * `cost_quotient`: `|(Y^a[0] - Y[0])/a - y1[0]|`.
pub fn convergence_study(
    problem: &Problem,
    perturbation: &Perturbation,
    levels: &[f64],
    mc: &McConfig,
) -> Result<StudyResult> {
    if levels.len() < 3 {
        return Err(FbsdeError::InvalidParameter("a convergence study needs at least 3 levels".into()));
    }
    if levels.windows(2).any(|w| !(w[1] < w[0])) || levels.iter().any(|l| !(*l > 0.0)) {
        return Err(FbsdeError::InvalidParameter("levels must be positive and strictly decreasing".into()));
    }
    let noise = crate::simulate::brownian_noise(problem, mc);
    let mut records = Vec::new();
    let n = problem.coefficients.n;
    let kind = match perturbation {
        Perturbation::Regular { reference, direction } => {
            let zero = SingularControl::Path(SingularControlPath::zero(problem.grid.n_steps, problem.coefficients.m));
            let base = simulate_forward_with_noise(problem, reference, &zero, noise.clone())?;
            let base_b = solve_bsde(problem, &base, mc)?;
            let adj = solve_classical_adjoints(problem, &base, &base_b, mc)?;
            let var = solve_regular_variations(problem, &base, direction)?;
            for &eps in levels {
                let ctrl = RegularControl::shifted(reference, direction, eps);
                let pert = simulate_forward_with_noise(problem, &ctrl, &zero, noise.clone())?;
                let pert_b = solve_bsde(problem, &pert, mc)?;
                let dx = |k: usize, p: usize, i: usize| pert.x.get(k, p)[i] - base.x.get(k, p)[i];
                let first = sup_norm(&base.x, |k, p| {
                    (0..n).map(|i| (dx(k, p, i) - eps * var.x1.get(k, p)[i]).powi(2)).sum()
                });
                let second = sup_norm(&base.x, |k, p| {
                    (0..n)
                        .map(|i| {
                            (dx(k, p, i) - eps * var.x1.get(k, p)[i] - 0.5 * eps * eps * var.x2.get(k, p)[i]).powi(2)
                        })
                        .sum()
                });
                let mut worst: f64 = 0.0;
                for k in 0..=problem.grid.n_steps {
                    let mut acc = 0.0;
                    for p in 0..base.n_paths() {
                        let x1 = DVector::from_column_slice(var.x1.get(k, p));
                        let x2 = DVector::from_column_slice(var.x2.get(k, p));
                        let lin = adj.p_at(k, p).dot(&(&x1 * eps + &x2 * (0.5 * eps * eps)));
                        let q = 0.5 * eps * eps * x1.dot(&(adj.big_p_at(k, p) * &x1));
                        let r = pert_b.y.scalar(k, p) - base_b.y.scalar(k, p) - lin - q;
                        acc += r * r;
                    }
                    worst = worst.max(acc / base.n_paths() as f64);
                }
                records.push(StudyRecord { level: eps, norm_name: "first_order".into(), value: first });
                records.push(StudyRecord { level: eps, norm_name: "second_order".into(), value: second });
                records.push(StudyRecord { level: eps, norm_name: "y_remainder".into(), value: worst.sqrt() });
            }
            "regular"
        }
        Perturbation::Singular { control, reference, target } => {
            let base = simulate_forward_with_noise(problem, control, &reference.clone().into(), noise.clone())?;
            let base_b = solve_bsde(problem, &base, mc)?;
            let var = solve_singular_variation(problem, &base, &base_b, target, mc)?;
            let (y1_0, _) = var.initial_value();
            let y0 = base_b.y.slot(0).iter().sum::<f64>() / base.n_paths() as f64;
            for &alpha in levels {
                let steps = problem.grid.n_steps;
                let m = problem.coefficients.m;
                let mut tensor = PathTensor::zeros(steps, base.n_paths(), m);
                for k in 0..steps {
                    for p in 0..base.n_paths() {
                        let (r, t) = (reference.increment(k, p), target.increment(k, p));
                        for i in 0..m {
                            tensor.get_mut(k, p)[i] = (1.0 - alpha) * r[i] + alpha * t[i];
                        }
                    }
                }
                let xi = SingularControlPath::from_tensor(tensor)?;
                let pert = simulate_forward_with_noise(problem, control, &xi.into(), noise.clone())?;
                let pert_b = solve_bsde(problem, &pert, mc)?;
                let mut worst: f64 = 0.0;
                for k in 0..=steps {
                    let mut acc = 0.0;
                    for p in 0..base.n_paths() {
                        for i in 0..n {
                            let q = (pert.x.get(k, p)[i] - base.x.get(k, p)[i]) / alpha - var.x1.get(k, p)[i];
                            acc += q * q;
                        }
                    }
                    worst = worst.max(acc / base.n_paths() as f64);
                }
                let ya = pert_b.y.slot(0).iter().sum::<f64>() / base.n_paths() as f64;
                records.push(StudyRecord { level: alpha, norm_name: "state_quotient".into(), value: worst });
                records.push(StudyRecord {
                    level: alpha,
                    norm_name: "cost_quotient".into(),
                    value: ((ya - y0) / alpha - y1_0).abs(),
                });
            }
            "singular"
        }
    };
    let mut slopes = BTreeMap::new();
    let mut max_values = BTreeMap::new();
    let mut names: Vec<String> = records.iter().map(|r| r.norm_name.clone()).collect();
    names.dedup();
    names.sort();
    names.dedup();
    for name in names {
        let vals: Vec<f64> = records.iter().filter(|r| r.norm_name == name).map(|r| r.value).collect();
        let max = vals.iter().cloned().fold(0.0f64, f64::max);
        let slope = if max <= EXACT_FLOOR { None } else { fit_slope(levels, &vals) };
        slopes.insert(name.clone(), slope);
        max_values.insert(name, max);
    }
    Ok(StudyResult { kind: kind.into(), levels: levels.to_vec(), records, slopes, max_values })
}
