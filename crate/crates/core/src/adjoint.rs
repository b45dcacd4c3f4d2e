//! Adjoint processes along simulated trajectories.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{FbsdeError, Result};
use crate::model::Problem;
use crate::paths::PathTensor;
use crate::regression::{RegressionOptions, Regressor};
use crate::simulate::{BackwardPaths, ForwardPaths, McConfig};

/// Adjoint triple of the singular-control maximum principle.
#[derive(Debug, Clone)]
pub struct SingularAdjoint {
    /// `n_steps + 1` slots of dimension n.
    pub frak_p: PathTensor,
    /// `n_steps + 1` slots, strictly positive.
    pub frak_q: PathTensor,
    /// `n_steps` slots of dimension n.
    pub frak_k: PathTensor,
    pub warnings: Vec<usize>,
}

/// First- and second-order adjoints and the exponential weight `chi`.
#[derive(Debug, Clone)]
pub struct ClassicalAdjoints {
    pub n: usize,
    /// `n_steps + 1` slots of dimension n.
    pub p: PathTensor,
    /// `n_steps` slots of dimension n.
    pub q: PathTensor,
    /// `n_steps + 1` slots of n x n matrices stored row-major.
    pub big_p: PathTensor,
    /// `n_steps` slots of n x n matrices stored row-major.
    pub big_q: PathTensor,
    /// `n_steps + 1` slots.
    pub chi: PathTensor,
    pub warnings: Vec<usize>,
}

impl ClassicalAdjoints {
    pub fn p_at(&self, k: usize, path: usize) -> DVector<f64> {
        DVector::from_column_slice(self.p.get(k, path))
    }
    pub fn q_at(&self, k: usize, path: usize) -> DVector<f64> {
        DVector::from_column_slice(self.q.get(k, path))
    }
    pub fn big_p_at(&self, k: usize, path: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.big_p.get(k, path))
    }
    pub fn big_q_at(&self, k: usize, path: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.big_q.get(k, path))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `exp{ int (f_y - f_z^2/2) dr + int f_z dW }` by Euler steps on the logarithm,
/// with the generator derivatives taken along `(X, Y, Z, u)`.
pub fn exponential_weight(problem: &Problem, fwd: &ForwardPaths, bwd: &BackwardPaths) -> PathTensor {
    let c = &problem.coefficients;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let rows: Vec<Vec<f64>> = (0..fwd.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(steps + 1);
            let mut log = 0.0;
            out.push(1.0);
            for k in 0..steps {
                let (t, y, z) = (fwd.grid.time(k), bwd.y.scalar(k, p), bwd.z.scalar(k, p));
                let (fy, fz) = if c.is_scalar() {
                    let j = c.generator.scalar_jet(t, fwd.x.scalar(k, p), y, z, fwd.u.scalar(k, p));
                    (j.f_y(), j.f_z())
                } else {
                    let j = c.jet(t, fwd.x.get(k, p), y, z, fwd.u.get(k, p));
                    (j.f_y(), j.f_z())
                };
                log += (fy - 0.5 * fz * fz) * dt + fz * fwd.dw.scalar(k, p);
                out.push(log.exp());
            }
            out
        })
        .collect();
    PathTensor::from_path_major(steps + 1, 1, &rows)
}

/// Solves for `(frak_p, frak_q, frak_k)`.
///
/// `frak_q` is the exponential weight. For `frak_p` the backward regression is
/// carried out on `pi = frak_p / frak_q` under the measure with density
/// `L = frak_q[k+1] / frak_q[k]`, whose conditional mean `exp(f_y dt)` is known
/// exactly; this keeps the scheme exact for constant ratios.
pub fn solve_singular_adjoint(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    mc: &McConfig,
) -> Result<SingularAdjoint> {
    let c = &problem.coefficients;
    let n = c.n;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let frak_q = exponential_weight(problem, fwd, bwd);
    for k in 0..=steps {
        for p in 0..np {
            let v = frak_q.scalar(k, p);
            if !(v > 0.0) || !v.is_finite() {
                return Err(FbsdeError::NonPositiveDensity { step: k, path: p, value: v });
            }
        }
    }
    let mut frak_p = PathTensor::zeros(steps + 1, np, n);
    let mut frak_k = PathTensor::zeros(steps, np, n);
    for p in 0..np {
        let g = c.terminal.gradient(fwd.x.get(steps, p));
        let q = frak_q.scalar(steps, p);
        for i in 0..n {
            frak_p.get_mut(steps, p)[i] = -g[i] * q;
        }
    }
    let mut warnings = Vec::new();
    for k in (0..steps).rev() {
        let t = fwd.grid.time(k);
        let weights: Vec<f64> = (0..np).map(|p| frak_q.scalar(k + 1, p) / frak_q.scalar(k, p)).collect();
        let opts = RegressionOptions { degree: mc.degree, weights: Some(weights), multipliers: vec![] };
        let reg = Regressor::new(fwd.x.slot(k), n, &opts);
        if reg.warning {
            warnings.push(k);
        }
        let mut ghat = vec![vec![0.0; np]; n];
        let mut rho = vec![vec![0.0; np]; n];
        for i in 0..n {
            let pi: Vec<f64> = (0..np).map(|p| frak_p.get(k + 1, p)[i] / frak_q.scalar(k + 1, p)).collect();
            ghat[i] = reg.fitted(&pi);
            let r: Vec<f64> = (0..np).map(|p| (pi[p] - ghat[i][p]) * fwd.dw.scalar(k, p)).collect();
            rho[i] = reg.fitted(&r);
        }
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let qk = frak_q.scalar(k, p);
                if c.is_scalar() {
                    let (x, u) = (fwd.x.scalar(k, p), fwd.u.scalar(k, p));
                    let j = c.generator.scalar_jet(t, x, bwd.y.scalar(k, p), bwd.z.scalar(k, p), u);
                    let e = (j.f_y() * dt).exp();
                    let cond = qk * e * ghat[0][p];
                    let kap = qk * e * (rho[0][p] / dt + ghat[0][p] * j.f_z());
                    let driver = c.drift.scalar_jet(t, x, u).x * cond + c.diffusion.scalar_jet(t, x, u).x * kap
                        - j.f_x() * qk;
                    return (vec![cond + driver * dt], vec![kap]);
                }
                let x = fwd.x.get(k, p);
                let u = fwd.u.get(k, p);
                let j = c.jet(t, x, bwd.y.scalar(k, p), bwd.z.scalar(k, p), u);
                let e = (j.f_y() * dt).exp();
                let cond = DVector::from_fn(n, |i, _| qk * e * ghat[i][p]);
                let kap = DVector::from_fn(n, |i, _| qk * e * (rho[i][p] / dt + ghat[i][p] * j.f_z()));
                let bx = c.drift.d_x(t, x, u);
                let sx = c.diffusion.d_x(t, x, u);
                let driver = bx.transpose() * &cond + sx.transpose() * &kap - j.f_x() * qk;
                let pk = cond + driver * dt;
                (pk.as_slice().to_vec(), kap.as_slice().to_vec())
            })
            .collect();
        for (p, (pk, kk)) in rows.into_iter().enumerate() {
            if pk.iter().chain(&kk).any(|v| !v.is_finite()) {
                return Err(FbsdeError::NonFinite { step: k, path: p });
            }
            frak_p.get_mut(k, p).copy_from_slice(&pk);
            frak_k.get_mut(k, p).copy_from_slice(&kk);
        }
    }
    warnings.reverse();
    Ok(SingularAdjoint { frak_p, frak_q, frak_k, warnings })
}

/// Solves the first-order pair `(p, q)` with generator
/// `Gamma = (b_x + f_y + f_z sigma_x)' p + (sigma_x + f_z)' q + f_x`, the
/// second-order pair `(P, Q)` with generator `Pi`, and `chi`.
pub fn solve_classical_adjoints(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    mc: &McConfig,
) -> Result<ClassicalAdjoints> {
    let c = &problem.coefficients;
    let n = c.n;
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let chi = exponential_weight(problem, fwd, bwd);
    let mut p_t = PathTensor::zeros(steps + 1, np, n);
    let mut q_t = PathTensor::zeros(steps, np, n);
    let mut pp_t = PathTensor::zeros(steps + 1, np, n * n);
    let mut qq_t = PathTensor::zeros(steps, np, n * n);
    for p in 0..np {
        let x = fwd.x.get(steps, p);
        p_t.get_mut(steps, p).copy_from_slice(c.terminal.gradient(x).as_slice());
        let h = c.terminal.hessian(x);
        let h = (&h + h.transpose()) * 0.5;
        pp_t.get_mut(steps, p).copy_from_slice(&row_major(&h));
    }
    let opts = mc.regression();
    let mut warnings = Vec::new();
    for k in (0..steps).rev() {
        let t = fwd.grid.time(k);
        let reg = Regressor::new(fwd.x.slot(k), n, &opts);
        if reg.warning {
            warnings.push(k);
        }
        let project = |src: &PathTensor, comp: usize| -> (Vec<f64>, Vec<f64>) {
            let v = src.component(k + 1, comp);
            let hat = reg.fitted(&v);
            let r: Vec<f64> = (0..np).map(|p| (v[p] - hat[p]) * fwd.dw.scalar(k, p)).collect();
            let vol: Vec<f64> = reg.fitted(&r).into_iter().map(|a| a / dt).collect();
            (hat, vol)
        };
        let first: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|i| project(&p_t, i)).collect();
        let second: Vec<(Vec<f64>, Vec<f64>)> = (0..n * n).map(|i| project(&pp_t, i)).collect();
        let rows: Vec<[Vec<f64>; 4]> = (0..np)
            .into_par_iter()
            .map(|path| {
                let (x, u) = (fwd.x.get(k, path), fwd.u.get(k, path));
                let (y, z) = (bwd.y.scalar(k, path), bwd.z.scalar(k, path));
                if c.is_scalar() {
                    let a = (first[0].0[path], first[0].1[path], second[0].0[path], second[0].1[path]);
                    let (pk, big) = classical_step_scalar(problem, t, dt, x[0], y, z, u[0], a);
                    return [vec![pk], vec![a.1], vec![big], vec![a.3]];
                }
                let phat = DVector::from_fn(n, |i, _| first[i].0[path]);
                let q = DVector::from_fn(n, |i, _| first[i].1[path]);
                let pm = DMatrix::from_fn(n, n, |i, l| second[i * n + l].0[path]);
                let pm = (&pm + pm.transpose()) * 0.5;
                let qm = DMatrix::from_fn(n, n, |i, l| second[i * n + l].1[path]);
                let qm = (&qm + qm.transpose()) * 0.5;
                let (pk, big) = classical_step(problem, t, dt, x, y, z, u, &phat, &q, &pm, &qm);
                [pk.as_slice().to_vec(), q.as_slice().to_vec(), row_major(&big), row_major(&qm)]
            })
            .collect();
        for (path, [pk, qk, bp, bq]) in rows.into_iter().enumerate() {
            if pk.iter().chain(&bp).any(|v| !v.is_finite()) {
                return Err(FbsdeError::NonFinite { step: k, path });
            }
            p_t.get_mut(k, path).copy_from_slice(&pk);
            q_t.get_mut(k, path).copy_from_slice(&qk);
            pp_t.get_mut(k, path).copy_from_slice(&bp);
            qq_t.get_mut(k, path).copy_from_slice(&bq);
        }
    }
    warnings.reverse();
    Ok(ClassicalAdjoints { n, p: p_t, q: q_t, big_p: pp_t, big_q: qq_t, chi, warnings })
}

/// One explicit step of the `(p, P)` recursion from the projected values
/// `phat = E[p[k+1]|X[k]]`, `q`, `pm = E[P[k+1]|X[k]]`, `qm`.
#[allow(clippy::too_many_arguments)]
fn classical_step(
    problem: &Problem,
    t: f64,
    dt: f64,
    x: &[f64],
    y: f64,
    z: f64,
    u: &[f64],
    phat: &DVector<f64>,
    q: &DVector<f64>,
    pm: &DMatrix<f64>,
    qm: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let c = &problem.coefficients;
    let n = c.n;
    let j = c.jet(t, x, y, z, u);
    let bx = c.drift.d_x(t, x, u);
    let sx = c.diffusion.d_x(t, x, u);
    let bxx = c.drift.d_xx(t, x, u);
    let sxx = c.diffusion.d_xx(t, x, u);
    let (fy, fz) = (j.f_y(), j.f_z());
    let eye = DMatrix::<f64>::identity(n, n);
    let gamma = (&bx + &eye * fy + &sx * fz).transpose() * phat
        + (&sx + &eye * fz).transpose() * q
        + j.f_x();
    let mut pbxx = DMatrix::zeros(n, n);
    let mut qsxx = DMatrix::zeros(n, n);
    let mut psxx = DMatrix::zeros(n, n);
    for i in 0..n {
        pbxx += &bxx[i] * phat[i];
        qsxx += &sxx[i] * q[i];
        psxx += &sxx[i] * phat[i];
    }
    let mut lift = DMatrix::zeros(n + 2, n);
    lift.view_mut((0, 0), (n, n)).copy_from(&eye);
    lift.view_mut((n, 0), (1, n)).copy_from(&phat.transpose());
    let zrow = sx.transpose() * phat + q;
    lift.view_mut((n + 1, 0), (1, n)).copy_from(&zrow.transpose());
    let quad = lift.transpose() * j.hess_xyz() * &lift * 0.5;
    let pi = pbxx
        + qsxx
        + pm * &bx
        + bx.transpose() * pm
        + sx.transpose() * pm * &sx
        + qm * &sx
        + sx.transpose() * qm
        + pm * fy
        + (psxx + pm * &sx + sx.transpose() * pm + qm) * fz
        + quad;
    let pk = phat + gamma * dt;
    let big = pm + pi * dt;
    let big = (&big + big.transpose()) * 0.5;
    (pk, big)
}

/// [`classical_step`] for n = k = 1 with `a = (phat, q, pm, qm)`.
#[allow(clippy::too_many_arguments)]
fn classical_step_scalar(
    problem: &Problem,
    t: f64,
    dt: f64,
    x: f64,
    y: f64,
    z: f64,
    u: f64,
    a: (f64, f64, f64, f64),
) -> (f64, f64) {
    let c = &problem.coefficients;
    let (phat, q, pm, qm) = a;
    let j = c.generator.scalar_jet(t, x, y, z, u);
    let b = c.drift.scalar_jet(t, x, u);
    let s = c.diffusion.scalar_jet(t, x, u);
    let (fy, fz) = (j.f_y(), j.f_z());
    let gamma = (b.x + fy + s.x * fz) * phat + (s.x + fz) * q + j.f_x();
    let lift = [1.0, phat, s.x * phat + q];
    let mut quad = 0.0;
    for (i, li) in lift.iter().enumerate() {
        for (l, ll) in lift.iter().enumerate() {
            quad += li * j.hess[i][l] * ll;
        }
    }
    let pi = b.xx * phat
        + s.xx * q
        + 2.0 * pm * b.x
        + s.x * pm * s.x
        + 2.0 * qm * s.x
        + pm * fy
        + (s.xx * phat + 2.0 * pm * s.x + qm) * fz
        + 0.5 * quad;
    (phat + gamma * dt, pm + pi * dt)
}

/// `max |p + frak_p / frak_q| / (1 + |p|)` over steps, paths and components.
pub fn check_ratio_identity(sing: &SingularAdjoint, cls: &ClassicalAdjoints) -> Result<f64> {
    let slots = cls.p.slots();
    let np = cls.p.paths();
    if sing.frak_p.slots() != slots || sing.frak_p.paths() != np {
        return Err(FbsdeError::Dimension("adjoints were solved on different paths".into()));
    }
    let mut worst: f64 = 0.0;
    for k in 0..slots {
        for path in 0..np {
            let q = sing.frak_q.scalar(k, path);
            if !(q > 0.0) {
                return Err(FbsdeError::NonPositiveDensity { step: k, path, value: q });
            }
            for (p, fp) in cls.p.get(k, path).iter().zip(sing.frak_p.get(k, path)) {
                worst = worst.max((p + fp / q).abs() / (1.0 + p.abs()));
            }
        }
    }
    Ok(worst)
}
