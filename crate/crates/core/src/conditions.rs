//! Hamiltonians and the necessary-condition checks built on them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::adjoint::{ClassicalAdjoints, SingularAdjoint};
use crate::error::{FbsdeError, Result};
use crate::malliavin::{martingale_kernel, KernelOptions};
use crate::model::{Problem, SingularControlPath, TimeGrid};
use crate::paths::{mean_and_se, PathTensor};
use crate::simulate::{BackwardPaths, ForwardPaths, McConfig};
use crate::variation::{SingularVariation, TransitionMatrix};

/// Adjoint values `(p, q, P, Q)` at one point.
#[derive(Debug, Clone)]
pub struct AdjointPoint {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub big_p: DMatrix<f64>,
    pub big_q: DMatrix<f64>,
}

impl AdjointPoint {
    pub fn from_adjoints(adj: &ClassicalAdjoints, k: usize, path: usize) -> Self {
        Self { p: adj.p_at(k, path), q: adj.q_at(k, path), big_p: adj.big_p_at(k, path), big_q: adj.big_q_at(k, path) }
    }

    pub fn scalar(p: f64, q: f64, big_p: f64, big_q: f64) -> Self {
        Self {
            p: DVector::from_element(1, p),
            q: DVector::from_element(1, q),
            big_p: DMatrix::from_element(1, 1, big_p),
            big_q: DMatrix::from_element(1, 1, big_q),
        }
    }
}

/// The classical Hamiltonian `H = p.b + q.sigma + f` with its control
/// derivatives, the mixed second-order Hamiltonian (k x n), and the
/// sigma-corrected Hamiltonian with its control derivatives.
#[derive(Debug, Clone, Serialize)]
pub struct HamiltonianRecord {
    pub h: f64,
    pub h_u: Vec<f64>,
    pub h_uu: Vec<Vec<f64>>,
    pub mixed: Vec<Vec<f64>>,
    pub corrected: f64,
    pub corrected_u: Vec<f64>,
    pub corrected_uu: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Hamiltonian entries used by the checks, kept as matrices.
pub(crate) struct HamiltonianParts {
    pub h: f64,
    pub h_u: DVector<f64>,
    pub h_uu: DMatrix<f64>,
    pub mixed: DMatrix<f64>,
    pub corrected: f64,
    pub corrected_u: DVector<f64>,
    pub corrected_uu: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub f_z: f64,
    pub f_zu: DVector<f64>,
    pub f_zz: f64,
    pub p_sigma_uu: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn hamiltonian_parts(
    problem: &Problem,
    t: f64,
    x: &[f64],
    y: f64,
    z: f64,
    u: &[f64],
    adj: &AdjointPoint,
    x_ref: &[f64],
    u_ref: &[f64],
) -> Result<HamiltonianParts> {
    let c = &problem.coefficients;
    let (n, k) = (c.n, c.k);
    if x.len() != n || x_ref.len() != n || u.len() != k || u_ref.len() != k {
        return Err(FbsdeError::Dimension(format!("point must have x in R^{n} and u in R^{k}")));
    }
    if adj.p.len() != n || adj.q.len() != n || adj.big_p.shape() != (n, n) || adj.big_q.shape() != (n, n) {
        return Err(FbsdeError::Dimension("adjoint point has the wrong shape".into()));
    }
    if c.is_scalar() {
        let a = (adj.p[0], adj.q[0], adj.big_p[(0, 0)], adj.big_q[(0, 0)]);
        return Ok(scalar_hamiltonian_parts(problem, t, x[0], y, z, u[0], a, x_ref[0], u_ref[0]).into_parts());
    }
    Ok(general_hamiltonian_parts(problem, t, x, y, z, u, adj, x_ref, u_ref))
}

/// Scalar counterpart of [`HamiltonianParts`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScalarParts {
    pub h: f64,
    pub h_u: f64,
    pub h_uu: f64,
    pub mixed: f64,
    pub corrected: f64,
    pub corrected_u: f64,
    pub corrected_uu: f64,
    pub sigma_u: f64,
    pub f_z: f64,
    pub f_zu: f64,
    pub f_zz: f64,
    pub p_sigma_uu: f64,
}

impl ScalarParts {
    fn into_parts(self) -> HamiltonianParts {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        HamiltonianParts {
            h: self.h,
            h_u: DVector::from_element(1, self.h_u),
            h_uu: m(self.h_uu),
            mixed: m(self.mixed),
            corrected: self.corrected,
            corrected_u: DVector::from_element(1, self.corrected_u),
            corrected_uu: m(self.corrected_uu),
            sigma_u: m(self.sigma_u),
            f_z: self.f_z,
            f_zu: DVector::from_element(1, self.f_zu),
            f_zz: self.f_zz,
            p_sigma_uu: m(self.p_sigma_uu),
        }
    }

    /// `(first, second)` classical-singularity expressions with `p` and `P`.
    fn residuals(&self, p: f64, big_p: f64) -> (f64, f64) {
        let sp = self.sigma_u * p;
        let first = self.h_u + sp * self.f_z;
        let second = self.h_uu
            + self.sigma_u * big_p * self.sigma_u
            + self.p_sigma_uu * self.f_z
            + 2.0 * self.f_zu * sp
            + sp * sp * self.f_zz;
        (first, second)
    }
}

/// `adj = (p, q, P, Q)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scalar_hamiltonian_parts(
    problem: &Problem,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    u: f64,
    adj: (f64, f64, f64, f64),
    x_ref: f64,
    u_ref: f64,
) -> ScalarParts {
    let c = &problem.coefficients;
    let (p, q, pm, qm) = adj;
    let b = c.drift.scalar_jet(t, x, u);
    let s = c.diffusion.scalar_jet(t, x, u);
    let jet = c.generator.scalar_jet(t, x, y, z, u);
    let h_uu = jet.f_uu() + b.uu * p + s.uu * q;
    let h_xu = jet.f_xu() + b.xu * p + s.xu * q;
    let p_sigma_uu = s.uu * p;
    let h = p * b.value + q * s.value + jet.value;
    let h_u = b.u * p + s.u * q + jet.f_u();
    let mixed = h_xu + pm * b.u + qm * s.u + s.x * pm * s.u + p * jet.f_yu() + (s.x * p + q) * jet.f_zu();
    let ds = if x_ref == x && u_ref == u { 0.0 } else { s.value - c.diffusion.scalar_jet(t, x_ref, u_ref).value };
    let cj = if ds == 0.0 { jet } else { c.generator.scalar_jet(t, x, y, z + p * ds, u) };
    let sp = s.u * p;
    let pds = pm * ds;
    let corrected_uu = h_uu - jet.f_uu()
        + cj.f_uu()
        + s.u * pm * s.u
        + s.uu * pds
        + p_sigma_uu * cj.f_z()
        + sp * sp * cj.f_zz()
        + 2.0 * cj.f_zu() * sp;
    ScalarParts {
        h,
        h_u,
        h_uu,
        mixed,
        corrected: p * b.value + q * s.value + 0.5 * ds * pds + cj.value,
        corrected_u: b.u * p + s.u * q + s.u * pds + cj.f_u() + sp * cj.f_z(),
        corrected_uu,
        sigma_u: s.u,
        f_z: jet.f_z(),
        f_zu: jet.f_zu(),
        f_zz: jet.f_zz(),
        p_sigma_uu,
    }
}

#[allow(clippy::too_many_arguments)]
fn general_hamiltonian_parts(
    problem: &Problem,
    t: f64,
    x: &[f64],
    y: f64,
    z: f64,
    u: &[f64],
    adj: &AdjointPoint,
    x_ref: &[f64],
    u_ref: &[f64],
) -> HamiltonianParts {
    let c = &problem.coefficients;
    let (n, k) = (c.n, c.k);
    let (dr, df) = (c.drift.as_ref(), c.diffusion.as_ref());
    let (p, q, pm, qm) = (&adj.p, &adj.q, &adj.big_p, &adj.big_q);
    let b = dr.value(t, x, u);
    let s = df.value(t, x, u);
    let (b_u, s_u, s_x) = (dr.d_u(t, x, u), df.d_u(t, x, u), df.d_x(t, x, u));
    let (b_uu, s_uu) = (dr.d_uu(t, x, u), df.d_uu(t, x, u));
    let (b_xu, s_xu) = (dr.d_xu(t, x, u), df.d_xu(t, x, u));
    let jet = c.jet(t, x, y, z, u);
    let mut h_uu = jet.f_uu();
    let mut h_xu = jet.f_xu();
    let mut p_sigma_uu = DMatrix::zeros(k, k);
    for i in 0..n {
        h_uu += &b_uu[i] * p[i] + &s_uu[i] * q[i];
        h_xu += &b_xu[i] * p[i] + &s_xu[i] * q[i];
        p_sigma_uu += &s_uu[i] * p[i];
    }
    let h = p.dot(&b) + q.dot(&s) + jet.value;
    let h_u = b_u.transpose() * p + s_u.transpose() * q + jet.f_u();
    let mixed = (h_xu
        + pm * &b_u
        + qm * &s_u
        + s_x.transpose() * pm * &s_u
        + p * jet.f_yu().transpose()
        + (s_x.transpose() * p + q) * jet.f_zu().transpose())
    .transpose();

    let s_ref = df.value(t, x_ref, u_ref);
    let ds = &s - s_ref;
    let zs = z + p.dot(&ds);
    let cj = c.jet(t, x, y, zs, u);
    let sp = s_u.transpose() * p;
    let pds = pm * &ds;
    let mut corrected_uu = &h_uu - jet.f_uu() + cj.f_uu() + s_u.transpose() * pm * &s_u;
    for i in 0..n {
        corrected_uu += &s_uu[i] * pds[i];
    }
    corrected_uu += &p_sigma_uu * cj.f_z()
        + &sp * sp.transpose() * cj.f_zz()
        + cj.f_zu() * sp.transpose()
        + &sp * cj.f_zu().transpose();
    let corrected = p.dot(&b) + q.dot(&s) + 0.5 * ds.dot(&pds) + cj.value;
    let corrected_u = b_u.transpose() * p + s_u.transpose() * q + s_u.transpose() * &pds + cj.f_u() + &sp * cj.f_z();
    HamiltonianParts {
        h,
        h_u,
        h_uu,
        mixed,
        corrected,
        corrected_u,
        corrected_uu,
        sigma_u: s_u,
        f_z: jet.f_z(),
        f_zu: jet.f_zu(),
        f_zz: jet.f_zz(),
        p_sigma_uu,
    }
}

/// Evaluates every Hamiltonian at `(t, x, y, z, u)`; the sigma-corrected one
/// uses `sigma(t, x_ref, u_ref)` as its reference diffusion. All control
/// derivatives come from the analytic coefficient derivatives.
#[allow(clippy::too_many_arguments)]
pub fn eval_hamiltonians(
    problem: &Problem,
    t: f64,
    x: &[f64],
    y: f64,
    z: f64,
    u: &[f64],
    adj: &AdjointPoint,
    x_ref: &[f64],
    u_ref: &[f64],
) -> Result<HamiltonianRecord> {
    let hp = hamiltonian_parts(problem, t, x, y, z, u, adj, x_ref, u_ref)?;
    Ok(HamiltonianRecord {
        h: hp.h,
        h_u: hp.h_u.as_slice().to_vec(),
        h_uu: rows(&hp.h_uu),
        mixed: rows(&hp.mixed),
        corrected: hp.corrected,
        corrected_u: hp.corrected_u.as_slice().to_vec(),
        corrected_uu: rows(&hp.corrected_uu),
    })
}

/// Per-time summary line of a check.
#[derive(Debug, Clone, Serialize)]
pub struct TimeDiagnostic {
    pub t: f64,
    pub min_margin: f64,
    pub residual: f64,
}

/// Outcome of one condition check: passes iff `min_margin >= -tolerance` and
/// `complementarity_residual <= tolerance`.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub min_margin: f64,
    pub complementarity_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub per_time: Vec<TimeDiagnostic>,
    pub details: BTreeMap<String, f64>,
}

impl ConditionReport {
    fn new(
        name: &str,
        min_margin: f64,
        residual: f64,
        tolerance: f64,
        per_time: Vec<TimeDiagnostic>,
        details: BTreeMap<String, f64>,
    ) -> Self {
        let pass = min_margin >= -tolerance && residual <= tolerance;
        Self { name: name.into(), min_margin, complementarity_residual: residual, tolerance, pass, per_time, details }
    }
}

/// Default tolerance for Monte Carlo checks.
pub fn default_tolerance(standard_error: f64) -> f64 {
    1e-6f64.max(3.0 * standard_error)
}

/// Checks `frak_q K_i - frak_p' G_i >= 0` on every step and path, and that
/// `xi_bar` charges no step where that margin exceeds the tolerance. The
/// residual is the mean over paths of the mass placed on such steps.
pub fn check_singular_optimality(
    sing: &SingularAdjoint,
    g: &DMatrix<f64>,
    cost: &DVector<f64>,
    xi_bar: &PathTensor,
    grid: &TimeGrid,
    tolerance: Option<f64>,
) -> Result<ConditionReport> {
    let steps = grid.n_steps;
    let np = sing.frak_q.paths();
    let (n, m) = g.shape();
    if sing.frak_p.dim() != n || cost.len() != m || xi_bar.dim() != m || xi_bar.slots() != steps {
        return Err(FbsdeError::Dimension("singular optimality inputs have inconsistent shapes".into()));
    }
    let margin = |k: usize, p: usize, i: usize| -> f64 {
        let fp = sing.frak_p.get(k, p);
        sing.frak_q.scalar(k, p) * cost[i] - (0..n).map(|r| fp[r] * g[(r, i)]).sum::<f64>()
    };
    let mut min_margin = f64::INFINITY;
    let mut per_time = Vec::with_capacity(steps + 1);
    let mut per_path = vec![0.0; np];
    let provisional = tolerance.unwrap_or(1e-6);
    for k in 0..=steps {
        let mut mk = f64::INFINITY;
        let mut rk = 0.0;
        for p in 0..np {
            let xp = if xi_bar.paths() == 1 { 0 } else { p };
            for i in 0..m {
                let v = margin(k, p, i);
                mk = mk.min(v);
                if k < steps && v > provisional {
                    let mass = xi_bar.get(k, xp)[i];
                    per_path[p] += mass;
                    rk += mass / np as f64;
                }
            }
        }
        min_margin = min_margin.min(mk);
        per_time.push(TimeDiagnostic { t: grid.time(k), min_margin: mk, residual: rk });
    }
    let (residual, se) = mean_and_se(&per_path);
    let tol = tolerance.unwrap_or_else(|| default_tolerance(se));
    let mut details = BTreeMap::new();
    details.insert("residual_standard_error".into(), se);
    Ok(ConditionReport::new("singular_optimality", min_margin, residual, tol, per_time, details))
}

/// Convenience wrapper taking the singular control path.
pub fn check_singular_optimality_path(
    problem: &Problem,
    sing: &SingularAdjoint,
    xi_bar: &SingularControlPath,
    tolerance: Option<f64>,
) -> Result<ConditionReport> {
    let c = &problem.coefficients;
    check_singular_optimality(sing, &c.g, &c.cost, xi_bar.tensor(), &problem.grid, tolerance)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn max_abs_v(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Residuals of classical singularity along the reference trajectory:
/// `residual_i = |H_u + f_z sigma_u' p|` and
/// `residual_ii = |H_uu + sigma_u' P sigma_u + f_z sum p_i sigma^i_uu
///  + 2 sym(f_zu (sigma_u' p)') + f_zz (sigma_u' p)(sigma_u' p)'|`,
/// together with the corrected Hamiltonian derivatives at the reference point
/// and their discrepancy from the residuals.
pub fn check_classical_singularity(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    adj: &ClassicalAdjoints,
    tolerance: Option<f64>,
) -> Result<ConditionReport> {
    let steps = fwd.grid.n_steps;
    let np = fwd.n_paths();
    let mut res_i: f64 = 0.0;
    let mut res_ii: f64 = 0.0;
    let mut corr_u: f64 = 0.0;
    let mut corr_uu: f64 = 0.0;
    let mut disc_i: f64 = 0.0;
    let mut disc_ii: f64 = 0.0;
    let mut per_time = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = fwd.grid.time(k);
        let mut rk: f64 = 0.0;
        for p in 0..np {
            let (x, u) = (fwd.x.get(k, p), fwd.u.get(k, p));
            let (y, z) = (bwd.y.scalar(k, p), bwd.z.scalar(k, p));
            let [a, b, ca, cb, da, db] = if problem.coefficients.is_scalar() {
                let (pp, bp) = (adj.p.scalar(k, p), adj.big_p.scalar(k, p));
                let a4 = (pp, adj.q.scalar(k, p), bp, adj.big_q.scalar(k, p));
                let hp = scalar_hamiltonian_parts(problem, t, x[0], y, z, u[0], a4, x[0], u[0]);
                let (first, second) = hp.residuals(pp, bp);
                [
                    first.abs(),
                    second.abs(),
                    hp.corrected_u.abs(),
                    hp.corrected_uu.abs(),
                    (first - hp.corrected_u).abs(),
                    (second - hp.corrected_uu).abs(),
                ]
            } else {
                let ap = AdjointPoint::from_adjoints(adj, k, p);
                let hp = hamiltonian_parts(problem, t, x, y, z, u, &ap, x, u)?;
                let sp = hp.sigma_u.transpose() * &ap.p;
                let first = &hp.h_u + &sp * hp.f_z;
                let second = &hp.h_uu
                    + hp.sigma_u.transpose() * &ap.big_p * &hp.sigma_u
                    + &hp.p_sigma_uu * hp.f_z
                    + &hp.f_zu * sp.transpose()
                    + &sp * hp.f_zu.transpose()
                    + &sp * sp.transpose() * hp.f_zz;
                [
                    max_abs_v(&first),
                    max_abs(&second),
                    max_abs_v(&hp.corrected_u),
                    max_abs(&hp.corrected_uu),
                    max_abs_v(&(&first - &hp.corrected_u)),
                    max_abs(&(&second - &hp.corrected_uu)),
                ]
            };
            res_i = res_i.max(a);
            res_ii = res_ii.max(b);
            corr_u = corr_u.max(ca);
            corr_uu = corr_uu.max(cb);
            disc_i = disc_i.max(da);
            disc_ii = disc_ii.max(db);
            rk = rk.max(a.max(b));
        }
        per_time.push(TimeDiagnostic { t, min_margin: 0.0, residual: rk });
    }
    let mut details = BTreeMap::new();
    details.insert("residual_i".into(), res_i);
    details.insert("residual_ii".into(), res_ii);
    details.insert("corrected_u_max".into(), corr_u);
    details.insert("corrected_uu_max".into(), corr_uu);
    details.insert("equivalence_gap_i".into(), disc_i);
    details.insert("equivalence_gap_ii".into(), disc_ii);
    let tol = tolerance.unwrap_or(1e-6);
    Ok(ConditionReport::new("classical_singularity", 0.0, res_i.max(res_ii), tol, per_time, details))
}

/// Monte Carlo value of the second-order expansion integrand and of the
/// mixed-Hamiltonian integral `E int chi v' M x1 ds`.
#[derive(Debug, Clone, Serialize)]
pub struct VariationalValue {
    pub value: f64,
    pub standard_error: f64,
    pub mixed_integral: f64,
    pub mixed_standard_error: f64,
    /// `E int chi eps v'(H_u + f_z sigma_u' p) ds`, zero for classical-singular controls.
    pub first_order_part: f64,
    /// `E int chi eps^2/2 v'(H_uu + sigma_u' P sigma_u) v ds`.
    pub quadratic_part: f64,
}

/// Evaluates, per path and summed over steps with weight `chi dt`,
/// `eps^2/2 f_z sum p_i v' sigma^i_uu v + eps^2 v' M x1 + eps^2 (v.f_zu)(p' sigma_u v)
///  + eps v'(f_z sigma_u' p + H_u) + eps^2/2 v'(H_uu + sigma_u' P sigma_u) v`.
#[allow(clippy::too_many_arguments)]
pub fn variational_inequality_value(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    adj: &ClassicalAdjoints,
    x1: &PathTensor,
    direction: &crate::model::RegularControl,
    eps: f64,
) -> Result<VariationalValue> {
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let mut total = vec![0.0; np];
    let mut mixed = vec![0.0; np];
    let mut first = vec![0.0; np];
    let mut quad = vec![0.0; np];
    for k in 0..steps {
        let t = fwd.grid.time(k);
        for p in 0..np {
            let (x, u) = (fwd.x.get(k, p), fwd.u.get(k, p));
            let v = direction.value(k, p, t, x);
            let ap = AdjointPoint::from_adjoints(adj, k, p);
            let hp = hamiltonian_parts(problem, t, x, bwd.y.scalar(k, p), bwd.z.scalar(k, p), u, &ap, x, u)?;
            let chi = adj.chi.scalar(k, p);
            let sp = hp.sigma_u.transpose() * &ap.p;
            let x1v = DVector::from_column_slice(x1.get(k, p));
            let m = v.dot(&(&hp.mixed * &x1v));
            let a = 0.5 * eps * eps * hp.f_z * v.dot(&(&hp.p_sigma_uu * &v));
            let b = eps * eps * m;
            let c = eps * eps * v.dot(&hp.f_zu) * sp.dot(&v);
            let d = eps * v.dot(&(&hp.h_u + &sp * hp.f_z));
            let e = 0.5 * eps * eps * v.dot(&((&hp.h_uu + hp.sigma_u.transpose() * &ap.big_p * &hp.sigma_u) * &v));
            total[p] += chi * (a + b + c + d + e) * dt;
            mixed[p] += chi * m * dt;
            first[p] += chi * d * dt;
            quad[p] += chi * e * dt;
        }
    }
    let (value, se) = mean_and_se(&total);
    let (mi, mse) = mean_and_se(&mixed);
    Ok(VariationalValue {
        value,
        standard_error: se,
        mixed_integral: mi,
        mixed_standard_error: mse,
        first_order_part: mean_and_se(&first).0,
        quadratic_part: mean_and_se(&quad).0,
    })
}

/// `chi M` (k x n, row-major) on every step and path, with `M` the mixed Hamiltonian.
pub fn chi_mixed_process(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    adj: &ClassicalAdjoints,
) -> Result<PathTensor> {
    let (n, k) = (problem.coefficients.n, problem.coefficients.k);
    let steps = fwd.grid.n_steps;
    let np = fwd.n_paths();
    let mut out = PathTensor::zeros(steps, np, k * n);
    for s in 0..steps {
        let t = fwd.grid.time(s);
        if problem.coefficients.is_scalar() {
            for p in 0..np {
                let (x, u) = (fwd.x.scalar(s, p), fwd.u.scalar(s, p));
                let a4 = (adj.p.scalar(s, p), adj.q.scalar(s, p), adj.big_p.scalar(s, p), adj.big_q.scalar(s, p));
                let hp = scalar_hamiltonian_parts(problem, t, x, bwd.y.scalar(s, p), bwd.z.scalar(s, p), u, a4, x, u);
                out.set_scalar(s, p, hp.mixed * adj.chi.scalar(s, p));
            }
            continue;
        }
        for p in 0..np {
            let (x, u) = (fwd.x.get(s, p), fwd.u.get(s, p));
            let ap = AdjointPoint::from_adjoints(adj, s, p);
            let hp = hamiltonian_parts(problem, t, x, bwd.y.scalar(s, p), bwd.z.scalar(s, p), u, &ap, x, u)?;
            let m = hp.mixed * adj.chi.scalar(s, p);
            let dst = out.get_mut(s, p);
            for i in 0..k {
                for j in 0..n {
                    dst[i * n + j] = m[(i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// One time point of the first pointwise second-order condition.
#[derive(Debug, Clone, Serialize)]
pub struct PointwiseM1 {
    pub t: f64,
    pub quadratic_term: f64,
    /// Window-average derivative term for each window length in the α list.
    pub derivative_terms: Vec<Option<f64>>,
    /// `quadratic_term + max(derivative_terms)`.
    pub lhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointwiseM1Report {
    pub alphas: Vec<f64>,
    pub per_time: Vec<PointwiseM1>,
    pub min_lhs: f64,
}

/// First pointwise condition for a constant control value `u`:
/// `E<chi M b_u w, w> + D_r` with `w = u - ubar(r)` and `D_r` the maximum over
/// window lengths `alpha` (given in steps) of
/// `2/alpha^2 E sum_{t in (r, r+alpha]} sum_{s in [r, t)} <psi(s,t), Psi(r) Psi(s)^-1 sigma_u(s) w(s)> ds dt`,
/// where `psi` is the martingale kernel of `chi M' w`.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_m1(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    adj: &ClassicalAdjoints,
    transition: &TransitionMatrix,
    u: &[f64],
    alpha_steps: &[usize],
    mc: &McConfig,
) -> Result<PointwiseM1Report> {
    if alpha_steps.is_empty() || alpha_steps.contains(&0) {
        return Err(FbsdeError::InvalidParameter("the window list must be non-empty with positive lengths".into()));
    }
    let c = &problem.coefficients;
    let (n, k) = (c.n, c.k);
    if u.len() != k {
        return Err(FbsdeError::Dimension(format!("u must have length {k}")));
    }
    let steps = fwd.grid.n_steps;
    let dt = fwd.grid.dt();
    let np = fwd.n_paths();
    let chm = chi_mixed_process(problem, fwd, bwd, adj)?;
    let w_at = |s: usize, p: usize| DVector::from_iterator(k, u.iter().zip(fwd.u.get(s, p)).map(|(a, b)| a - b));
    let cm_at = |s: usize, p: usize| DMatrix::from_row_slice(k, n, chm.get(s, p));
    // Target chi M' w, its sensitivity direction sigma_u w and the quadratic term.
    let mut target = PathTensor::zeros(steps, np, n);
    let mut push = PathTensor::zeros(steps, np, n);
    let mut quad = vec![0.0; steps];
    for s in 0..steps {
        let t = fwd.grid.time(s);
        for p in 0..np {
            let (x, uu) = (fwd.x.get(s, p), fwd.u.get(s, p));
            let w = w_at(s, p);
            let cm = cm_at(s, p);
            let bu = c.drift.d_u(t, x, uu);
            let su = c.diffusion.d_u(t, x, uu);
            target.get_mut(s, p).copy_from_slice((cm.transpose() * &w).as_slice());
            push.get_mut(s, p).copy_from_slice((su * &w).as_slice());
            quad[s] += w.dot(&(&cm * bu * &w)) / np as f64;
        }
    }
    let max_lag = *alpha_steps.iter().max().expect("non-empty");
    let kernel = martingale_kernel(
        &target,
        &fwd.x,
        &fwd.dw,
        dt,
        &KernelOptions { degree: mc.degree, max_lag: Some(max_lag) },
    )?;
    let mut per_time = Vec::with_capacity(steps);
    let mut min_lhs = f64::INFINITY;
    for r in 0..steps {
        let mut terms = Vec::with_capacity(alpha_steps.len());
        for &a in alpha_steps {
            if r + a >= steps {
                terms.push(None);
                continue;
            }
            let mut acc = 0.0;
            for p in 0..np {
                let psi_r = transition.psi_at(r, p);
                for t in r + 1..=r + a {
                    for s in r..t {
                        let psi = kernel.evaluate(s, t, fwd.x.get(s, p))?;
                        let dir = &psi_r * transition.psi_inv_at(s, p) * DVector::from_column_slice(push.get(s, p));
                        acc += psi.dot(&dir);
                    }
                }
            }
            let alpha = a as f64 * dt;
            terms.push(Some(2.0 / (alpha * alpha) * acc / np as f64 * dt * dt));
        }
        let best = terms.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lhs = quad[r] + if best.is_finite() { best } else { 0.0 };
        min_lhs = min_lhs.min(lhs);
        per_time.push(PointwiseM1 { t: fwd.grid.time(r), quadratic_term: quad[r], derivative_terms: terms, lhs });
    }
    Ok(PointwiseM1Report {
        alphas: alpha_steps.iter().map(|a| *a as f64 * dt).collect(),
        per_time,
        min_lhs,
    })
}

/// Malliavin-type inputs for the second pointwise condition.
#[derive(Debug, Clone, Default)]
pub struct MalliavinInputs {
    /// Right-diagonal derivative of `chi M`, `n_steps` slots of k x n (row-major).
    pub nabla_chi_mixed: Option<PathTensor>,
    /// Right-diagonal derivative of the reference control, `n_steps` slots of dimension k.
    pub nabla_u_bar: Option<PathTensor>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointwiseM2Point {
    pub t: f64,
    pub min_lhs: f64,
    pub max_lhs: f64,
    pub mean_lhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointwiseM2Report {
    pub per_time: Vec<PointwiseM2Point>,
    pub min_lhs: f64,
}

/// Second pointwise condition for a constant control value `u`, per step and path:
/// `<chi M b_u w, w> + <nabla(chi M) sigma_u w, w> - <chi M sigma_u w, nabla ubar>`.
pub fn pointwise_m2(
    problem: &Problem,
    fwd: &ForwardPaths,
    bwd: &BackwardPaths,
    adj: &ClassicalAdjoints,
    u: &[f64],
    inputs: &MalliavinInputs,
) -> Result<PointwiseM2Report> {
    let k = problem.coefficients.k;
    if u.len() != k {
        return Err(FbsdeError::Dimension(format!("u must have length {k}")));
    }
    let chm = chi_mixed_process(problem, fwd, bwd, adj)?;
    pointwise_m2_from_mixed(problem, fwd, &chm, u, inputs)
}

/// [`pointwise_m2`] with a precomputed [`chi_mixed_process`], for scanning many `u`.
pub fn pointwise_m2_from_mixed(
    problem: &Problem,
    fwd: &ForwardPaths,
    chm: &PathTensor,
    u: &[f64],
    inputs: &MalliavinInputs,
) -> Result<PointwiseM2Report> {
    let c = &problem.coefficients;
    let (n, k) = (c.n, c.k);
    if u.len() != k {
        return Err(FbsdeError::Dimension(format!("u must have length {k}")));
    }
    let d_cm = inputs.nabla_chi_mixed.as_ref().ok_or_else(|| {
        FbsdeError::MissingInput("nabla_chi_mixed: the right-diagonal derivative of chi times the mixed Hamiltonian (compute it with malliavin::nabla)".into())
    })?;
    let d_u = inputs.nabla_u_bar.as_ref().ok_or_else(|| {
        FbsdeError::MissingInput("nabla_u_bar: the right-diagonal derivative of the reference control (compute it with malliavin::nabla)".into())
    })?;
    let steps = fwd.grid.n_steps;
    let np = fwd.n_paths();
    if d_cm.slots() != steps || d_cm.dim() != k * n || d_u.slots() != steps || d_u.dim() != k {
        return Err(FbsdeError::Dimension("Malliavin inputs must have n_steps slots of k x n and k".into()));
    }
    if chm.slots() != steps || chm.paths() != np || chm.dim() != k * n {
        return Err(FbsdeError::Dimension("chi-mixed process must match the forward paths".into()));
    }
    let mut per_time = Vec::with_capacity(steps);
    let mut min_lhs = f64::INFINITY;
    for r in 0..steps {
        let t = fwd.grid.time(r);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for p in 0..np {
            let (x, uu) = (fwd.x.get(r, p), fwd.u.get(r, p));
            if c.is_scalar() {
                let w = u[0] - uu[0];
                let cm = chm.scalar(r, p);
                let dcm = d_cm.scalar(r, if d_cm.paths() == 1 { 0 } else { p });
                let du = d_u.scalar(r, if d_u.paths() == 1 { 0 } else { p });
                let bu = c.drift.scalar_jet(t, x[0], uu[0]).u;
                let su = c.diffusion.scalar_jet(t, x[0], uu[0]).u;
                let lhs = cm * bu * w * w + dcm * su * w * w - cm * su * w * du;
                lo = lo.min(lhs);
                hi = hi.max(lhs);
                sum += lhs;
                continue;
            }
            let w = DVector::from_iterator(k, u.iter().zip(uu).map(|(a, b)| a - b));
            let cm = DMatrix::from_row_slice(k, n, chm.get(r, p));
            let dcm = DMatrix::from_row_slice(k, n, d_cm.get(r, if d_cm.paths() == 1 { 0 } else { p }));
            let du = DVector::from_column_slice(d_u.get(r, if d_u.paths() == 1 { 0 } else { p }));
            let bu = c.drift.d_u(t, x, uu);
            let su = c.diffusion.d_u(t, x, uu);
            let lhs = w.dot(&(&cm * bu * &w)) + w.dot(&(dcm * &su * &w)) - (cm * su * &w).dot(&du);
            lo = lo.min(lhs);
            hi = hi.max(lhs);
            sum += lhs;
        }
        min_lhs = min_lhs.min(lo);
        per_time.push(PointwiseM2Point { t, min_lhs: lo, max_lhs: hi, mean_lhs: sum / np as f64 });
    }
    Ok(PointwiseM2Report { per_time, min_lhs })
}

/// Both sides of the duality identity between the singular variation and the
/// singular adjoint.
#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// `y1[0]`.
    pub lhs: f64,
    /// `E sum_k sum_i (frak_q K_i - frak_p' G_i)(dxi - dxi_bar)_i[k]`.
    pub rhs: f64,
    pub gap: f64,
    pub standard_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `y1[0]` with the adjoint pairing; the standard error is that of
/// the pathwise difference between the two estimators.
pub fn duality_check(
    problem: &Problem,
    fwd: &ForwardPaths,
    sing: &SingularAdjoint,
    var: &SingularVariation,
    xi: &SingularControlPath,
) -> Result<DualityReport> {
    let c = &problem.coefficients;
    let steps = fwd.grid.n_steps;
    let np = fwd.n_paths();
    if xi.n_steps() != steps || xi.m() != c.m {
        return Err(FbsdeError::Dimension("perturbed singular control has the wrong shape".into()));
    }
    let mut rhs = vec![0.0; np];
    for p in 0..np {
        for k in 0..steps {
            let fp = DVector::from_column_slice(sing.frak_p.get(k, p));
            let fq = sing.frak_q.scalar(k, p);
            for i in 0..c.m {
                let d = xi.increment(k, p)[i] - fwd.dxi.get(k, p)[i];
                if d != 0.0 {
                    rhs[p] += (fq * c.cost[i] - fp.dot(&c.g.column(i))) * d;
                }
            }
        }
    }
    let (lhs, _) = var.initial_value();
    let r = rhs.iter().sum::<f64>() / np as f64;
    let diffs: Vec<f64> = var.pathwise.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let (_, se) = mean_and_se(&diffs);
    let tol = default_tolerance(se);
    let gap = (lhs - r).abs();
    Ok(DualityReport { lhs, rhs: r, gap, standard_error: se, tolerance: tol, pass: gap <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientSet, ControlRegion, PolynomialField, QuadraticGenerator, QuadraticTerminal};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn rich_problem(m: [f64; 10]) -> Problem {
        let mut h = DMatrix::zeros(4, 4);
        let mut idx = 0;
        for i in 0..4 {
            for j in i..4 {
                h[(i, j)] = m[idx];
                h[(j, i)] = m[idx];
                idx += 1;
            }
        }
        let c = CoefficientSet::new(
            1,
            1,
            Arc::new(PolynomialField::new(vec![(1, 0, -0.4), (0, 2, 0.7), (1, 1, 0.5), (2, 0, 0.1)])),
            Arc::new(PolynomialField::new(vec![(0, 0, 0.3), (0, 1, 0.8), (1, 2, -0.2), (2, 1, 0.3)])),
            Arc::new(QuadraticGenerator::new(0.1, DVector::from_vec(vec![0.2, -0.3, 0.4, 0.1]), h).unwrap()),
            Arc::new(QuadraticTerminal::linear(vec![1.0])),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        Problem::new("rich", c, ControlRegion::new(vec![-1.0], vec![1.0], 5).unwrap(), TimeGrid::new(0.0, 1.0, 4).unwrap(), vec![0.0])
            .unwrap()
    }

    proptest! {
        #[test]
        fn scalar_hamiltonian_matches_matrix_route(
            m in proptest::array::uniform10(-1.0f64..1.0),
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, u in -1.0f64..1.0,
            xr in -1.0f64..1.0, ur in -1.0f64..1.0,
            a in proptest::array::uniform4(-2.0f64..2.0),
        ) {
            let problem = rich_problem(m);
            let ap = AdjointPoint::scalar(a[0], a[1], a[2], a[3]);
            let g = general_hamiltonian_parts(&problem, 0.2, &[x], y, z, &[u], &ap, &[xr], &[ur]);
            let s = scalar_hamiltonian_parts(&problem, 0.2, x, y, z, u, (a[0], a[1], a[2], a[3]), xr, ur);
            let pairs = [
                (g.h, s.h),
                (g.h_u[0], s.h_u),
                (g.h_uu[(0, 0)], s.h_uu),
                (g.mixed[(0, 0)], s.mixed),
                (g.corrected, s.corrected),
                (g.corrected_u[0], s.corrected_u),
                (g.corrected_uu[(0, 0)], s.corrected_uu),
                (g.sigma_u[(0, 0)], s.sigma_u),
                (g.f_z, s.f_z),
                (g.f_zu[0], s.f_zu),
                (g.f_zz, s.f_zz),
                (g.p_sigma_uu[(0, 0)], s.p_sigma_uu),
            ];
            for (i, (l, r)) in pairs.iter().enumerate() {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()), "entry {i}: {l} vs {r}");
            }
            let sp = g.sigma_u.transpose() * &ap.p;
            let second = &g.h_uu
                + g.sigma_u.transpose() * &ap.big_p * &g.sigma_u
                + &g.p_sigma_uu * g.f_z
                + &g.f_zu * sp.transpose()
                + &sp * g.f_zu.transpose()
                + &sp * sp.transpose() * g.f_zz;
            let (first_s, second_s) = s.residuals(a[0], a[2]);
            prop_assert!(((&g.h_u + &sp * g.f_z)[0] - first_s).abs() <= 1e-12);
            prop_assert!((second[(0, 0)] - second_s).abs() <= 1e-12);
        }
    }
}
