//! The named studies. Each one fills a [`Collector`] and writes its artifacts
//! into the output directory.

use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use serde_json::json;

use fbsde_core::adjoint::{check_ratio_identity, solve_classical_adjoints, solve_singular_adjoint};
use fbsde_core::conditions::{
    check_classical_singularity, check_singular_optimality_path, chi_mixed_process, default_tolerance, duality_check,
    pointwise_m1, pointwise_m2_from_mixed, variational_inequality_value, ConditionReport, MalliavinInputs,
};
use fbsde_core::export::{
    write_adjoint_csv, write_condition_csv, write_json, write_paths_csv, write_study_csv, write_value_grid_csv,
};
use fbsde_core::hjb::{
    check_dpp_mp_connection, complementarity_residual, extract_feedback, solve_hjb_vi, verification_check,
    ExtractedFeedback, SpatialGrid, ValueGrid,
};
use fbsde_core::malliavin::{nabla, DeterministicProcess, MalliavinConfig};
use fbsde_core::model::{validate_coefficients, SingularControl, SingularControlPath};
use fbsde_core::paths::PathTensor;
use fbsde_core::simulate::cost_estimate;
use fbsde_core::variation::{convergence_study, solve_regular_variations, solve_singular_variation, transition_and_representation};
use fbsde_core::{
    evaluate_cost, simulate_forward, solve_bsde, BackwardPaths, ClassicalAdjoints, FbsdeError, ForwardPaths, McConfig,
    Perturbation, Problem, RegularControl, SingularAdjoint,
};

use crate::report::Collector;

/// Tolerance of the adjoint/value-function comparison.
const CONNECTION_TOL: f64 = 2e-2;
/// Tolerance of the ratio identity between the two adjoint families.
const RATIO_TOL: f64 = 5e-2;
/// Sample points for the derivative-oracle check.
const VALIDATION_POINTS: usize = 100;
/// Step size of the directional variational value.
const VARIATION_EPS: f64 = 0.1;

pub struct Context {
    pub problem: Problem,
    pub mc: McConfig,
    pub control: f64,
    pub n_x: usize,
    pub x_range: f64,
    pub levels: Vec<f64>,
    pub out: PathBuf,
    pub export_paths: Option<PathBuf>,
}

/// Reference trajectories with every adjoint family.
struct Reference {
    fwd: ForwardPaths,
    bwd: BackwardPaths,
    sing: SingularAdjoint,
    adj: ClassicalAdjoints,
}

impl Context {
    fn reference_control(&self) -> RegularControl {
        RegularControl::constant(vec![self.control; self.problem.coefficients.k])
    }

    fn zero_singular(&self) -> SingularControl {
        let p = &self.problem;
        SingularControl::Path(SingularControlPath::zero(p.grid.n_steps, p.coefficients.m))
    }

    fn forward(&self) -> Result<(ForwardPaths, BackwardPaths)> {
        let fwd = simulate_forward(&self.problem, &self.reference_control(), &self.zero_singular(), &self.mc)?;
        let bwd = solve_bsde(&self.problem, &fwd, &self.mc)?;
        Ok((fwd, bwd))
    }

    fn reference(&self) -> Result<Reference> {
        let (fwd, bwd) = self.forward()?;
        let sing = solve_singular_adjoint(&self.problem, &fwd, &bwd, &self.mc)?;
        let adj = solve_classical_adjoints(&self.problem, &fwd, &bwd, &self.mc)?;
        Ok(Reference { fwd, bwd, sing, adj })
    }

    fn file(&self, c: &mut Collector, name: &str) -> PathBuf {
        c.artifact(name);
        self.out.join(name)
    }

    fn export_reference(&self, c: &mut Collector, fwd: &ForwardPaths, bwd: &BackwardPaths) -> Result<()> {
        if let Some(path) = &self.export_paths {
            write_paths_csv(path, fwd, Some(bwd)).with_context(|| format!("writing {}", path.display()))?;
            c.artifact(&path.display().to_string());
        }
        Ok(())
    }
}

fn max_abs_diff(t: &PathTensor, value: f64) -> f64 {
    t.as_slice().iter().fold(0.0f64, |a, v| a.max((v - value).abs()))
}

fn slot_mean(t: &PathTensor, k: usize) -> f64 {
    let s = t.slot(k);
    s.iter().sum::<f64>() / s.len() as f64
}

pub fn validate(ctx: &Context, c: &mut Collector) -> Result<()> {
    match validate_coefficients(&ctx.problem, VALIDATION_POINTS, ctx.mc.seed) {
        Ok(r) => {
            c.at_most("derivative_oracles", r.max_error, 1e-4);
            c.result("validation", &r);
        }
        Err(FbsdeError::DerivativeMismatch { name, error, point }) => {
            c.record("derivative_oracles", false, error, 1e-4, format!("oracle {name} disagrees at {point:?}"));
            c.result("validation", json!({ "failed_oracle": name, "relative_error": error, "point": point }));
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

pub fn simulate(ctx: &Context, c: &mut Collector) -> Result<()> {
    let (fwd, bwd) = ctx.forward()?;
    let cost = cost_estimate(&bwd);
    c.result("cost", json!({ "value": cost.value, "standard_error": cost.standard_error }));
    c.result("regression_warnings", &bwd.warnings);
    match &ctx.export_paths {
        Some(_) => ctx.export_reference(c, &fwd, &bwd)?,
        None => write_paths_csv(&ctx.file(c, "paths.csv"), &fwd, Some(&bwd))?,
    }
    Ok(())
}

fn adjoint_block(ctx: &Context, c: &mut Collector, r: &Reference) -> Result<()> {
    let n = ctx.problem.grid.n_steps;
    let ratio = check_ratio_identity(&r.sing, &r.adj)?;
    c.at_most("ratio_identity", ratio, RATIO_TOL);
    let min_q = r.sing.frak_q.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    c.result(
        "adjoints",
        json!({
            "p0_mean": slot_mean(&r.adj.p, 0),
            "q0_mean": slot_mean(&r.adj.q, 0),
            "P0_mean": slot_mean(&r.adj.big_p, 0),
            "Q0_mean": slot_mean(&r.adj.big_q, 0),
            "chi_terminal_mean": slot_mean(&r.adj.chi, n),
            "frak_p0_mean": slot_mean(&r.sing.frak_p, 0),
            "frak_q_min": min_q,
            "chi_max_deviation_from_one": max_abs_diff(&r.adj.chi, 1.0),
            "frak_q_max_deviation_from_one": max_abs_diff(&r.sing.frak_q, 1.0),
            "ratio_deviation": ratio,
            "regression_warnings": { "classical": &r.adj.warnings, "singular": &r.sing.warnings },
        }),
    );
    write_adjoint_csv(&ctx.file(c, "adjoints.csv"), &r.fwd, &r.sing, &r.adj)?;
    Ok(())
}

pub fn adjoint(ctx: &Context, c: &mut Collector) -> Result<()> {
    let r = ctx.reference()?;
    ctx.export_reference(c, &r.fwd, &r.bwd)?;
    adjoint_block(ctx, c, &r)
}

/// Malliavin inputs for the second pointwise condition when `chi M` does not
/// depend on the path; the reference control is constant, so its derivative vanishes.
fn deterministic_inputs(ctx: &Context, fwd: &ForwardPaths, chm: &PathTensor) -> Result<Option<MalliavinInputs>> {
    let p = &ctx.problem;
    if !p.coefficients.is_scalar() {
        return Ok(None);
    }
    let steps = p.grid.n_steps;
    let constant = (0..fwd.n_paths()).all(|path| (0..steps).all(|k| chm.get(k, path) == chm.get(k, 0)));
    if !constant {
        return Ok(None);
    }
    let mut row: Vec<f64> = (0..steps).map(|k| chm.scalar(k, 0)).collect();
    row.push(row[steps - 1]);
    let dt = p.grid.dt();
    let cfg = MalliavinConfig::default();
    let dw0 = fwd.dw.series(0, 0);
    let d_chm = nabla(&DeterministicProcess { values: row, dim: 1 }, &dw0, dt, &cfg)?;
    let d_u = nabla(&DeterministicProcess { values: vec![ctx.control; steps + 1], dim: 1 }, &dw0, dt, &cfg)?;
    Ok(Some(MalliavinInputs {
        nabla_chi_mixed: Some(PathTensor::from_path_major(steps, 1, &[d_chm])),
        nabla_u_bar: Some(PathTensor::from_path_major(steps, 1, &[d_u])),
    }))
}

fn conditions_block(ctx: &Context, c: &mut Collector, r: &Reference) -> Result<()> {
    let p = &ctx.problem;
    let (steps, k) = (p.grid.n_steps, p.coefficients.k);
    let mut reports: Vec<ConditionReport> = Vec::new();

    let zero = SingularControlPath::zero(steps, p.coefficients.m);
    let so = check_singular_optimality_path(p, &r.sing, &zero, None)?;
    c.record("singular_optimality", so.pass, so.complementarity_residual, so.tolerance, format!("min margin {}", so.min_margin));
    reports.push(so);

    let scc = check_classical_singularity(p, &r.fwd, &r.bwd, &r.adj, None)?;
    c.at_most("residual_i", scc.details["residual_i"], scc.tolerance);
    c.at_most("residual_ii", scc.details["residual_ii"], scc.tolerance);
    c.result("classical_singularity", &scc.details);
    reports.push(scc);

    let atom = SingularControlPath::atom(steps, p.coefficients.m, steps / 2, 0, 1.0)?;
    let var = solve_singular_variation(p, &r.fwd, &r.bwd, &atom, &ctx.mc)?;
    let d = duality_check(p, &r.fwd, &r.sing, &var, &atom)?;
    c.at_most("duality", d.gap, d.tolerance);
    c.result("duality", &d);

    let mut variational = serde_json::Map::new();
    for (label, sign) in [("plus", 1.0), ("minus", -1.0)] {
        let shifted = vec![ctx.control + sign * VARIATION_EPS; k];
        if !p.region.contains(&shifted) {
            continue;
        }
        let dir = RegularControl::constant(vec![sign; k]);
        let v = solve_regular_variations(p, &r.fwd, &dir)?;
        let val = variational_inequality_value(p, &r.fwd, &r.bwd, &r.adj, &v.x1, &dir, VARIATION_EPS)?;
        c.at_least_zero(&format!("variational_value_{label}"), val.value, default_tolerance(val.standard_error));
        variational.insert(label.into(), serde_json::to_value(&val)?);
    }
    c.result("variational_value", variational);

    let (psi, _) = transition_and_representation(p, &r.fwd, &RegularControl::constant(vec![1.0; k]))?;
    let mut m1 = serde_json::Map::new();
    for (label, bound) in [("lower", &p.region.lower), ("upper", &p.region.upper)] {
        let u = bound.as_slice();
        let rep = pointwise_m1(p, &r.fwd, &r.bwd, &r.adj, &psi, u, &[4, 2, 1], &ctx.mc)?;
        c.at_least_zero(&format!("pointwise_m1_{label}"), rep.min_lhs, 1e-6);
        m1.insert(label.into(), json!({ "u": u, "min_lhs": rep.min_lhs, "alphas": rep.alphas }));
    }
    c.result("pointwise_m1", m1);

    let chm = chi_mixed_process(p, &r.fwd, &r.bwd, &r.adj)?;
    match deterministic_inputs(ctx, &r.fwd, &chm)? {
        Some(inputs) => {
            let (mut min_lhs, mut at_ref) = (f64::INFINITY, f64::NAN);
            for u in p.region.discretize() {
                let rep = pointwise_m2_from_mixed(p, &r.fwd, &chm, u.as_slice(), &inputs)?;
                min_lhs = min_lhs.min(rep.min_lhs);
                if (u[0] - ctx.control).abs() <= 1e-12 {
                    at_ref = rep.min_lhs;
                }
            }
            c.at_least_zero("pointwise_m2", min_lhs, 1e-8);
            c.result("pointwise_m2", json!({ "min_lhs": min_lhs, "min_lhs_at_reference": at_ref }));
        }
        None => c.result("pointwise_m2", json!({ "skipped": "chi M depends on the path; supply Malliavin inputs" })),
    }

    write_json(&ctx.file(c, "conditions.json"), &reports)?;
    write_condition_csv(&ctx.file(c, "conditions.csv"), &reports)?;
    Ok(())
}

pub fn check(ctx: &Context, c: &mut Collector) -> Result<()> {
    let r = ctx.reference()?;
    ctx.export_reference(c, &r.fwd, &r.bwd)?;
    conditions_block(ctx, c, &r)
}

fn hjb_block(ctx: &Context, c: &mut Collector) -> Result<(ValueGrid, ExtractedFeedback)> {
    let p = &ctx.problem;
    if !p.coefficients.is_scalar() {
        bail!("the hjb study needs a scalar problem (n = k = 1)");
    }
    let x0 = p.x0[0];
    let space = SpatialGrid::new(x0 - ctx.x_range, x0 + ctx.x_range, ctx.n_x)?;
    let vg = solve_hjb_vi(p, &space)?;
    let res = complementarity_residual(&vg, p)?;
    c.at_most("hjb_complementarity", res.max, 1e-6);
    let fb = extract_feedback(&vg, p)?;
    let cost = evaluate_cost(p, &fb.regular, &fb.singular, &ctx.mc)?;
    let v0 = vg.value_at(0, x0);
    let tol = (3.0 * cost.standard_error).max(5.0 * (space.h() + p.grid.dt()));
    c.at_most("hjb_value_vs_monte_carlo", (v0 - cost.value).abs(), tol);
    c.result(
        "hjb",
        json!({
            "value_at_x0": v0,
            "monte_carlo_cost": cost.value,
            "monte_carlo_standard_error": cost.standard_error,
            "complementarity_max": res.max,
            "complementarity_per_time": res.per_time,
            "push_cells": fb.push_cells,
            "max_iterations": vg.iterations.iter().max(),
            "free_boundaries": vg.free_boundaries(),
        }),
    );
    write_value_grid_csv(&ctx.file(c, "value_grid.csv"), &vg)?;
    Ok((vg, fb))
}

pub fn hjb(ctx: &Context, c: &mut Collector) -> Result<()> {
    hjb_block(ctx, c).map(|_| ())
}

pub fn study(ctx: &Context, c: &mut Collector) -> Result<()> {
    let k = ctx.problem.coefficients.k;
    let pert = Perturbation::Regular {
        reference: RegularControl::constant(vec![ctx.control; k]),
        direction: RegularControl::constant(vec![1.0; k]),
    };
    let s = convergence_study(&ctx.problem, &pert, &ctx.levels, &ctx.mc)?;
    for (norm, target) in [("first_order", 1.8), ("second_order", 2.5)] {
        match s.slopes.get(norm).copied().flatten() {
            Some(slope) => c.record(&format!("{norm}_slope"), slope >= target, slope, target, String::new()),
            None => {
                let max = s.max_values.get(norm).copied().unwrap_or(0.0);
                c.record(&format!("{norm}_slope"), true, max, target, "remainder is zero to machine precision".into());
            }
        }
    }
    c.result("slopes", &s.slopes);
    c.result("max_values", &s.max_values);
    write_study_csv(&ctx.file(c, "study.csv"), &s)?;
    write_json(&ctx.file(c, "study.json"), &s)?;
    Ok(())
}

/// Reference solve, adjoints and every condition at the reference control,
/// then the HJB solve and the comparison of its gradient with the adjoints
/// along the feedback trajectory.
pub fn example(ctx: &Context, c: &mut Collector) -> Result<()> {
    validate(ctx, c)?;
    let r = ctx.reference()?;
    ctx.export_reference(c, &r.fwd, &r.bwd)?;
    let cost = cost_estimate(&r.bwd);
    c.result("cost", json!({ "value": cost.value, "standard_error": cost.standard_error }));
    adjoint_block(ctx, c, &r)?;
    conditions_block(ctx, c, &r)?;

    let (vg, fb) = hjb_block(ctx, c)?;
    let p = &ctx.problem;
    let fwd = simulate_forward(p, &fb.regular, &fb.singular, &ctx.mc)?;
    let bwd = solve_bsde(p, &fwd, &ctx.mc)?;
    let adj = solve_classical_adjoints(p, &fwd, &bwd, &ctx.mc)?;
    let conn = check_dpp_mp_connection(p, &vg, &fwd, &adj, CONNECTION_TOL)?;
    c.at_most("gradient_matches_adjoint", conn.max_gradient_gap, conn.tolerance);
    c.at_most("P_below_vxx", conn.max_p_excess, conn.tolerance);
    c.at_least_zero("push_margin", conn.min_push_margin, 0.0);
    c.result("connection", &conn);
    let ver = verification_check(p, &vg, &fwd)?;
    c.record("verification", ver.pass && ver.inequality_pass, ver.integral, ver.tolerance, String::new());
    c.result("verification", &ver);
    Ok(())
}
