mod common;

use common::{affine, generator, no_push, terminal, Scalar};
use fbsde_core::hjb::{
    check_dpp_mp_connection, complementarity_residual, extract_feedback, semiconcavity_check, solve_hjb_penalty,
    superjet_probe, verification_check,
};
use fbsde_core::model::ControlRegion;
use fbsde_core::problem_file::builtin_problem;
use fbsde_core::{
    evaluate_cost, simulate_forward, solve_bsde, solve_classical_adjoints, solve_hjb_vi, worked_example, FbsdeError,
    McConfig, Problem, RegularControl, SpatialGrid, TimeGrid, ValueGrid,
};

fn grid_for(p: &Problem, half_width: f64, n_x: usize) -> SpatialGrid {
    let _ = p;
    SpatialGrid::new(-half_width, half_width, n_x).unwrap()
}

fn center_vxx(vg: &ValueGrid, k: usize) -> f64 {
    let i = vg.space.nearest(0.0);
    let h = vg.space.h();
    (vg.v[k][i + 1] - 2.0 * vg.v[k][i] + vg.v[k][i - 1]) / (h * h)
}

#[test]
fn spatial_grid_invariants() {
    assert!(SpatialGrid::new(1.0, -1.0, 10).is_err());
    assert!(SpatialGrid::new(-1.0, 1.0, 2).is_err());
    let g = SpatialGrid::new(-1.0, 1.0, 5).unwrap();
    assert_eq!(g.h(), 0.5);
    assert_eq!(g.x(4), 1.0);
    assert_eq!(g.nearest(0.3), 3);
}

#[test]
fn worked_example_value_is_zero_at_origin() {
    let p = worked_example().with_steps(100);
    let vg = solve_hjb_vi(&p, &grid_for(&p, 2.0, 201)).unwrap();
    assert!(vg.value_at(0, 0.0).abs() <= 1e-3);
    assert_eq!(vg.push_cells(), 0);
    assert!(vg.v[p.grid.n_steps].iter().enumerate().all(|(i, v)| *v == 0.5 * vg.space.x(i).powi(2)));
    assert!(complementarity_residual(&vg, &p).unwrap().max <= 1e-6);
}

#[test]
fn three_point_obstacle_problem() {
    // f = b = sigma = 0, G = K = 1, Phi = -5x on {-1, 0, 1}, one step:
    // v = min(Phi, v(x + h) + K h) gives [-3, -4, -5] with pushes at the first two cells.
    let mut p = Scalar { terminal: terminal(0.0, -5.0, 0.0), steps: 1, ..Default::default() }.build();
    p.region = ControlRegion::new(vec![-1.0], vec![1.0], 3).unwrap();
    let vg = solve_hjb_vi(&p, &SpatialGrid::new(-1.0, 1.0, 3).unwrap()).unwrap();
    let expected = [-3.0, -4.0, -5.0];
    for i in 0..3 {
        assert!((vg.v[0][i] - expected[i]).abs() <= 1e-12, "{:?}", vg.v[0]);
    }
    assert_eq!(vg.push[0], vec![Some(0), Some(0), None]);
    assert!(complementarity_residual(&vg, &p).unwrap().max <= 1e-10);
}

#[test]
fn pure_running_cost() {
    let p = builtin_problem("running_cost").unwrap().with_steps(50);
    let vg = solve_hjb_vi(&p, &grid_for(&p, 1.0, 41)).unwrap();
    let dt = p.grid.dt();
    for k in 0..=50 {
        for v in &vg.v[k] {
            assert!((v - (1.0 - p.grid.time(k))).abs() <= 2.0 * dt);
        }
    }
}

#[test]
fn injected_defect_is_measured() {
    let p = builtin_problem("running_cost").unwrap().with_steps(10);
    let space = SpatialGrid::new(-1.0, 1.0, 11).unwrap();
    let mut vg = ValueGrid::from_fn(p.grid, space, 1, |t, _| 1.0 - t);
    assert!(complementarity_residual(&vg, &p).unwrap().max <= 1e-12);
    let dt = p.grid.dt();
    vg.v[4][5] += 0.01 * dt;
    let r = complementarity_residual(&vg, &p).unwrap();
    assert!((r.max - 0.01).abs() <= 1e-10, "{}", r.max);
}

#[test]
fn non_convergent_step_reports_history() {
    let p = Scalar { generator: generator(0.0, [0.0, 1e4, 0.0, 0.0], &[]), terminal: terminal(1.0, 0.0, 0.0), steps: 4, g: 0.0, ..Default::default() }
        .build();
    match solve_hjb_vi(&p, &SpatialGrid::new(-1.0, 1.0, 5).unwrap()).unwrap_err() {
        FbsdeError::NoConvergence { time_index, history } => {
            assert_eq!(time_index, 3);
            assert!(!history.is_empty());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn feedback_of_worked_example() {
    let p = worked_example().with_steps(50);
    let vg = solve_hjb_vi(&p, &grid_for(&p, 2.0, 101)).unwrap();
    let i = vg.space.nearest(0.0);
    assert!(vg.u_star.iter().all(|row| row[i][0] == 0.0));
    let fb = extract_feedback(&vg, &p).unwrap();
    assert_eq!(fb.push_cells, 0);
}

#[test]
fn linear_reward_drives_control_to_the_bound() {
    // f = -u, b = u, sigma = 0, Phi = 0: v = -(T - t) and u* = 1 everywhere inside.
    let p = Scalar { drift: affine(0.0, 1.0, 0.0), generator: generator(0.0, [0.0, 0.0, 0.0, -1.0], &[]), g: 0.0, ..Default::default() }
        .build();
    let vg = solve_hjb_vi(&p, &grid_for(&p, 1.0, 21)).unwrap();
    for row in &vg.u_star[..p.grid.n_steps] {
        assert!(row[1..20].iter().all(|u| u[0] == 1.0));
    }
    assert!((vg.value_at(0, 0.0) + 1.0).abs() <= 1e-10);
}

#[test]
fn jet_of_smooth_quadratic() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let space = SpatialGrid::new(-1.0, 1.0, 41).unwrap();
    let vg = ValueGrid::from_fn(grid, space, 1, |_, x| 0.5 * x * x);
    for i in [10, 20, 27] {
        let r = superjet_probe(&vg, 5, i, 3).unwrap();
        assert!((r.q_bar - space.x(i)).abs() <= 1e-8);
        assert!((r.theta_bar - 1.0).abs() <= 1e-8);
        assert!(r.p_bar.abs() <= 1e-8);
        assert!(r.in_superjet && r.in_subjet);
    }
    assert!(superjet_probe(&vg, 5, 20, 1).is_err());
    assert!(superjet_probe(&vg, 5, 1, 3).is_err());
}

#[test]
fn jet_at_a_kink() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let space = SpatialGrid::new(-1.0, 1.0, 41).unwrap();
    let up = ValueGrid::from_fn(grid, space, 1, |_, x: f64| x.abs());
    let r = superjet_probe(&up, 5, 20, 3).unwrap();
    assert!(r.q_bar.abs() <= 1.0);
    assert!(r.in_subjet && !r.in_superjet);
    let down = ValueGrid::from_fn(grid, space, 1, |_, x: f64| -x.abs());
    let r = superjet_probe(&down, 5, 20, 3).unwrap();
    assert!(r.in_superjet && !r.in_subjet);
}

#[test]
fn connection_for_linear_value() {
    // f = b = sigma = 0, Phi = x, G = 0: v = x and p = 1.
    let p = Scalar { terminal: terminal(0.0, 1.0, 0.0), g: 0.0, k: 0.7, x0: 0.2, ..Default::default() }.build();
    let vg = solve_hjb_vi(&p, &grid_for(&p, 1.0, 41)).unwrap();
    let mc = McConfig::new(50, 1);
    let fwd = simulate_forward(&p, &RegularControl::constant(vec![0.0]), &no_push(&p), &mc).unwrap();
    let bwd = solve_bsde(&p, &fwd, &mc).unwrap();
    let adj = solve_classical_adjoints(&p, &fwd, &bwd, &mc).unwrap();
    let r = check_dpp_mp_connection(&p, &vg, &fwd, &adj, 1e-8).unwrap();
    assert!(r.max_gradient_gap <= 1e-10, "{}", r.max_gradient_gap);
    assert_eq!(r.min_push_margin, 0.7);
    assert!(r.margin_pass && r.gradient_pass);
}

#[test]
fn trajectory_outside_grid_is_rejected() {
    let p = worked_example().with_steps(20);
    let vg = solve_hjb_vi(&p, &grid_for(&p, 0.1, 11)).unwrap();
    let mc = McConfig::new(20, 1);
    let fwd = simulate_forward(&p, &RegularControl::constant(vec![1.0]), &no_push(&p), &mc).unwrap();
    let bwd = solve_bsde(&p, &fwd, &mc).unwrap();
    let adj = solve_classical_adjoints(&p, &fwd, &bwd, &mc).unwrap();
    let err = check_dpp_mp_connection(&p, &vg, &fwd, &adj, 1e-2).unwrap_err();
    assert!(matches!(err, FbsdeError::OutsideGrid { .. }));
}

#[test]
fn semiconcavity_examples() {
    let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let space = SpatialGrid::new(-1.0, 1.0, 41).unwrap();
    let quad = ValueGrid::from_fn(grid, space, 1, |_, x| 0.5 * x * x);
    assert!(semiconcavity_check(&quad, 1.0).pass);
    let quartic = ValueGrid::from_fn(grid, space, 1, |_, x: f64| x.powi(4));
    assert!(semiconcavity_check(&quartic, 6.0).pass);
    assert!(!semiconcavity_check(&quartic, 5.0).pass);
    let kink = ValueGrid::from_fn(grid, space, 1, |_, x: f64| x.abs());
    assert!(!semiconcavity_check(&kink, 10.0).pass);
}

#[test]
fn value_is_monotone_in_push_cost() {
    let base = builtin_problem("singular_push").unwrap().with_steps(50);
    let space = SpatialGrid::new(-2.0, 2.0, 81).unwrap();
    let mut cheap = base.clone();
    cheap.coefficients.cost[0] = 0.2;
    let mut dear = base.clone();
    dear.coefficients.cost[0] = 2.0;
    let (a, b) = (solve_hjb_vi(&cheap, &space).unwrap(), solve_hjb_vi(&dear, &space).unwrap());
    assert!(a.push_cells() > 0);
    for k in 0..=50 {
        for i in 0..81 {
            assert!(b.v[k][i] >= a.v[k][i] - 1e-12);
        }
    }
}

#[test]
fn push_cells_satisfy_the_gradient_constraint() {
    let mut p = builtin_problem("singular_push").unwrap().with_steps(50);
    p.coefficients.cost[0] = 0.2;
    let space = SpatialGrid::new(-2.0, 2.0, 81).unwrap();
    let vg = solve_hjb_vi(&p, &space).unwrap();
    let h = space.h();
    let g = p.coefficients.g[(0, 0)];
    for k in 0..50 {
        for i in 1..80 {
            if vg.push[k][i].is_some() {
                let vx = if g > 0.0 { (vg.v[k][i + 1] - vg.v[k][i]) / h } else { (vg.v[k][i] - vg.v[k][i - 1]) / h };
                assert!((vx * g + p.coefficients.cost[0]).abs() <= 10.0 * h);
            }
        }
    }
    assert!(complementarity_residual(&vg, &p).unwrap().max <= 1e-6);
}

#[test]
fn penalty_solver_agrees_with_projection() {
    let mut p = builtin_problem("singular_push").unwrap().with_steps(50);
    p.coefficients.cost[0] = 0.2;
    let space = SpatialGrid::new(-2.0, 2.0, 81).unwrap();
    let a = solve_hjb_vi(&p, &space).unwrap();
    let gap = |lambda: f64| {
        let b = solve_hjb_penalty(&p, &space, lambda).unwrap();
        a.v.iter().flatten().zip(b.v.iter().flatten()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    let (g4, g6) = (gap(1e4), gap(1e6));
    assert!(g6 <= 1e-3, "{g6}");
    assert!((0.005..=0.02).contains(&(g6 / g4)), "{g4} {g6}");
    assert!(solve_hjb_penalty(&p, &space, 0.0).is_err());
}

#[test]
fn feedback_cost_matches_value() {
    let p = builtin_problem("running_cost").unwrap().with_steps(50);
    let space = SpatialGrid::new(-1.0, 1.0, 41).unwrap();
    let vg = solve_hjb_vi(&p, &space).unwrap();
    let fb = extract_feedback(&vg, &p).unwrap();
    let cost = evaluate_cost(&p, &fb.regular, &fb.singular, &McConfig::new(2000, 3)).unwrap();
    let tol = (3.0 * cost.standard_error).max(5.0 * (space.h() + p.grid.dt()));
    assert!((vg.value_at(0, p.x0[0]) - cost.value).abs() <= tol);
    let fwd = simulate_forward(&p, &fb.regular, &fb.singular, &McConfig::new(500, 4)).unwrap();
    let r = verification_check(&p, &vg, &fwd).unwrap();
    assert!(r.pass && r.inequality_pass, "{} (tol {})", r.integral, r.tolerance);
}

/// `a' = a^2 / (a + 2)` backward from `a(1) = 1` by RK4.
fn riccati_at_zero() -> f64 {
    let rhs = |a: f64| a * a / (a + 2.0);
    let (mut a, h) = (1.0, 1e-4);
    for _ in 0..10_000 {
        let k1 = rhs(a);
        let k2 = rhs(a - 0.5 * h * k1);
        let k3 = rhs(a - 0.5 * h * k2);
        let k4 = rhs(a - h * k3);
        a -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    a
}

#[test]
fn worked_example_curvature_depends_on_control_resolution() {
    // With U = [-1, 1] in steps of 0.05 the optimal control rounds to 0 near
    // the origin and v_xx(0, 0) stays at the terminal curvature 1. With a fine
    // control grid the curvature follows the Riccati value a(0) < 1, where
    // v = a(t) x^2 / 2 solves the unconstrained problem.
    let coarse = worked_example().with_steps(100);
    let space = SpatialGrid::new(-1.0, 1.0, 201).unwrap();
    let vg = solve_hjb_vi(&coarse, &space).unwrap();
    assert!((center_vxx(&vg, 0) - 1.0).abs() <= 1e-6, "{}", center_vxx(&vg, 0));

    let mut fine = worked_example().with_steps(100);
    fine.region = ControlRegion::new(vec![-0.5], vec![0.5], 1001).unwrap();
    let space = SpatialGrid::new(-1.0, 1.0, 401).unwrap();
    let vg = solve_hjb_vi(&fine, &space).unwrap();
    let a0 = riccati_at_zero();
    assert!((a0 - 0.7408).abs() <= 1e-4);
    // Chord curvature away from the origin, where the upwind first difference
    // of a quadratic carries an O(a h) offset comparable to the gradient.
    let (c, x) = (space.nearest(0.0), 0.3);
    let j = space.nearest(x) - c;
    let chord = (vg.v[0][c + j] + vg.v[0][c - j] - 2.0 * vg.v[0][c]) / (x * x);
    assert!((chord - a0).abs() <= 5e-3, "{chord} vs {a0}");
    assert!(chord < 0.76);
}
