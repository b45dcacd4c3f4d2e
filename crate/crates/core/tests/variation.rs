mod common;

use std::sync::Arc;

use common::{affine, generator, max_abs, no_push, terminal, Scalar};
use fbsde_core::model::{AffineField, CoefficientSet, ControlRegion, QuadraticGenerator, QuadraticTerminal, TimeGrid};
use fbsde_core::problem_file::builtin_problem;
use fbsde_core::simulate::ForwardPaths;
use fbsde_core::variation::{solve_regular_variations, solve_singular_variation, transition_and_representation};
use fbsde_core::{
    convergence_study, evaluate_cost, simulate_forward, solve_bsde, worked_example, FbsdeError, McConfig,
    Perturbation, Problem, RegularControl, SingularControl, SingularControlPath,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn forward(p: &Problem, u: f64, mc: &McConfig) -> ForwardPaths {
    simulate_forward(p, &RegularControl::constant(vec![u]), &no_push(p), mc).unwrap()
}

fn singular_response(p: &Problem, xi: &SingularControlPath, mc: &McConfig) -> fbsde_core::variation::SingularVariation {
    let fwd = forward(p, 0.0, mc);
    let bwd = solve_bsde(p, &fwd, mc).unwrap();
    solve_singular_variation(p, &fwd, &bwd, xi, mc).unwrap()
}

#[test]
fn zero_perturbation_gives_zero_response() {
    let p = builtin_problem("linear_singular").unwrap();
    let v = singular_response(&p, &SingularControlPath::zero(p.grid.n_steps, 1), &McConfig::new(300, 1));
    assert_eq!(max_abs(v.x1.as_slice(), 0.0), 0.0);
    assert_eq!(max_abs(v.y1.as_slice(), 0.0), 0.0);
    assert_eq!(max_abs(v.z1.as_slice(), 0.0), 0.0);
}

#[test]
fn unit_atom_response_matches_cost_quotient() {
    // b = sigma = f = 0, G = K = 1: x1 jumps to 1 after the atom, and y1[0]
    // equals the exact change in cost per unit of added mass.
    for (slope, expected) in [(1.0, 2.0), (0.0, 1.0)] {
        let p = Scalar { terminal: terminal(0.0, slope, 0.0), ..Default::default() }.build();
        let mc = McConfig::new(6, 2);
        let k0 = 7;
        let xi = SingularControlPath::atom(20, 1, k0, 0, 1.0).unwrap();
        let v = singular_response(&p, &xi, &mc);
        for k in 0..=20 {
            assert_eq!(v.x1.scalar(k, 0), if k > k0 { 1.0 } else { 0.0 });
        }
        let (y0, _) = v.initial_value();
        let base = evaluate_cost(&p, &RegularControl::constant(vec![0.0]), &no_push(&p), &mc).unwrap();
        let pushed = evaluate_cost(&p, &RegularControl::constant(vec![0.0]), &SingularControl::Path(xi), &mc).unwrap();
        assert!((y0 - expected).abs() <= 1e-12, "{y0}");
        assert!((y0 - (pushed.value - base.value)).abs() <= 1e-12);
    }
}

#[test]
fn regular_variation_of_worked_example() {
    let p = worked_example();
    let mc = McConfig::new(4000, 3);
    let fwd = forward(&p, 0.0, &mc);
    let var = solve_regular_variations(&p, &fwd, &RegularControl::constant(vec![1.0])).unwrap();
    let dt = p.grid.dt();
    for path in 0..50 {
        let mut w = 0.0;
        for k in 0..=p.grid.n_steps {
            assert!((var.x1.scalar(k, path) - (k as f64 * dt + w)).abs() <= 1e-12);
            if k < p.grid.n_steps {
                w += fwd.dw.scalar(k, path);
            }
        }
    }
    assert_eq!(max_abs(var.x2.as_slice(), 0.0), 0.0);
    let n = p.grid.n_steps;
    let vals: Vec<f64> = (0..4000).map(|q| var.x1.scalar(n, q)).collect();
    let mean = vals.iter().sum::<f64>() / 4000.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3999.0).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * sd / 4000f64.sqrt());

    let zero = solve_regular_variations(&p, &fwd, &RegularControl::constant(vec![0.0])).unwrap();
    assert_eq!(max_abs(zero.x1.as_slice(), 0.0), 0.0);
    assert_eq!(max_abs(zero.x2.as_slice(), 0.0), 0.0);
}

#[test]
fn identity_flow_representation() {
    let p = worked_example();
    let fwd = forward(&p, 0.0, &McConfig::new(200, 4));
    let dir = RegularControl::constant(vec![1.0]);
    let (psi, x1) = transition_and_representation(&p, &fwd, &dir).unwrap();
    assert_eq!(max_abs(psi.psi.as_slice(), 1.0), 0.0);
    assert_eq!(max_abs(psi.psi_inv.as_slice(), 1.0), 0.0);
    let direct = solve_regular_variations(&p, &fwd, &dir).unwrap();
    let gap = x1.as_slice().iter().zip(direct.x1.as_slice()).fold(0.0f64, |a, (r, d)| a.max((r - d).abs()));
    assert!(gap <= 1e-10, "{gap}");
}

#[test]
fn linear_drift_representation_matches_ode() {
    let a = 0.8;
    let p = Scalar { drift: affine(a, 1.0, 0.0), steps: 400, ..Default::default() }.build();
    let fwd = forward(&p, 0.0, &McConfig::new(4, 1));
    let (psi, x1) = transition_and_representation(&p, &fwd, &RegularControl::constant(vec![1.0])).unwrap();
    let exact = (a.exp() - 1.0) / a;
    assert!((x1.scalar(400, 0) / exact - 1.0).abs() <= 2.0 * p.grid.dt());
    for k in 0..=400 {
        assert!((psi.psi_at(k, 0) * psi.psi_inv_at(k, 0))[(0, 0)] - 1.0 <= 1e-8);
    }
}

fn representation_gap_slope(sigma_x: f64) -> (f64, Vec<f64>) {
    let levels = [25usize, 50, 100, 200];
    let gaps: Vec<f64> = levels
        .iter()
        .map(|&n| {
            let p = Scalar { drift: affine(0.8, 1.0, 0.0), diffusion: affine(sigma_x, 0.5, 0.2), steps: n, ..Default::default() }
                .build();
            let fwd = forward(&p, 0.0, &McConfig::new(400, 9));
            let dir = RegularControl::constant(vec![1.0]);
            let (_, rep) = transition_and_representation(&p, &fwd, &dir).unwrap();
            let direct = solve_regular_variations(&p, &fwd, &dir).unwrap();
            (0..400).map(|q| (rep.scalar(n, q) - direct.x1.scalar(n, q)).powi(2)).sum::<f64>().sqrt() / 20.0
        })
        .collect();
    let dts: Vec<f64> = levels.iter().map(|n| 1.0 / *n as f64).collect();
    (fbsde_core::variation::fit_slope(&dts, &gaps).unwrap(), gaps)
}

#[test]
fn representation_gap_is_first_order_without_state_noise() {
    let (slope, gaps) = representation_gap_slope(0.0);
    assert!(slope >= 0.8, "slope {slope}, gaps {gaps:?}");
}

#[test]
fn representation_gap_is_half_order_with_state_noise() {
    // The correction term -sigma_x sigma_u dr stands in for sigma_x sigma_u dW^2,
    // so the pathwise gap converges at the strong rate 1/2.
    let (slope, gaps) = representation_gap_slope(0.3);
    assert!(slope >= 0.4, "slope {slope}, gaps {gaps:?}");
}

fn two_dim(drift_diag: [f64; 2], sigma_x: f64) -> Problem {
    let a = DMatrix::from_diagonal(&DVector::from_row_slice(&drift_diag));
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
    let c = CoefficientSet::new(
        2,
        1,
        Arc::new(AffineField::new(a, b.clone(), DVector::zeros(2)).unwrap()),
        Arc::new(AffineField::new(DMatrix::identity(2, 2) * sigma_x, b, DVector::from_vec(vec![0.2, 0.1])).unwrap()),
        Arc::new(QuadraticGenerator::zero(2, 1)),
        Arc::new(QuadraticTerminal::linear(vec![1.0, 1.0])),
        DMatrix::from_element(2, 1, 1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    Problem::new("two", c, ControlRegion::new(vec![-1.0], vec![1.0], 3).unwrap(), TimeGrid::new(0.0, 1.0, 20).unwrap(), vec![0.0, 0.0])
        .unwrap()
}

#[test]
fn transition_inverse_is_accurate() {
    let p = two_dim([0.3, -0.4], 0.2);
    let fwd = forward(&p, 0.1, &McConfig::new(100, 5));
    let (psi, _) = transition_and_representation(&p, &fwd, &RegularControl::constant(vec![1.0])).unwrap();
    for k in 0..=20 {
        for path in 0..100 {
            let prod = psi.psi_at(k, path) * psi.psi_inv_at(k, path);
            assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() <= 1e-8);
        }
        if k == 0 {
            assert_eq!(psi.psi_at(0, 0), DMatrix::<f64>::identity(2, 2));
        }
    }
}

#[test]
fn near_singular_transition_is_rejected() {
    let p = two_dim([0.0, -25.0], 0.0);
    let fwd = forward(&p, 0.0, &McConfig::new(4, 1));
    let err = transition_and_representation(&p, &fwd, &RegularControl::constant(vec![1.0])).unwrap_err();
    assert!(matches!(err, FbsdeError::IllConditioned { path: 0, .. }), "{err}");
}

#[test]
fn study_needs_three_levels() {
    let p = worked_example();
    let pert = Perturbation::Regular { reference: RegularControl::constant(vec![0.0]), direction: RegularControl::constant(vec![1.0]) };
    assert!(convergence_study(&p, &pert, &[0.1, 0.05], &McConfig::new(10, 1)).is_err());
    assert!(convergence_study(&p, &pert, &[0.1, 0.2, 0.05], &McConfig::new(10, 1)).is_err());
}

#[test]
fn linear_problem_linearization_is_exact() {
    let p = Scalar { drift: affine(0.5, 1.0, 0.1), diffusion: affine(0.2, 0.3, 0.4), ..Default::default() }.build();
    let pert = Perturbation::Regular { reference: RegularControl::constant(vec![0.1]), direction: RegularControl::constant(vec![1.0]) };
    let r = convergence_study(&p, &pert, &[0.2, 0.1, 0.05], &McConfig::new(200, 2)).unwrap();
    assert!(r.max_values["first_order"] <= 1e-12, "{}", r.max_values["first_order"]);
    assert_eq!(r.slopes["first_order"], None);
}

#[test]
fn worked_example_forward_study_is_second_order() {
    // Linear coefficients and a box control region: the forward remainder is
    // zero, so the second-order norm collapses to roundoff.
    let p = worked_example();
    let pert = Perturbation::Regular { reference: RegularControl::constant(vec![0.0]), direction: RegularControl::constant(vec![1.0]) };
    let r = convergence_study(&p, &pert, &[0.2, 0.1, 0.05, 0.025], &McConfig::new(500, 6)).unwrap();
    assert!(r.max_values["first_order"] <= 1e-12);
    let cubic = builtin_problem("cubic").unwrap();
    let pert = Perturbation::Regular { reference: RegularControl::constant(vec![0.2]), direction: RegularControl::constant(vec![1.0]) };
    let r = convergence_study(&cubic, &pert, &[0.2, 0.1, 0.05, 0.025], &McConfig::new(500, 6)).unwrap();
    assert!(r.slopes["first_order"].unwrap() >= 1.8);
}

#[test]
fn singular_study_on_inert_model_is_exact() {
    let p = Scalar { terminal: terminal(0.0, 1.0, 0.0), ..Default::default() }.build();
    let pert = Perturbation::Singular {
        control: RegularControl::constant(vec![0.0]),
        reference: SingularControlPath::zero(20, 1),
        target: SingularControlPath::atom(20, 1, 5, 0, 1.0).unwrap(),
    };
    let r = convergence_study(&p, &pert, &[0.5, 0.25, 0.125], &McConfig::new(50, 1)).unwrap();
    assert!(r.max_values["state_quotient"] <= 1e-12);
    assert!(r.max_values["cost_quotient"] <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn singular_response_is_linear(mass in 0.1f64..2.0, step in 0usize..20, fy in -1.0f64..1.0, seed in 0u64..50) {
        let p = Scalar {
            drift: affine(0.3, 0.0, 0.0),
            diffusion: affine(0.2, 0.0, 0.3),
            generator: generator(0.0, [0.5, fy, 0.2, 0.0], &[]),
            terminal: terminal(0.0, 1.0, 0.0),
            ..Default::default()
        }
        .build();
        let mc = McConfig::new(200, seed);
        let one = singular_response(&p, &SingularControlPath::atom(20, 1, step, 0, mass).unwrap(), &mc);
        let two = singular_response(&p, &SingularControlPath::atom(20, 1, step, 0, 2.0 * mass).unwrap(), &mc);
        for (a, b) in [(&one.x1, &two.x1), (&one.y1, &two.y1), (&one.z1, &two.z1)] {
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((2.0 * u - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn representation_matches_direct_under_identity_flow(bu in -1.0f64..1.0, su in -1.0f64..1.0, c in -1.0f64..1.0, v in -1.0f64..1.0) {
        let p = Scalar { drift: affine(0.0, bu, c), diffusion: affine(0.0, su, 0.2), ..Default::default() }.build();
        let fwd = forward(&p, 0.0, &McConfig::new(50, 1));
        let dir = RegularControl::constant(vec![v]);
        let (_, rep) = transition_and_representation(&p, &fwd, &dir).unwrap();
        let direct = solve_regular_variations(&p, &fwd, &dir).unwrap();
        for (r, d) in rep.as_slice().iter().zip(direct.x1.as_slice()) {
            prop_assert!((r - d).abs() <= 1e-8);
        }
    }

    #[test]
    fn study_is_deterministic(seed in 0u64..1000) {
        let p = builtin_problem("cubic").unwrap().with_steps(10);
        let pert = Perturbation::Regular { reference: RegularControl::constant(vec![0.1]), direction: RegularControl::constant(vec![1.0]) };
        let a = convergence_study(&p, &pert, &[0.2, 0.1, 0.05], &McConfig::new(30, seed)).unwrap();
        let b = convergence_study(&p, &pert, &[0.2, 0.1, 0.05], &McConfig::new(30, seed)).unwrap();
        let (va, vb): (Vec<u64>, Vec<u64>) =
            (a.records.iter().map(|r| r.value.to_bits()).collect(), b.records.iter().map(|r| r.value.to_bits()).collect());
        prop_assert_eq!(va, vb);
    }
}
