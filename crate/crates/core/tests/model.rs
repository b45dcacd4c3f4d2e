use std::sync::Arc;

use fbsde_core::model::{
    classify_increments, validate_coefficients, AffineField, CoefficientSet, ControlRegion, IncrementKind,
    QuadraticGenerator, QuadraticTerminal, TimeGrid, VectorField,
};
use fbsde_core::paths::PathTensor;
use fbsde_core::problem_file::{builtin_problem, parse_problem, BUILTIN_PROBLEMS};
use fbsde_core::{worked_example, FbsdeError, Problem, SingularControlPath};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `b(t, x, u) = x` with a wrong `b_x = 0`.
struct WrongDrift;

impl VectorField for WrongDrift {
    fn value(&self, _t: f64, x: &[f64], _u: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }
    fn d_x(&self, _t: f64, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn d_u(&self, _t: f64, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }
    fn d_xx(&self, _t: f64, _x: &[f64], _u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 1)]
    }
    fn d_xu(&self, _t: f64, _x: &[f64], _u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 1)]
    }
    fn d_uu(&self, _t: f64, _x: &[f64], _u: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 1)]
    }
}

fn scalar_problem(drift: Arc<dyn VectorField>) -> Problem {
    let c = CoefficientSet::new(
        1,
        1,
        drift,
        Arc::new(AffineField::scalar(0.0, 0.0, 0.0)),
        Arc::new(QuadraticGenerator::zero(1, 1)),
        Arc::new(QuadraticTerminal::linear(vec![1.0])),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    Problem::new("test", c, ControlRegion::new(vec![-1.0], vec![1.0], 5).unwrap(), TimeGrid::new(0.0, 1.0, 10).unwrap(), vec![0.0])
        .unwrap()
}

#[test]
fn worked_example_coefficients() {
    let p = worked_example();
    let c = &p.coefficients;
    assert_eq!(c.terminal.value(&[2.0]), 2.0);
    assert_eq!(c.drift.value(0.4, &[3.0], &[0.5])[0], 0.5);
    assert_eq!(c.diffusion.value(0.4, &[3.0], &[0.5])[0], 0.5);
    assert_eq!(c.generator.value(0.4, &[3.0], 1.0, 2.0, &[0.5]), 0.25);
    assert_eq!((c.n, c.k, c.m), (1, 1, 1));
    assert_eq!(c.g[(0, 0)], 0.0);
    assert_eq!(c.cost[0], 1.0);
    assert_eq!((p.region.lower[0], p.region.upper[0]), (-1.0, 1.0));
    assert_eq!(p.x0[0], 0.0);
}

#[test]
fn worked_example_validates() {
    let r = validate_coefficients(&worked_example(), 100, 7).unwrap();
    assert_eq!(r.points_checked, 100);
    assert!(r.max_error <= 1e-8, "{}", r.max_error);
}

#[test]
fn wrong_derivative_oracle_is_named() {
    let err = validate_coefficients(&scalar_problem(Arc::new(WrongDrift)), 10, 1).unwrap_err();
    match err {
        FbsdeError::DerivativeMismatch { name, error, .. } => {
            assert_eq!(name, "drift.d_x[0,0]");
            // |0 - 1| / (1 + 1)
            assert!((error - 0.5).abs() < 1e-8, "{error}");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn affine_oracles_are_exact() {
    let a = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.7, 0.1]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5, -2.0]);
    let drift = AffineField::new(a, b, DVector::from_vec(vec![0.1, 0.2])).unwrap();
    let c = CoefficientSet::new(
        2,
        1,
        Arc::new(drift.clone()),
        Arc::new(drift),
        Arc::new(QuadraticGenerator::zero(2, 1)),
        Arc::new(QuadraticTerminal::linear(vec![1.0, 0.0])),
        DMatrix::from_element(2, 1, 1.0),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let p = Problem::new("lq", c, ControlRegion::new(vec![-1.0], vec![1.0], 5).unwrap(), TimeGrid::new(0.0, 1.0, 10).unwrap(), vec![0.0, 0.0])
        .unwrap();
    let r = validate_coefficients(&p, 50, 3).unwrap();
    assert!(r.max_error <= 1e-10, "{}", r.max_error);
}

#[test]
fn validation_rejects_zero_samples() {
    assert!(validate_coefficients(&worked_example(), 0, 1).is_err());
}

#[test]
fn every_builtin_validates() {
    for name in BUILTIN_PROBLEMS {
        let p = builtin_problem(name).unwrap();
        assert_eq!(p.name, *name);
        validate_coefficients(&p, 25, 11).unwrap();
    }
    assert!(builtin_problem("nope").is_none());
}

#[test]
fn classify_single_atom() {
    let xi = SingularControlPath::deterministic(vec![vec![0.0], vec![0.0], vec![1.0], vec![0.0]]).unwrap();
    use IncrementKind::*;
    assert_eq!(classify_increments(&xi, 0.5).unwrap(), vec![Diffuse, Diffuse, Jump, Diffuse]);
}

#[test]
fn classify_zero_control() {
    let xi = SingularControlPath::zero(6, 1);
    assert!(classify_increments(&xi, 0.0).unwrap().iter().all(|k| *k == IncrementKind::Diffuse));
}

#[test]
fn classify_ramp() {
    let (c, dt) = (0.7, 0.01);
    let xi = SingularControlPath::deterministic(vec![vec![c * dt]; 100]).unwrap();
    assert!(classify_increments(&xi, 2.0 * c * dt).unwrap().iter().all(|k| *k == IncrementKind::Diffuse));
    assert!(classify_increments(&xi, -1.0).is_err());
}

#[test]
fn negative_increment_is_rejected() {
    let err = SingularControlPath::deterministic(vec![vec![0.0], vec![-0.1]]).unwrap_err();
    assert!(matches!(err, FbsdeError::NegativeIncrement { step: 1, column: 0, .. }));
}

#[test]
fn grid_and_region_invariants() {
    assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
    let g = TimeGrid::new(0.5, 1.5, 4).unwrap();
    assert_eq!(g.dt(), 0.25);
    assert_eq!(g.time(4), 1.5);
    assert!(ControlRegion::new(vec![1.0], vec![0.0], 3).is_err());
    let r = ControlRegion::new(vec![-1.0], vec![1.0], 5).unwrap();
    let pts: Vec<f64> = r.discretize().iter().map(|u| u[0]).collect();
    assert_eq!(pts, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert!(r.contains(&[1.0]) && !r.contains(&[1.0001]));
}

#[test]
fn problem_json_round_trip() {
    let json = r#"{
        "name": "lq",
        "n": 1, "k": 1, "x0": [0.5],
        "grid": {"t0": 0.0, "T": 2.0, "n_steps": 40},
        "control_region": {"u_lower": [-2.0], "u_upper": [2.0]},
        "singular": {"m": 1, "G": [[1.0]], "K": [0.5]},
        "drift": {"family": "affine", "A": [[-0.5]], "B": [[1.0]], "c": [0.0]},
        "diffusion": {"family": "affine", "A": [[0.0]], "B": [[0.0]], "c": [0.2]},
        "generator": {"family": "worked_example"},
        "terminal": {"family": "quadratic", "g": [0.0], "M": [[1.0]]}
    }"#;
    let p = parse_problem(json).unwrap();
    assert_eq!(p.name, "lq");
    assert_eq!(p.grid.n_steps, 40);
    assert_eq!(p.grid.t_end, 2.0);
    assert_eq!(p.coefficients.cost[0], 0.5);
    assert_eq!(p.coefficients.drift.value(0.0, &[2.0], &[1.0])[0], 0.0);
    assert_eq!(p.coefficients.generator.value(0.0, &[2.0], 0.0, 0.0, &[1.5]), 2.25);
    assert_eq!(p.coefficients.terminal.value(&[2.0]), 2.0);
    validate_coefficients(&p, 20, 1).unwrap();
}

#[test]
fn problem_json_errors_are_reported() {
    assert!(matches!(parse_problem("{").unwrap_err(), FbsdeError::ProblemFile(_)));
    let bad_k = r#"{
        "n": 1, "k": 1, "x0": [0.0],
        "grid": {"t0": 0.0, "T": 1.0, "n_steps": 4},
        "control_region": {"u_lower": [-1.0], "u_upper": [1.0]},
        "singular": {"m": 1, "G": [[1.0]], "K": [0.0]},
        "drift": {"family": "worked_example"},
        "diffusion": {"family": "worked_example"},
        "generator": {"family": "worked_example"},
        "terminal": {"family": "worked_example"}
    }"#;
    assert!(parse_problem(bad_k).is_err());
}

fn explicit_drift_problem(d_x: &str) -> String {
    format!(
        r#"{{
        "n": 1, "k": 1, "x0": [0.0],
        "grid": {{"t0": 0.0, "T": 1.0, "n_steps": 4}},
        "control_region": {{"u_lower": [-1.0], "u_upper": [1.0]}},
        "singular": {{"m": 1, "G": [[1.0]], "K": [1.0]}},
        "drift": {{"family": "explicit", "terms": [[2, 1, 0.5]], "d_x": {d_x}, "d_u": [[2, 0, 0.5]], "d_xx": [[0, 1, 1.0]], "d_xu": [[1, 0, 1.0]]}},
        "diffusion": {{"family": "worked_example"}},
        "generator": {{"family": "worked_example"}},
        "terminal": {{"family": "worked_example"}}
    }}"#
    )
}

#[test]
fn explicit_oracles_from_json_are_validated() {
    // b = x^2 u / 2 with exact derivatives, then with d_x dropped to zero.
    let good = parse_problem(&explicit_drift_problem("[[1, 1, 1.0]]")).unwrap();
    assert!(validate_coefficients(&good, 30, 2).unwrap().max_error <= 1e-6);
    let bad = parse_problem(&explicit_drift_problem("[]")).unwrap();
    match validate_coefficients(&bad, 30, 2).unwrap_err() {
        FbsdeError::DerivativeMismatch { name, .. } => assert_eq!(name, "drift.d_x[0,0]"),
        e => panic!("unexpected {e}"),
    }
}

proptest! {
    #[test]
    fn cumulative_is_nondecreasing(incs in proptest::collection::vec(proptest::collection::vec(0.0f64..2.0, 2), 1..30)) {
        let xi = SingularControlPath::deterministic(incs.clone()).unwrap();
        let cum = xi.cumulative(0);
        prop_assert_eq!(cum.len(), incs.len() + 1);
        prop_assert!(cum[0].iter().all(|v| *v == 0.0));
        for w in cum.windows(2) {
            prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn per_path_cumulative_is_nondecreasing(vals in proptest::collection::vec(0.0f64..1.0, 12)) {
        let t = PathTensor::from_path_major(4, 1, &[vals[..4].to_vec(), vals[4..8].to_vec(), vals[8..].to_vec()]);
        let xi = SingularControlPath::from_tensor(t).unwrap();
        for p in 0..3 {
            let cum = xi.cumulative(p);
            prop_assert!(cum.windows(2).all(|w| w[0][0] <= w[1][0]));
        }
    }

    #[test]
    fn validation_is_deterministic(seed in 0u64..1000) {
        let p = builtin_problem("cubic").unwrap();
        let a = validate_coefficients(&p, 5, seed).unwrap();
        let b = validate_coefficients(&p, 5, seed).unwrap();
        prop_assert_eq!(a.max_error.to_bits(), b.max_error.to_bits());
        prop_assert_eq!(a.worst, b.worst);
    }
}
