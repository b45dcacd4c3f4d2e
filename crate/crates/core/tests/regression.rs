use fbsde_core::regression::{Basis, RegressionOptions, Regressor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64 + 0.3).collect()
}

fn opts(degree: usize) -> RegressionOptions {
    RegressionOptions { degree, ..Default::default() }
}

/// Least squares through an SVD of the explicitly built design.
fn svd_coefficients(basis: &Basis, states: &[f64], target: &[f64]) -> DVector<f64> {
    let rows: Vec<Vec<f64>> = states.iter().map(|x| basis.features(&[*x])).collect();
    let a = DMatrix::from_fn(rows.len(), basis.len(), |i, j| rows[i][j]);
    a.svd(true, true).solve(&DVector::from_column_slice(target), 1e-14).unwrap()
}

#[test]
fn quadratic_target_is_fitted_exactly() {
    let xs = grid(50);
    let target: Vec<f64> = xs.iter().map(|x| 2.0 - x + 3.0 * x * x).collect();
    let r = Regressor::new(&xs, 1, &opts(2));
    assert!(!r.warning);
    for (f, t) in r.fitted(&target).iter().zip(&target) {
        assert!((f - t).abs() <= 1e-10);
    }
    let raw = r.basis().raw_monomial_map().unwrap() * r.coefficients(&target);
    for (c, e) in raw.iter().zip([2.0, -1.0, 3.0]) {
        assert!((c - e).abs() <= 1e-10, "{raw}");
    }
}

#[test]
fn coefficients_agree_with_svd_solve() {
    let xs = grid(40);
    let target: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    let r = Regressor::new(&xs, 1, &opts(3));
    let a = r.coefficients(&target);
    let b = svd_coefficients(r.basis(), &xs, &target);
    assert!((a - b).amax() <= 1e-9);
}

#[test]
fn zero_weights_drop_paths() {
    let xs = grid(30);
    let target: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let weights: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let w = Regressor::new(&xs, 1, &RegressionOptions { degree: 2, weights: Some(weights.clone()), ..Default::default() });
    let keep: Vec<usize> = (0..30).filter(|i| weights[*i] > 0.0).collect();
    let sub_x: Vec<f64> = keep.iter().map(|i| xs[*i]).collect();
    let sub_t: Vec<f64> = keep.iter().map(|i| target[*i]).collect();
    // Same standardization as the weighted fit, so coefficients are comparable.
    let oracle = svd_coefficients(w.basis(), &sub_x, &sub_t);
    assert!((w.coefficients(&target) - oracle).amax() <= 1e-9);
}

#[test]
fn multiplier_block_captures_products() {
    let xs = grid(60);
    let m: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let target: Vec<f64> = xs.iter().zip(&m).map(|(x, m)| 0.5 + m * (1.0 + x)).collect();
    let r = Regressor::new(&xs, 1, &RegressionOptions { degree: 1, multipliers: vec![m], ..Default::default() });
    assert_eq!(r.coefficients(&target).len(), 4);
    for (f, t) in r.fitted(&target).iter().zip(&target) {
        assert!((f - t).abs() <= 1e-10);
    }
}

#[test]
fn constant_multiplier_is_ignored() {
    let xs = grid(20);
    let r = Regressor::new(&xs, 1, &RegressionOptions { degree: 1, multipliers: vec![vec![2.0; 20]], ..Default::default() });
    assert_eq!(r.coefficients(&xs).len(), 2);
}

#[test]
fn constant_coordinates_leave_the_basis() {
    let states: Vec<f64> = grid(25).iter().flat_map(|x| [*x, 4.0]).collect();
    let b = Basis::fit(&states, 2, 2);
    assert_eq!(b.len(), 3);
    assert_eq!(b.degree(), 2);
    assert!(b.raw_monomial_map().is_none());
    assert_eq!(Basis::fit(&[1.0; 10], 1, 3).len(), 1);
}

#[test]
fn collinear_design_falls_back_to_constant() {
    let xs: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let r = Regressor::new(&xs, 1, &opts(2));
    assert!(r.warning);
    assert_eq!(r.basis().len(), 1);
    let target: Vec<f64> = (0..40).map(|i| i as f64).collect();
    assert!((r.coefficients(&target)[0] - 19.5).abs() <= 1e-12);
}

#[test]
fn covariance_of_a_mean() {
    // Constant regression: the coefficient is the sample mean with variance s^2 / n.
    let xs = vec![0.0; 8];
    let y = [1.0, 3.0, 2.0, 6.0, 4.0, 0.0, 5.0, 3.0];
    let r = Regressor::new(&xs, 1, &opts(2));
    let (c, cov) = r.coefficients_with_covariance(&y);
    let mean = y.iter().sum::<f64>() / 8.0;
    let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    assert!((c[0] - mean).abs() <= 1e-12);
    assert!((cov[(0, 0)] - s2 / 8.0).abs() <= 1e-12);
    let (_, robust) = r.coefficients_with_robust_covariance(&y);
    let hc0 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!((robust[(0, 0)] - hc0).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_are_orthogonal_to_features(
        xs in prop::collection::vec(-3.0f64..3.0, 12..40),
        coef in prop::collection::vec(-2.0f64..2.0, 4),
        degree in 1usize..3,
    ) {
        let target: Vec<f64> = xs.iter().map(|x| coef[0] + coef[1] * x + coef[2] * (2.0 * x).cos() + coef[3] * x.powi(3)).collect();
        let r = Regressor::new(&xs, 1, &opts(degree));
        let fit = r.fitted(&target);
        for j in 0..r.basis().len() {
            let dot: f64 = xs.iter().zip(&target).zip(&fit).map(|((x, t), f)| r.basis().features(&[*x])[j] * (t - f)).sum();
            let scale: f64 = target.iter().map(|t| t.abs()).sum::<f64>() + 1.0;
            prop_assert!(dot.abs() <= 1e-8 * scale, "{dot}");
        }
    }

    #[test]
    fn fit_is_linear_in_the_target(xs in prop::collection::vec(-2.0f64..2.0, 10..30), a in -3.0f64..3.0) {
        let r = Regressor::new(&xs, 1, &opts(2));
        let t1: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let t2: Vec<f64> = xs.iter().map(|x| x * x.abs()).collect();
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(u, v)| a * u + v).collect();
        let lhs = r.coefficients(&mix);
        let rhs = r.coefficients(&t1) * a + r.coefficients(&t2);
        prop_assert!((lhs - &rhs).amax() <= 1e-8 * (1.0 + rhs.amax()));
    }
}
