//! Beta posterior algebra against the quadrature oracle and its stated
//! range/symmetry/monotonicity properties.

mod common;

use common::{beta_entropy_quadrature, TestRng};
use fepn::beta::{beta_diff_entropy, beta_from_logits, beta_variance, expected_inlier, BetaParams};
use proptest::prelude::*;

fn params(a: f64, b: f64) -> BetaParams {
    BetaParams::new(a, b).unwrap()
}

#[test]
fn entropy_matches_quadrature_on_grid() {
    // 20-point (alpha, beta) grid
    let alphas = [1.0, 1.5, 2.0, 3.5, 8.0];
    let betas = [1.0, 1.25, 2.5, 6.0];
    for &a in &alphas {
        for &b in &betas {
            let got = beta_diff_entropy(params(a, b));
            let want = beta_entropy_quadrature(a, b, 1 << 17);
            assert!(
                (got - want).abs() <= 1e-6,
                "entropy({a},{b}) = {got}, quadrature {want}"
            );
        }
    }
}

#[test]
fn entropy_examples_from_quadrature() {
    // Beta(2,2): closed form 5/3 − ln 6
    let q22 = beta_entropy_quadrature(2.0, 2.0, 1 << 17);
    assert!((q22 - (5.0 / 3.0 - 6.0f64.ln())).abs() < 1e-9);
    assert!((beta_diff_entropy(params(2.0, 2.0)) - q22).abs() <= 1e-6);

    // Beta(5,1): closed form 4/5 − ln 5
    let q51 = beta_entropy_quadrature(5.0, 1.0, 1 << 17);
    assert!((q51 - (0.8 - 5.0f64.ln())).abs() < 1e-9);
    assert!((beta_diff_entropy(params(5.0, 1.0)) - q51).abs() <= 1e-3);

    assert!(beta_diff_entropy(params(1.0, 1.0)).abs() < 1e-11);
}

#[test]
fn variance_range_with_max_only_at_corner() {
    let mut rng = TestRng::new(21);
    for _ in 0..10_000 {
        let a = rng.range(1.0, 100.0);
        let b = rng.range(1.0, 100.0);
        let v = beta_variance(params(a, b));
        assert!(
            v > 0.0 && v <= 1.0 / 12.0,
            "variance {v} out of range at ({a},{b})"
        );
        if (a, b) != (1.0, 1.0) {
            assert!(v < 1.0 / 12.0, "interior point ({a},{b}) reached the bound");
        }
    }
    assert_eq!(beta_variance(params(1.0, 1.0)), 1.0 / 12.0);
}

#[test]
fn variance_and_entropy_decrease_with_concentration() {
    // along alpha = beta = t, both are strictly decreasing on [1, 100]
    let mut prev_v = f64::INFINITY;
    let mut prev_h = f64::INFINITY;
    let mut t = 1.0;
    while t <= 100.0 {
        let v = beta_variance(params(t, t));
        let h = beta_diff_entropy(params(t, t));
        assert!(v < prev_v, "variance not decreasing at t = {t}");
        assert!(h < prev_h, "entropy not decreasing at t = {t}");
        prev_v = v;
        prev_h = h;
        t += 0.5;
    }
}

#[test]
fn trivial_identities_tight() {
    // spec-level exactness budget: 1e-11
    assert!((beta_variance(params(1.0, 1.0)) - 1.0 / 12.0).abs() <= 1e-11);
    assert!((beta_variance(params(2.0, 2.0)) - 0.05).abs() <= 1e-11);
    assert!((beta_variance(params(3.0, 1.0)) - 0.0375).abs() <= 1e-11);
    assert!(beta_diff_entropy(params(1.0, 1.0)).abs() <= 1e-11);
    assert!((expected_inlier(params(3.0, 1.0)) - 0.75).abs() <= 1e-11);

    let p = beta_from_logits(0.0, 0.0).unwrap();
    assert!((p.alpha - 1.6931471805599453).abs() <= 1e-11);
    let p = beta_from_logits(-50.0, -50.0).unwrap();
    assert!((p.alpha - 1.0).abs() <= 1e-12 && (p.beta - 1.0).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn symmetry_and_complement(a in 1.0f64..100.0, b in 1.0f64..100.0) {
        let ab = params(a, b);
        let ba = params(b, a);
        prop_assert_eq!(beta_variance(ab).to_bits(), beta_variance(ba).to_bits());
        prop_assert_eq!(beta_diff_entropy(ab).to_bits(), beta_diff_entropy(ba).to_bits());
        let sum = expected_inlier(ab) + expected_inlier(ba);
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn logits_always_land_in_domain(z_in in -60.0f64..60.0, z_out in -60.0f64..60.0) {
        let p = beta_from_logits(z_in, z_out).unwrap();
        prop_assert!(p.alpha >= 1.0 && p.beta >= 1.0);
        let e = expected_inlier(p);
        prop_assert!(e > 0.0 && e < 1.0);
    }
}
