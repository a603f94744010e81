//! Flow correctness: invertibility, change-of-variables exactness against a
//! finite-difference Jacobian, density normalization by quadrature, and the
//! Gaussian head against a dense-matrix oracle.

mod common;

use common::{dense_gaussian_logpdf, fd_jacobian, lu_log_abs_det, TestRng};
use fepn::beta::BetaMode;
use fepn::flow::{ClassConditionalFlows, FlowModel, GaussianHead};

#[test]
fn round_trip_on_thousand_points() {
    let flow = FlowModel::random(6, 3, 16, 40, 0.5).unwrap();
    let mut rng = TestRng::new(41);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal()).collect();
        let (u, _) = flow.forward(&x).unwrap();
        let back = flow.inverse(&u).unwrap();
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-9, "max round-trip error {worst}");
}

#[test]
fn log_det_matches_fd_jacobian_low_dims() {
    let mut rng = TestRng::new(43);
    for dim in [2usize, 3, 4] {
        let flow = FlowModel::random(dim, 3, 8, 50 + dim as u64, 0.4).unwrap();
        for _ in 0..34 {
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let (_, log_det) = flow.forward(&x).unwrap();
            let jac = fd_jacobian(&flow, &x, 1e-4);
            let fd_log_det = lu_log_abs_det(&jac);
            assert!(
                (log_det - fd_log_det).abs() <= 1e-5,
                "dim {dim}: log_det {log_det} vs fd {fd_log_det}"
            );
        }
    }
}

#[test]
fn identity_flow_density_normalizes_on_grid() {
    // ∫∫ exp(log_prob) over [-6,6]² with step 0.02
    let flow = FlowModel::identity(2, 3, 8, 7).unwrap();
    let step = 0.02;
    let n = (12.0 / step) as usize + 1;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [-6.0 + i as f64 * step, -6.0 + j as f64 * step];
            mass += flow.log_prob(&x).unwrap().exp();
        }
    }
    mass *= step * step;
    assert!((mass - 1.0).abs() <= 0.02, "identity mass {mass}");
}

#[test]
fn random_flow_density_normalizes_on_grid() {
    // change-of-variables exactness holds for any parameter setting as long
    // as the transported mass stays inside the quadrature box
    let flow = FlowModel::random(2, 3, 8, 77, 0.2).unwrap();
    let step = 0.02;
    let n = (12.0 / step) as usize + 1;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [-6.0 + i as f64 * step, -6.0 + j as f64 * step];
            mass += flow.log_prob(&x).unwrap().exp();
        }
    }
    mass *= step * step;
    assert!((mass - 1.0).abs() <= 0.02, "random-flow mass {mass}");
}

#[test]
fn gaussian_head_matches_dense_oracle() {
    let mut rng = TestRng::new(44);
    for dim in [2usize, 4, 7] {
        let mut flow = FlowModel::identity(dim, 1, 4, 3).unwrap();
        let n = flow.param_count();
        let head_count = 2 * dim + dim * (dim - 1) / 2;
        let mut params = flow.params();
        for p in params[n - head_count..].iter_mut() {
            *p = 0.4 * rng.normal();
        }
        flow.set_params(&params).unwrap();
        let head: &GaussianHead = flow.head();
        let u_dense = head.factor_matrix();
        for _ in 0..25 {
            let x: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
            let got = head.log_density(&x, true).unwrap();
            let want = dense_gaussian_logpdf(head.mean(), &u_dense, &x);
            assert!(
                (got - want).abs() <= 1e-9,
                "dim {dim}: head {got} vs dense oracle {want}"
            );
        }
    }
}

#[test]
fn class_posterior_normalizes_over_random_inputs() {
    let flows = ClassConditionalFlows::new(
        FlowModel::random(4, 3, 8, 60, 0.3).unwrap(),
        FlowModel::random(4, 3, 8, 61, 0.3).unwrap(),
        0.37,
    )
    .unwrap();
    let mut rng = TestRng::new(62);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
        let (p_in, p_out) = flows.class_posterior(&x).unwrap();
        assert!((p_in + p_out - 1.0).abs() <= 1e-9);
        assert!(p_in >= 0.0 && p_out >= 0.0);
    }
}

#[test]
fn class_posterior_logit_shift_example() {
    // log_prob_in − log_prob_out = ln 3 with equal priors gives (0.75, 0.25);
    // arranged by shifting the outlier head mean so the energies differ by
    // exactly ln 3 at the probe point
    let flow_in = FlowModel::identity(2, 1, 4, 0).unwrap();
    let mut flow_out = flow_in.clone();
    let mut params = flow_out.params();
    let n = params.len();
    // head: mu (2), log_diag (2), lower (1); mu[0] offset so that
    // −½(x−μ)² = −½x² − ln 3 at x = (c, 0): c·μ − μ²/2 = −ln 3
    let mu = (2.0 * 3.0f64.ln()).sqrt();
    params[n - 5] = mu;
    flow_out.set_params(&params).unwrap();
    let flows = ClassConditionalFlows::new(flow_in, flow_out, 0.5).unwrap();
    let (p_in, p_out) = flows.class_posterior(&[0.0, 0.0]).unwrap();
    assert!((p_in - 0.75).abs() < 1e-12, "p_in = {p_in}");
    assert!((p_out - 0.25).abs() < 1e-12);
}

#[test]
fn beta_field_softplus_bounds_hold_for_random_flows() {
    let flows = ClassConditionalFlows::new(
        FlowModel::random(8, 3, 16, 70, 0.4).unwrap(),
        FlowModel::random(8, 3, 16, 71, 0.4).unwrap(),
        0.5,
    )
    .unwrap();
    let backbone = fepn::data::FrozenBackbone::new(5, 8).unwrap();
    let raw = fepn::data::mix_scene(12, 12, 0.25, 9).unwrap();
    let grid = fepn::data::embed(&backbone, &raw).unwrap();
    let field = flows
        .beta_field_from_flows(&grid, BetaMode::SoftplusLogit)
        .unwrap();
    for p in field.cells() {
        assert!(p.alpha >= 1.0 && p.beta >= 1.0);
    }
    let ctx = flows
        .beta_field_from_flows(&grid, BetaMode::Contextual)
        .unwrap();
    for p in ctx.cells() {
        assert!(p.alpha >= 1.0 + 1e-6 - 1e-15 && p.beta >= 1.0 + 1e-6 - 1e-15);
    }
}
