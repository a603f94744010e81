//! Gradient fidelity of every loss term against central differences, the
//! literal outlier term's zero function/zero gradient property, and the
//! optimization-facing loss shapes.

mod common;

use common::TestRng;
use fepn::beta::{beta_nodes_tape, BetaField, BetaParams};
use fepn::flow::{ClassConditionalFlows, FlowModel};
use fepn::grid::OodMask;
use fepn::loss::{buce_total, out_loss, uce_loss, var_consistency_loss, LossConfig, OutMode};
use fepn::tape::Tape;
use fepn::train::{
    eval_buce, grad_check, grad_check_report, LossTerm, ResidualHead, TrainConfig, Trainer,
    GRAD_CHECK_TERMS,
};

fn eight_by_eight_scene() -> fepn::grid::LabeledGrid {
    let trainer = Trainer::new(TrainConfig {
        grid_height: 8,
        grid_width: 8,
        ..TrainConfig::default()
    })
    .unwrap();
    trainer.scene(900, 0).unwrap()
}

fn random_models(seed: u64, spread: f64) -> (ClassConditionalFlows, ResidualHead) {
    let flows = ClassConditionalFlows::new(
        FlowModel::random(8, 3, 32, seed, spread).unwrap(),
        FlowModel::random(8, 3, 32, seed + 1, spread).unwrap(),
        0.5,
    )
    .unwrap();
    let mut head = ResidualHead::new(8).unwrap();
    let mut rng = TestRng::new(seed + 2);
    let params: Vec<f64> = (0..head.param_count())
        .map(|_| 0.3 * rng.normal())
        .collect();
    head.set_params(&params).unwrap();
    (flows, head)
}

#[test]
fn gradcheck_identity_model_all_terms() {
    let trainer = Trainer::new(TrainConfig {
        grid_height: 8,
        grid_width: 8,
        ..TrainConfig::default()
    })
    .unwrap();
    let flows = trainer.identity_flows().unwrap();
    let head = trainer.identity_head().unwrap();
    let grid = eight_by_eight_scene();
    let report = grad_check_report(&flows, &head, &grid, &LossConfig::default(), 1e-5).unwrap();
    for ((name, _), (_, err)) in GRAD_CHECK_TERMS.iter().zip(report) {
        assert!(err <= 1e-4, "{name} gradient error {err:.3e} at identity");
    }
}

#[test]
fn gradcheck_random_model_full_buce() {
    let (flows, head) = random_models(300, 0.3);
    let grid = eight_by_eight_scene();
    let report = grad_check_report(&flows, &head, &grid, &LossConfig::default(), 1e-5).unwrap();
    for ((name, _), (_, err)) in GRAD_CHECK_TERMS.iter().zip(report) {
        assert!(
            err <= 1e-4,
            "{name} gradient error {err:.3e} at random model"
        );
    }
}

#[test]
fn gradcheck_literal_mode_gradients_vanish() {
    let (flows, head) = random_models(310, 0.3);
    let grid = eight_by_eight_scene();
    let cfg = LossConfig {
        out_mode: OutMode::Literal,
        ..LossConfig::default()
    };
    let err = grad_check(&flows, &head, &grid, &cfg, LossTerm::Out, 1e-5).unwrap();
    assert_eq!(
        err, 0.0,
        "literal out term must have exactly zero gradients"
    );
}

#[test]
fn gradcheck_contextual_mode() {
    use fepn::beta::BetaMode;
    let (flows, head) = random_models(320, 0.3);
    let grid = eight_by_eight_scene();
    let cfg = LossConfig {
        beta_mode: BetaMode::Contextual,
        ..LossConfig::default()
    };
    let report = grad_check_report(&flows, &head, &grid, &cfg, 1e-5).unwrap();
    for ((name, _), (_, err)) in GRAD_CHECK_TERMS.iter().zip(report) {
        assert!(
            err <= 1e-4,
            "{name} gradient error {err:.3e} in contextual mode"
        );
    }
}

#[test]
fn literal_out_is_the_zero_function() {
    let mut rng = TestRng::new(500);
    for _ in 0..1000 {
        let h = 1 + (rng.next_u64() % 4) as usize;
        let w = 1 + (rng.next_u64() % 4) as usize;
        let params: Vec<BetaParams> = (0..h * w)
            .map(|_| BetaParams::new(rng.range(1.0, 50.0), rng.range(1.0, 50.0)).unwrap())
            .collect();
        let field = BetaField::new(h, w, params).unwrap();
        let mask = OodMask::new(
            h,
            w,
            (0..h * w).map(|_| (rng.next_u64() % 2) as u8).collect(),
        )
        .unwrap();
        assert_eq!(out_loss(&field, &mask, OutMode::Literal).unwrap(), 0.0);
    }
}

#[test]
fn literal_out_has_zero_tape_gradients() {
    // build max(−m·Var, 0) on the tape from leaf (alpha, beta) pairs and
    // check the accumulated gradients are exactly zero
    let mut rng = TestRng::new(501);
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let z_in = tape.leaf(rng.range(-5.0, 5.0));
        let z_out = tape.leaf(rng.range(-5.0, 5.0));
        let nodes = beta_nodes_tape(&mut tape, z_in, z_out, fepn::beta::BetaMode::SoftplusLogit);
        let s = tape.add(nodes.alpha, nodes.beta);
        let s1 = tape.add_const(s, 1.0);
        let s2 = tape.mul(s, s);
        let den = tape.mul(s2, s1);
        let ab = tape.mul(nodes.alpha, nodes.beta);
        let var = tape.div(ab, den);
        let neg = tape.neg(var);
        let literal = tape.relu(neg);
        let grads = tape.backward(literal);
        assert_eq!(tape.value(literal), 0.0);
        assert_eq!(grads.wrt(z_in), 0.0);
        assert_eq!(grads.wrt(z_out), 0.0);
    }
}

#[test]
fn hinge_decreases_toward_flat_posterior() {
    // moving a masked cell's (alpha, beta) toward (1,1) along the diagonal
    // lowers the hinge term
    let mask = OodMask::new(1, 1, vec![1]).unwrap();
    let mut prev = f64::INFINITY;
    let mut t = 3.0;
    while t >= 1.0 {
        let field = BetaField::new(1, 1, vec![BetaParams::new(t, t).unwrap()]).unwrap();
        let v = out_loss(&field, &mask, OutMode::Hinge).unwrap();
        assert!(v <= prev, "hinge not non-increasing at t = {t}");
        prev = v;
        t -= 0.125;
    }
    let at_corner = out_loss(
        &BetaField::new(1, 1, vec![BetaParams::new(1.0, 1.0).unwrap()]).unwrap(),
        &mask,
        OutMode::Hinge,
    )
    .unwrap();
    assert_eq!(at_corner, 0.0);
}

#[test]
fn uce_unweighted_outlier_only_is_zero() {
    let mut rng = TestRng::new(502);
    let params: Vec<BetaParams> = (0..16)
        .map(|_| BetaParams::new(rng.range(1.0, 20.0), rng.range(1.0, 20.0)).unwrap())
        .collect();
    let field = BetaField::new(4, 4, params).unwrap();
    let mask = OodMask::new(4, 4, vec![1; 16]).unwrap();
    assert_eq!(uce_loss(&field, &mask, 0.0, 1.0).unwrap(), 0.0);
}

#[test]
fn breakdown_reconstruction_within_1e12() {
    let (flows, head) = random_models(330, 0.3);
    let grid = eight_by_eight_scene();
    for out_enabled in [true, false] {
        let cfg = LossConfig {
            out_enabled,
            ..LossConfig::default()
        };
        let b = eval_buce(&flows, &head, &grid, &cfg).unwrap();
        let rebuilt = b.ce + cfg.lambda1 * b.uce + cfg.lambda2 * b.var + b.out;
        assert!((b.total - rebuilt).abs() <= 1e-12);
        if !out_enabled {
            assert_eq!(b.out, 0.0);
        }
        assert!(
            (buce_total(b.ce, b.uce, b.var, cfg.lambda1, cfg.lambda2).unwrap() + b.out - b.total)
                .abs()
                <= 1e-12
        );
    }
}

#[test]
fn var_bce_minimized_at_flat_corner_for_masked_cells() {
    // grid search over alpha, beta in [1, 10]: the masked-cell BCE is
    // minimal exactly at (1, 1)
    let mask = OodMask::new(1, 1, vec![1]).unwrap();
    let corner = var_consistency_loss(
        &BetaField::new(1, 1, vec![BetaParams::new(1.0, 1.0).unwrap()]).unwrap(),
        &mask,
        true,
    )
    .unwrap();
    let mut a = 1.0;
    while a <= 10.0 {
        let mut b = 1.0;
        while b <= 10.0 {
            let v = var_consistency_loss(
                &BetaField::new(1, 1, vec![BetaParams::new(a, b).unwrap()]).unwrap(),
                &mask,
                true,
            )
            .unwrap();
            assert!(
                v >= corner,
                "BCE at ({a},{b}) = {v} beats the corner value {corner}"
            );
            if (a, b) != (1.0, 1.0) {
                assert!(v > corner);
            }
            b += 0.5;
        }
        a += 0.5;
    }
}

#[test]
fn plain_objective_matches_field_operations_route() {
    // eval_buce computes var/out/uce from per-cell closed forms; it must
    // agree with the BetaField operation route to float precision wherever
    // the materialized alpha = 1 + softplus(lp) keeps the evidence excess
    // representable. A raw 2-D scene with a near-identity flow keeps every
    // log-density moderate, so no cell saturates.
    let flows = ClassConditionalFlows::new(
        FlowModel::random(2, 3, 8, 340, 0.05).unwrap(),
        FlowModel::random(2, 3, 8, 341, 0.05).unwrap(),
        0.5,
    )
    .unwrap();
    let head = ResidualHead::new(2).unwrap();
    let trainer = Trainer::new(TrainConfig {
        use_backbone: false,
        grid_height: 8,
        grid_width: 8,
        ..TrainConfig::default()
    })
    .unwrap();
    let grid = trainer.scene(903, 0).unwrap();
    let cfg = LossConfig::default();
    let b = eval_buce(&flows, &head, &grid, &cfg).unwrap();

    let field = flows.beta_field_from_flows(&grid, cfg.beta_mode).unwrap();
    let uce = uce_loss(&field, grid.mask(), cfg.lambda_reg, cfg.uce_scale).unwrap();
    let var = var_consistency_loss(&field, grid.mask(), cfg.var_normalize).unwrap();
    let out = out_loss(&field, grid.mask(), cfg.out_mode).unwrap();
    assert!(
        (b.uce - uce).abs() <= 1e-9,
        "uce routes differ: {} vs {uce}",
        b.uce
    );
    assert!(
        (b.var - var).abs() <= 1e-9,
        "var routes differ: {} vs {var}",
        b.var
    );
    assert!(
        (b.out - out).abs() <= 1e-9,
        "out routes differ: {} vs {out}",
        b.out
    );
}
