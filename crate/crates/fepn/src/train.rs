//! Deterministic two-phase optimization: maximum-likelihood density fitting
//! of the class-conditional flows on outlier-exposure scenes, then joint
//! fine-tuning of the residual head and flows under the BUCE objective.
//!
//! Gradients come from the reverse-mode tape; the plain (tape-free) loss
//! evaluation in this module is the independent path [`grad_check`] differences
//! against.

use serde::{Deserialize, Serialize};

use crate::beta::{beta_diff_entropy_tape, beta_nodes_tape, BetaMode};
use crate::data::{embed, mix_scene, FrozenBackbone};
use crate::error::{Error, Result};
use crate::flow::{ClassConditionalFlows, FlowModel};
use crate::grid::LabeledGrid;
use crate::loss::{ce_loss, LossBreakdown, LossConfig, OutMode, PROB_FLOOR, VAR_MAX};
use crate::special::digamma_raw;
use crate::tape::{Tape, Var};

// ---------------------------------------------------------------------------
// Residual head
// ---------------------------------------------------------------------------

/// Small learnable map from backbone features to 2-class logits
/// (index 0 = inlier, 1 = outlier). Zero-initialized, so it starts at the
/// uniform prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHead {
    dim: usize,
    w: Vec<f64>, // 2 × dim, row-major
    b: Vec<f64>, // 2
}

pub struct HeadParamVars {
    w: Vec<Var>,
    b: Vec<Var>,
}

impl ResidualHead {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("head dimension must be positive"));
        }
        Ok(Self {
            dim,
            w: vec![0.0; 2 * dim],
            b: vec![0.0; 2],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "head expects dimension {}, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(self.logits_unchecked(x))
    }

    pub(crate) fn logits_unchecked(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [self.b[0], self.b[1]];
        for (k, o) in out.iter_mut().enumerate() {
            for (w, xi) in self.w[k * self.dim..(k + 1) * self.dim].iter().zip(x) {
                *o += w * xi;
            }
        }
        out
    }

    /// Stable softmax over the two logits.
    pub fn probs(&self, x: &[f64]) -> Result<[f64; 2]> {
        let l = self.logits(x)?;
        Ok(softmax2(l))
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = self.w.clone();
        out.extend_from_slice(&self.b);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "head has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let nw = self.w.len();
        self.w.copy_from_slice(&params[..nw]);
        self.b.copy_from_slice(&params[nw..]);
        Ok(())
    }

    pub fn leaves_on(&self, tape: &mut Tape) -> HeadParamVars {
        HeadParamVars {
            w: self.w.iter().map(|&v| tape.leaf(v)).collect(),
            b: self.b.iter().map(|&v| tape.leaf(v)).collect(),
        }
    }

    fn logits_tape(&self, tape: &mut Tape, vars: &HeadParamVars, x: &[f64]) -> [Var; 2] {
        let mut out = [vars.b[0], vars.b[1]];
        for (k, o) in out.iter_mut().enumerate() {
            for (i, &xi) in x.iter().enumerate() {
                let xv = tape.leaf(xi);
                let prod = tape.mul(vars.w[k * self.dim + i], xv);
                *o = tape.add(*o, prod);
            }
        }
        out
    }
}

pub(crate) fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "adam_eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn moments(&self, i: usize) -> (f64, f64) {
        (self.m[i], self.v[i])
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps_flow: usize,
    pub steps_buce: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub outlier_fraction: f64,
    /// Cells sampled per step for the gradient estimate (per class during
    /// density fitting).
    pub cells_per_step: usize,
    pub feature_dim: usize,
    /// When false, flows train directly on raw 2-D scene coordinates.
    pub use_backbone: bool,
    pub flow_blocks: usize,
    pub hidden_width: usize,
    pub prior_in: f64,
    /// When false, BUCE fine-tuning moves only the residual head.
    pub update_flows_in_buce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_flow: 2000,
            steps_buce: 2000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
            grid_height: 64,
            grid_width: 64,
            outlier_fraction: 0.25,
            cells_per_step: 192,
            feature_dim: 8,
            use_backbone: true,
            flow_blocks: 3,
            hidden_width: 32,
            prior_in: 0.5,
            update_flows_in_buce: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction must lie in [0,1], got {}",
                self.outlier_fraction
            )));
        }
        if self.cells_per_step == 0 {
            return Err(Error::Config("cells_per_step must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        if self.flow_blocks == 0 || self.hidden_width == 0 {
            return Err(Error::Config("flow topology must be non-trivial".into()));
        }
        if !(self.prior_in > 0.0 && self.prior_in < 1.0) {
            return Err(Error::Config(format!(
                "prior_in must lie in (0,1), got {}",
                self.prior_in
            )));
        }
        if !(0.0..).contains(&self.loss.lambda_reg) || !self.loss.lambda_reg.is_finite() {
            return Err(Error::Config(
                "lambda_reg must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }

    /// Flow dimension implied by the feature pipeline.
    pub fn flow_dim(&self) -> usize {
        if self.use_backbone {
            self.feature_dim
        } else {
            2
        }
    }
}

/// One row of the loss-curve CSV (`step,ce,uce,var,out,total`). Density-fit
/// rows carry the combined flow NLL in `total` and zeros elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub ce: f64,
    pub uce: f64,
    pub var: f64,
    pub out: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// BUCE objective, tape and plain paths
// ---------------------------------------------------------------------------

/// Which scalar the gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Ce,
    Uce,
    Var,
    Out,
    Total,
}

pub(crate) struct BuceTape {
    pub param_count: usize,
    pub ce: Var,
    pub uce: Var,
    pub var: Var,
    pub out: Var,
    pub total: Var,
}

impl BuceTape {
    fn term(&self, term: LossTerm) -> Var {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::Uce => self.uce,
            LossTerm::Var => self.var,
            LossTerm::Out => self.out,
            LossTerm::Total => self.total,
        }
    }
}

/// Record the full objective on the tape. Parameters are pushed first, in
/// the order [flow_in | flow_out | head].
///
/// Terms that vanish at the α = β = 1 corner (the BCE complement 1 − 12·Var
/// and the hinge gap 1/12 − Var) are built from the evidence excesses
/// δ = α − 1 through the cancellation-free identity
/// 1 − 12·Var = (s²(δa+δb) + 3(δa−δb)²) / (s²(s+1)), s = 2 + δa + δb,
/// so their values stay smooth enough for finite differences to track.
pub(crate) fn build_buce_tape(
    tape: &mut Tape,
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
    grid: &LabeledGrid,
    cfg: &LossConfig,
) -> BuceTape {
    let vars_in = flows.flow_in.leaves_on(tape);
    let vars_out = flows.flow_out.leaves_on(tape);
    let hvars = head.leaves_on(tape);
    let param_count =
        flows.flow_in.param_count() + flows.flow_out.param_count() + head.param_count();

    let n = grid.cell_count();
    let mut ce_terms = Vec::with_capacity(n);
    let mut uce_terms = Vec::new();
    let mut bce_terms = Vec::with_capacity(n);
    let mut out_terms = Vec::new();

    for cell in 0..n {
        let x = grid.feature_flat(cell);
        let label = grid.labels()[cell]; // 1 = inlier
        let masked = label == 0;

        // cross-entropy against the one-hot pseudo-target
        let logits = head.logits_tape(tape, &hvars, x);
        let m = tape.max(logits[0], logits[1]);
        let d0 = tape.sub(logits[0], m);
        let d1 = tape.sub(logits[1], m);
        let e0 = tape.exp(d0);
        let e1 = tape.exp(d1);
        let z = tape.add(e0, e1);
        let lnz = tape.ln(z);
        let lse = tape.add(m, lnz);
        let l_target = if label == 1 { logits[0] } else { logits[1] };
        ce_terms.push(tape.sub(lse, l_target));

        // Beta parameters from the two flow log-densities
        let lp_in = flows.flow_in.log_prob_tape(tape, &vars_in, x);
        let lp_out = flows.flow_out.log_prob_tape(tape, &vars_out, x);
        let nodes = beta_nodes_tape(tape, lp_in, lp_out, cfg.beta_mode);
        let (alpha, beta) = (nodes.alpha, nodes.beta);

        // UCE: inlier cells contribute the digamma bracket, every cell the
        // entropy regularizer
        if !masked {
            let s = tape.add(alpha, beta);
            let ps = tape.digamma(s);
            let pa = tape.digamma(alpha);
            let pb = tape.digamma(beta);
            let t = tape.sub(ps, pa);
            uce_terms.push(tape.sub(t, pb));
        }
        if cfg.lambda_reg != 0.0 {
            let h = beta_diff_entropy_tape(tape, alpha, beta);
            uce_terms.push(tape.scale(h, -cfg.lambda_reg));
        }

        // Var and its normalized complement from the excess nodes
        let sum_excess = tape.add(nodes.excess_in, nodes.excess_out);
        let s = tape.add_const(sum_excess, 2.0);
        let s2 = tape.mul(s, s);
        let s1 = tape.add_const(s, 1.0);
        let den = tape.mul(s2, s1);
        let ab = tape.mul(alpha, beta);
        let var_cell = tape.div(ab, den);
        let diff = tape.sub(nodes.excess_in, nodes.excess_out);
        let diff2 = tape.mul(diff, diff);
        let t1 = tape.mul(s2, sum_excess);
        let t2 = tape.scale(diff2, 3.0);
        let gap_num = tape.add(t1, t2);
        let one_minus_v = tape.div(gap_num, den); // 1 − 12·Var

        // variance consistency BCE
        let bce = if cfg.var_normalize {
            if masked {
                let v = tape.scale(var_cell, 12.0);
                let vc = tape.clamp(v, PROB_FLOOR, 1.0 - PROB_FLOOR);
                let lnv = tape.ln(vc);
                tape.neg(lnv)
            } else {
                let omc = tape.clamp(one_minus_v, PROB_FLOOR, 1.0 - PROB_FLOOR);
                let ln_om = tape.ln(omc);
                tape.neg(ln_om)
            }
        } else {
            let vc = tape.clamp(var_cell, PROB_FLOOR, 1.0 - PROB_FLOOR);
            if masked {
                let lnv = tape.ln(vc);
                tape.neg(lnv)
            } else {
                let neg_v = tape.scale(vc, -1.0);
                let om = tape.add_const(neg_v, 1.0);
                let ln_om = tape.ln(om);
                tape.neg(ln_om)
            }
        };
        bce_terms.push(bce);

        // outlier variance term
        if cfg.out_enabled && masked {
            match cfg.out_mode {
                OutMode::Literal => {
                    let neg = tape.neg(var_cell);
                    out_terms.push(tape.relu(neg));
                }
                OutMode::Hinge => {
                    out_terms.push(tape.scale(one_minus_v, VAR_MAX));
                }
            }
        }
    }

    let ce_sum = tape.sum(&ce_terms);
    let ce = tape.scale(ce_sum, 1.0 / n as f64);
    let uce_sum = tape.sum(&uce_terms);
    let uce = tape.scale(uce_sum, cfg.uce_scale);
    let bce_sum = tape.sum(&bce_terms);
    let var = tape.scale(bce_sum, 1.0 / n as f64);
    let out = tape.sum(&out_terms);

    let w_uce = tape.scale(uce, cfg.lambda1);
    let w_var = tape.scale(var, cfg.lambda2);
    let mut total = tape.add(ce, w_uce);
    total = tape.add(total, w_var);
    total = tape.add(total, out);

    BuceTape {
        param_count,
        ce,
        uce,
        var,
        out,
        total,
    }
}

struct CellBeta {
    alpha: f64,
    beta: f64,
    excess_in: f64,
    excess_out: f64,
}

fn cell_beta(lp_in: f64, lp_out: f64, mode: BetaMode) -> CellBeta {
    let (excess_in, excess_out) = match mode {
        BetaMode::SoftplusLogit => (
            crate::special::softplus_raw(lp_in),
            crate::special::softplus_raw(lp_out),
        ),
        BetaMode::Contextual => (
            lp_in.max(crate::beta::CONTEXTUAL_EPS),
            lp_out.max(crate::beta::CONTEXTUAL_EPS),
        ),
    };
    CellBeta {
        alpha: 1.0 + excess_in,
        beta: 1.0 + excess_out,
        excess_in,
        excess_out,
    }
}

impl CellBeta {
    fn variance(&self) -> f64 {
        let s = 2.0 + self.excess_in + self.excess_out;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    /// 1 − 12·Var without cancellation at the (1,1) corner.
    fn one_minus_norm_var(&self) -> f64 {
        let sum = self.excess_in + self.excess_out;
        let s = 2.0 + sum;
        let s2 = s * s;
        let diff = self.excess_in - self.excess_out;
        (s2 * sum + 3.0 * diff * diff) / (s2 * (s + 1.0))
    }
}

/// Tape-free evaluation of the same objective; [`grad_check`] differences
/// this path against the tape gradients.
pub fn eval_buce(
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
    grid: &LabeledGrid,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if grid.feat_dim() != flows.dim() {
        return Err(Error::shape(format!(
            "grid features have dimension {}, flows expect {}",
            grid.feat_dim(),
            flows.dim()
        )));
    }
    let n = grid.cell_count();
    let mut ce_sum = 0.0;
    let mut uce_sum = 0.0;
    let mut bce_sum = 0.0;
    let mut out_sum = 0.0;
    for cell in 0..n {
        let x = grid.feature_flat(cell);
        let masked = grid.labels()[cell] == 0;

        let probs = head.probs(x)?;
        let target = if masked { [0.0, 1.0] } else { [1.0, 0.0] };
        ce_sum += ce_loss(&probs, &target)?;

        let lp_in = flows.flow_in.log_prob(x)?;
        let lp_out = flows.flow_out.log_prob(x)?;
        let cb = cell_beta(lp_in, lp_out, cfg.beta_mode);

        if !masked {
            uce_sum +=
                digamma_raw(cb.alpha + cb.beta) - digamma_raw(cb.alpha) - digamma_raw(cb.beta);
        }
        if cfg.lambda_reg != 0.0 {
            let p = crate::beta::BetaParams::new(cb.alpha, cb.beta)?;
            uce_sum -= cfg.lambda_reg * crate::beta::beta_diff_entropy(p);
        }

        let var = cb.variance();
        if cfg.var_normalize {
            if masked {
                bce_sum += -(12.0 * var).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln();
            } else {
                bce_sum += -cb
                    .one_minus_norm_var()
                    .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
                    .ln();
            }
        } else {
            let vc = var.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            bce_sum += if masked { -vc.ln() } else { -(1.0 - vc).ln() };
        }

        if cfg.out_enabled && masked {
            match cfg.out_mode {
                OutMode::Literal => out_sum += (-var).max(0.0),
                OutMode::Hinge => out_sum += VAR_MAX * cb.one_minus_norm_var(),
            }
        }
    }
    LossBreakdown::compose(
        ce_sum / n as f64,
        cfg.uce_scale * uce_sum,
        bce_sum / n as f64,
        out_sum,
        cfg.lambda1,
        cfg.lambda2,
    )
}

fn breakdown_term(b: &LossBreakdown, term: LossTerm) -> f64 {
    match term {
        LossTerm::Ce => b.ce,
        LossTerm::Uce => b.uce,
        LossTerm::Var => b.var,
        LossTerm::Out => b.out,
        LossTerm::Total => b.total,
    }
}

pub const GRAD_CHECK_TERMS: [(&str, LossTerm); 5] = [
    ("ce", LossTerm::Ce),
    ("uce", LossTerm::Uce),
    ("var", LossTerm::Var),
    ("out", LossTerm::Out),
    ("total", LossTerm::Total),
];

/// Maximum relative disagreement between tape gradients and central
/// differences of the plain evaluation, per loss term, over every flow and
/// head parameter. One finite-difference sweep covers all terms.
pub fn grad_check_report(
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
    grid: &LabeledGrid,
    cfg: &LossConfig,
    step: f64,
) -> Result<[(LossTerm, f64); 5]> {
    let mut tape = Tape::new();
    let built = build_buce_tape(&mut tape, flows, head, grid, cfg);
    let analytic: Vec<Vec<f64>> = GRAD_CHECK_TERMS
        .iter()
        .map(|&(_, term)| {
            tape.backward(built.term(term))
                .leading(built.param_count)
                .to_vec()
        })
        .collect();

    let n_in = flows.flow_in.param_count();
    let n_out = flows.flow_out.param_count();
    let mut params: Vec<f64> = flows.flow_in.params();
    params.extend(flows.flow_out.params());
    params.extend(head.params());

    let mut flows_fd = flows.clone();
    let mut head_fd = head.clone();
    let mut eval_at = |p: &[f64]| -> Result<LossBreakdown> {
        flows_fd.flow_in.set_params(&p[..n_in])?;
        flows_fd.flow_out.set_params(&p[n_in..n_in + n_out])?;
        head_fd.set_params(&p[n_in + n_out..])?;
        eval_buce(&flows_fd, &head_fd, grid, cfg)
    };

    let mut worst = [0.0f64; 5];
    let mut probe = params.clone();
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = eval_at(&probe)?;
        probe[i] = params[i] - step;
        let minus = eval_at(&probe)?;
        probe[i] = params[i];
        for (t, &(_, term)) in GRAD_CHECK_TERMS.iter().enumerate() {
            let fd = (breakdown_term(&plus, term) - breakdown_term(&minus, term)) / (2.0 * step);
            let a = analytic[t][i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            worst[t] = worst[t].max((a - fd).abs() / denom);
        }
    }
    Ok([
        (LossTerm::Ce, worst[0]),
        (LossTerm::Uce, worst[1]),
        (LossTerm::Var, worst[2]),
        (LossTerm::Out, worst[3]),
        (LossTerm::Total, worst[4]),
    ])
}

/// [`grad_check_report`] reduced to a single term.
pub fn grad_check(
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
    grid: &LabeledGrid,
    cfg: &LossConfig,
    term: LossTerm,
    step: f64,
) -> Result<f64> {
    let report = grad_check_report(flows, head, grid, cfg, step)?;
    Ok(report
        .iter()
        .find(|(t, _)| *t == term)
        .expect("term present in report")
        .1)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

const PHASE_FLOW: u64 = 1;
const PHASE_BUCE: u64 = 2;
const PHASE_SAMPLER: u64 = 3;

/// Loss-window divergence guard over non-overlapping 50-step window means.
/// Stops when a window mean climbs clear of the best mean seen so far;
/// the slack rides out scene-to-scene minibatch noise around a plateau.
struct WindowGuard {
    window: usize,
    acc: f64,
    count: usize,
    best: Option<f64>,
}

impl WindowGuard {
    fn new(window: usize) -> Self {
        Self {
            window,
            acc: 0.0,
            count: 0,
            best: None,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64) -> bool {
        self.acc += loss;
        self.count += 1;
        if self.count < self.window {
            return false;
        }
        let mean = self.acc / self.window as f64;
        self.acc = 0.0;
        self.count = 0;
        let stop = match self.best {
            Some(best) => mean > best + (0.05 * best.abs()).max(2.0),
            None => false,
        };
        if self.best.is_none_or(|b| mean < b) {
            self.best = Some(mean);
        }
        stop
    }
}

/// Splitmix-style seed derivation for (run seed, phase, step) triples.
pub(crate) fn mix_seed(seed: u64, phase: u64, step: u64) -> u64 {
    let mut z =
        seed ^ phase.wrapping_mul(0x9e3779b97f4a7c15) ^ step.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Pick `k` distinct elements of `pool` (order-stable partial shuffle).
fn sample_cells(pool: &mut [usize], k: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<usize> {
    use rand_core::RngCore;
    let k = k.min(pool.len());
    let len = pool.len();
    for i in 0..k {
        let j = i + (rng.next_u64() as usize) % (len - i);
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

pub struct Trainer {
    config: TrainConfig,
    backbone: Option<FrozenBackbone>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = if config.use_backbone {
            Some(FrozenBackbone::new(config.seed, config.feature_dim)?)
        } else {
            None
        };
        Ok(Self { config, backbone })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone(&self) -> Option<&FrozenBackbone> {
        self.backbone.as_ref()
    }

    /// Identity-initialized model pair (the step-0 state of training).
    pub fn identity_flows(&self) -> Result<ClassConditionalFlows> {
        let dim = self.config.flow_dim();
        let flow_in = FlowModel::identity(
            dim,
            self.config.flow_blocks,
            self.config.hidden_width,
            mix_seed(self.config.seed, 7, 0),
        )?;
        let flow_out = FlowModel::identity(
            dim,
            self.config.flow_blocks,
            self.config.hidden_width,
            mix_seed(self.config.seed, 7, 1),
        )?;
        ClassConditionalFlows::new(flow_in, flow_out, self.config.prior_in)
    }

    pub fn identity_head(&self) -> Result<ResidualHead> {
        ResidualHead::new(self.config.flow_dim())
    }

    /// Fresh outlier-exposure scene for a given phase and step, embedded when
    /// a backbone is configured.
    pub fn scene(&self, phase: u64, step: u64) -> Result<LabeledGrid> {
        let raw = mix_scene(
            self.config.grid_height,
            self.config.grid_width,
            self.config.outlier_fraction,
            mix_seed(self.config.seed, phase, step),
        )?;
        match &self.backbone {
            Some(b) => embed(b, &raw),
            None => Ok(raw),
        }
    }

    /// Phase 1: fit the inlier flow on inlier cells and the outlier flow on
    /// masked cells by minimizing mean free energy.
    pub fn fit_flows(
        &self,
        init: Option<ClassConditionalFlows>,
    ) -> Result<(ClassConditionalFlows, Vec<LossRow>)> {
        let mut flows = match init {
            Some(f) => f,
            None => self.identity_flows()?,
        };
        let n_in = flows.flow_in.param_count();
        let mut params = flows.flow_in.params();
        params.extend(flows.flow_out.params());
        let hyper = self.config.adam();
        let mut adam = AdamState::new(params.len());
        let mut guard = WindowGuard::new(50);
        let mut history = Vec::with_capacity(self.config.steps_flow);
        let mut tape = Tape::new();

        for step in 0..self.config.steps_flow {
            let grid = self.scene(PHASE_FLOW, step as u64)?;
            let mut rng = crate::data::rng_for(
                mix_seed(self.config.seed, PHASE_SAMPLER, step as u64),
                PHASE_FLOW,
            );
            let mut in_pool: Vec<usize> = (0..grid.cell_count())
                .filter(|&c| grid.labels()[c] == 1)
                .collect();
            let mut out_pool: Vec<usize> = (0..grid.cell_count())
                .filter(|&c| grid.labels()[c] == 0)
                .collect();
            let in_cells = sample_cells(&mut in_pool, self.config.cells_per_step, &mut rng);
            let out_cells = sample_cells(&mut out_pool, self.config.cells_per_step, &mut rng);

            tape.reset();
            let vars_in = flows.flow_in.leaves_on(&mut tape);
            let vars_out = flows.flow_out.leaves_on(&mut tape);

            let mut total = tape.leaf(0.0);
            for (cells, flow, vars) in [
                (&in_cells, &flows.flow_in, &vars_in),
                (&out_cells, &flows.flow_out, &vars_out),
            ] {
                if cells.is_empty() {
                    continue;
                }
                let mut terms = Vec::with_capacity(cells.len());
                for &cell in cells.iter() {
                    let lp = flow.log_prob_tape(&mut tape, vars, grid.feature_flat(cell));
                    terms.push(tape.neg(lp));
                }
                let sum = tape.sum(&terms);
                let mean = tape.scale(sum, 1.0 / cells.len() as f64);
                total = tape.add(total, mean);
            }

            let loss = tape.value(total);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("flow NLL became {loss}"),
                });
            }
            let grads = tape.backward(total);
            let n_params = params.len();
            adam_step(&mut params, grads.leading(n_params), &mut adam, &hyper)?;
            flows.flow_in.set_params(&params[..n_in])?;
            flows.flow_out.set_params(&params[n_in..])?;

            history.push(LossRow {
                step,
                ce: 0.0,
                uce: 0.0,
                var: 0.0,
                out: 0.0,
                total: loss,
            });
            if guard.observe(loss) {
                break;
            }
        }
        Ok((flows, history))
    }

    /// Phase 2: Adam on the BUCE total; gradients reach the head always and
    /// the flows when `update_flows_in_buce` is set.
    pub fn fit_buce(
        &self,
        flows: ClassConditionalFlows,
        head: ResidualHead,
    ) -> Result<(ClassConditionalFlows, ResidualHead, Vec<LossRow>)> {
        let mut flows = flows;
        let mut head = head;
        let n_in = flows.flow_in.param_count();
        let n_out = flows.flow_out.param_count();
        let n_flow = n_in + n_out;
        let mut params = flows.flow_in.params();
        params.extend(flows.flow_out.params());
        params.extend(head.params());
        let hyper = self.config.adam();
        let mut adam = AdamState::new(params.len());
        let mut history = Vec::with_capacity(self.config.steps_buce);
        let mut tape = Tape::new();

        for step in 0..self.config.steps_buce {
            let grid = self.scene(PHASE_BUCE, step as u64)?;
            let mut rng = crate::data::rng_for(
                mix_seed(self.config.seed, PHASE_SAMPLER, step as u64),
                PHASE_BUCE,
            );
            let mut pool: Vec<usize> = (0..grid.cell_count()).collect();
            let cells = sample_cells(&mut pool, self.config.cells_per_step, &mut rng);
            let sub = grid.subset(&cells)?;

            tape.reset();
            let built = build_buce_tape(&mut tape, &flows, &head, &sub, &self.config.loss);
            let row = LossRow {
                step,
                ce: tape.value(built.ce),
                uce: tape.value(built.uce),
                var: tape.value(built.var),
                out: tape.value(built.out),
                total: tape.value(built.total),
            };
            if !row.total.is_finite() {
                let offender = [
                    ("ce", row.ce),
                    ("uce", row.uce),
                    ("var", row.var),
                    ("out", row.out),
                ]
                .iter()
                .find(|(_, v)| !v.is_finite())
                .map(|(n, _)| *n)
                .unwrap_or("total");
                return Err(Error::Training {
                    step,
                    reason: format!("{offender} term became non-finite"),
                });
            }

            let grads = tape.backward(built.total);
            let mut g = grads.leading(built.param_count).to_vec();
            if !self.config.update_flows_in_buce {
                g[..n_flow].iter_mut().for_each(|v| *v = 0.0);
            }
            adam_step(&mut params, &g, &mut adam, &hyper)?;
            flows.flow_in.set_params(&params[..n_in])?;
            flows.flow_out.set_params(&params[n_in..n_flow])?;
            head.set_params(&params[n_flow..])?;

            history.push(row);
        }
        Ok((flows, head, history))
    }
}
