//! Invertible coupling-block flow with a Gaussian free-energy head per class.
//!
//! Each coupling block transforms half of the dimensions as an affine
//! function of the other half (scale bounded by a smooth tanh squash, so the
//! log-determinant cannot blow up), giving an exactly invertible map with a
//! triangular Jacobian. The head scores the latent with a Gaussian whose
//! inverse covariance is carried as a triangular factor U, so the
//! log-density is Σ log diag(U) − ½‖U(u−μ)‖² − (D/2)·ln 2π.

#![allow(clippy::needless_range_loop)] // triangular-index loops read best bare

use rand_chacha::ChaCha20Rng;

use crate::beta::{beta_from_log_densities_contextual, beta_from_logits, BetaField, BetaMode};
use crate::data::normal_pair;
use crate::error::{Error, Result};
use crate::grid::LabeledGrid;
use crate::parallel::map_indexed;
use crate::tape::{Tape, Var};

/// Coupling scale outputs are squashed into [−SCALE_BOUND, SCALE_BOUND].
pub const SCALE_BOUND: f64 = 5.0;

const LN_TAU: f64 = 1.8378770664093453; // ln 2π

fn bound_scale(raw: f64) -> f64 {
    SCALE_BOUND * (raw / SCALE_BOUND).tanh()
}

// ---------------------------------------------------------------------------
// Small two-layer perceptron (tanh hidden layer, linear output)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w1: Vec<f64>, // hidden × in_dim
    b1: Vec<f64>,
    w2: Vec<f64>, // out_dim × hidden
    b2: Vec<f64>,
}

impl Mlp {
    /// Random tanh layer, zero-initialized output layer (so the net is the
    /// constant zero function at step 0).
    fn zero_output(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut w1 = Vec::with_capacity(hidden * in_dim);
        while w1.len() < hidden * in_dim {
            let (a, b) = normal_pair(rng);
            w1.push(a * scale);
            if w1.len() < hidden * in_dim {
                w1.push(b * scale);
            }
        }
        Self {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut h = vec![0.0; self.hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = self.b1[j];
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *hj = acc.tanh();
        }
        let mut out = vec![0.0; self.out_dim];
        for (k, ok) in out.iter_mut().enumerate() {
            let mut acc = self.b2[k];
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            for (w, hj) in row.iter().zip(&h) {
                acc += w * hj;
            }
            *ok = acc;
        }
        out
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn append_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
    }

    fn read_params(&mut self, params: &[f64], cursor: &mut usize) {
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let len = dst.len();
            dst.copy_from_slice(&params[*cursor..*cursor + len]);
            *cursor += len;
        }
    }

    fn leaves_on(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: self.w1.iter().map(|&v| tape.leaf(v)).collect(),
            b1: self.b1.iter().map(|&v| tape.leaf(v)).collect(),
            w2: self.w2.iter().map(|&v| tape.leaf(v)).collect(),
            b2: self.b2.iter().map(|&v| tape.leaf(v)).collect(),
        }
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: &[Var]) -> Vec<Var> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut h = Vec::with_capacity(self.hidden);
        for j in 0..self.hidden {
            let mut acc = vars.b1[j];
            for (i, &xi) in x.iter().enumerate() {
                let prod = tape.mul(vars.w1[j * self.in_dim + i], xi);
                acc = tape.add(acc, prod);
            }
            h.push(tape.tanh(acc));
        }
        let mut out = Vec::with_capacity(self.out_dim);
        for k in 0..self.out_dim {
            let mut acc = vars.b2[k];
            for (j, &hj) in h.iter().enumerate() {
                let prod = tape.mul(vars.w2[k * self.hidden + j], hj);
                acc = tape.add(acc, prod);
            }
            out.push(acc);
        }
        out
    }
}

pub struct MlpVars {
    w1: Vec<Var>,
    b1: Vec<Var>,
    w2: Vec<Var>,
    b2: Vec<Var>,
}

// ---------------------------------------------------------------------------
// Coupling block
// ---------------------------------------------------------------------------

/// One affine coupling layer. `mask[i] == true` marks a conditioning
/// dimension that passes through unchanged; the rest are transformed as
/// y = x·exp(s) + t with (s, t) functions of the conditioning part.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    mask: Vec<bool>,
    scale: Mlp,
    shift: Mlp,
}

impl CouplingBlock {
    pub fn new(mask: Vec<bool>, hidden: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        let cond = mask.iter().filter(|&&m| m).count();
        let trans = mask.len() - cond;
        if cond == 0 || trans == 0 {
            return Err(Error::domain(
                "coupling mask must be neither all-zeros nor all-ones",
            ));
        }
        Ok(Self {
            scale: Mlp::zero_output(cond, hidden, trans, rng),
            shift: Mlp::zero_output(cond, hidden, trans, rng),
            mask,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn gather_cond(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect()
    }

    /// In-place forward; returns the block's log-Jacobian-determinant.
    fn forward_in_place(&self, x: &mut [f64]) -> f64 {
        let cond = self.gather_cond(x);
        let s_raw = self.scale.forward(&cond);
        let t = self.shift.forward(&cond);
        let mut log_det = 0.0;
        let mut k = 0;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                let s = bound_scale(s_raw[k]);
                x[i] = x[i] * s.exp() + t[k];
                log_det += s;
                k += 1;
            }
        }
        log_det
    }

    fn inverse_in_place(&self, y: &mut [f64]) {
        let cond = self.gather_cond(y);
        let s_raw = self.scale.forward(&cond);
        let t = self.shift.forward(&cond);
        let mut k = 0;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                let s = bound_scale(s_raw[k]);
                y[i] = (y[i] - t[k]) * (-s).exp();
                k += 1;
            }
        }
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &BlockVars, x: &[Var]) -> (Vec<Var>, Var) {
        let cond: Vec<Var> = x
            .iter()
            .zip(&self.mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect();
        let s_raw = self.scale.forward_tape(tape, &vars.scale, &cond);
        let t = self.shift.forward_tape(tape, &vars.shift, &cond);
        let mut y = x.to_vec();
        let mut log_det = tape.leaf(0.0);
        let mut k = 0;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                // s = B·tanh(raw/B)
                let inner = tape.scale(s_raw[k], 1.0 / SCALE_BOUND);
                let squashed = tape.tanh(inner);
                let s = tape.scale(squashed, SCALE_BOUND);
                let es = tape.exp(s);
                let scaled = tape.mul(y[i], es);
                y[i] = tape.add(scaled, t[k]);
                log_det = tape.add(log_det, s);
                k += 1;
            }
        }
        (y, log_det)
    }
}

pub struct BlockVars {
    scale: MlpVars,
    shift: MlpVars,
}

pub struct HeadVars {
    mu: Vec<Var>,
    log_diag: Vec<Var>,
    lower: Vec<Var>,
}

// ---------------------------------------------------------------------------
// Gaussian head
// ---------------------------------------------------------------------------

/// Gaussian scorer over the latent. `log_diag` holds the log of diag(U) and
/// `lower` the strictly-lower-triangular entries of U (row-major), where
/// Σ⁻¹ = UᵀU.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    mu: Vec<f64>,
    log_diag: Vec<f64>,
    lower: Vec<f64>,
}

impl GaussianHead {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_diag: vec![0.0; dim],
            lower: vec![0.0; dim * (dim - 1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Σ log diag(U) − ½‖U(u−μ)‖², minus (D/2)·ln 2π when `include_const`.
    pub fn log_density(&self, u: &[f64], include_const: bool) -> Result<f64> {
        let dim = self.dim();
        if u.len() != dim {
            return Err(Error::shape(format!(
                "gaussian head expects dimension {dim}, got {}",
                u.len()
            )));
        }
        Ok(self.log_density_unchecked(u, include_const))
    }

    fn log_density_unchecked(&self, u: &[f64], include_const: bool) -> f64 {
        let dim = self.dim();
        let r: Vec<f64> = u.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for i in 0..dim {
            let mut v = self.log_diag[i].exp() * r[i];
            let off = (i * i - i) / 2;
            for j in 0..i {
                v += self.lower[off + j] * r[j];
            }
            quad += v * v;
            log_det += self.log_diag[i];
        }
        let mut out = log_det - 0.5 * quad;
        if include_const {
            out -= 0.5 * dim as f64 * LN_TAU;
        }
        out
    }

    /// Dense U, for oracle comparisons.
    pub fn factor_matrix(&self) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut m = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            m[i][i] = self.log_diag[i].exp();
            let off = (i * i - i) / 2;
            for j in 0..i {
                m[i][j] = self.lower[off + j];
            }
        }
        m
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    fn param_count(&self) -> usize {
        self.mu.len() + self.log_diag.len() + self.lower.len()
    }

    fn append_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.log_diag);
        out.extend_from_slice(&self.lower);
    }

    fn read_params(&mut self, params: &[f64], cursor: &mut usize) {
        for dst in [&mut self.mu, &mut self.log_diag, &mut self.lower] {
            let len = dst.len();
            dst.copy_from_slice(&params[*cursor..*cursor + len]);
            *cursor += len;
        }
    }

    fn leaves_on(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            mu: self.mu.iter().map(|&v| tape.leaf(v)).collect(),
            log_diag: self.log_diag.iter().map(|&v| tape.leaf(v)).collect(),
            lower: self.lower.iter().map(|&v| tape.leaf(v)).collect(),
        }
    }

    fn log_density_tape(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        u: &[Var],
        include_const: bool,
    ) -> Var {
        let dim = self.dim();
        let r: Vec<Var> = (0..dim).map(|i| tape.sub(u[i], vars.mu[i])).collect();
        let mut acc = tape.leaf(0.0);
        for i in 0..dim {
            let di = tape.exp(vars.log_diag[i]);
            let mut v = tape.mul(di, r[i]);
            let off = (i * i - i) / 2;
            for j in 0..i {
                let term = tape.mul(vars.lower[off + j], r[j]);
                v = tape.add(v, term);
            }
            let v2 = tape.mul(v, v);
            let half = tape.scale(v2, -0.5);
            acc = tape.add(acc, half);
            acc = tape.add(acc, vars.log_diag[i]);
        }
        if include_const {
            acc = tape.add_const(acc, -0.5 * dim as f64 * LN_TAU);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Flow model
// ---------------------------------------------------------------------------

/// Stack of coupling blocks plus a Gaussian head.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    hidden: usize,
    blocks: Vec<CouplingBlock>,
    head: GaussianHead,
}

/// Tape handles for every parameter of a [`FlowModel`], in the same order as
/// [`FlowModel::append_params`].
pub struct FlowVars {
    blocks: Vec<BlockVars>,
    head: HeadVars,
}

impl FlowModel {
    /// Identity-initialized flow: coupling nets output zero and the head is
    /// standard normal, so forward(x) = (x, 0) at step 0. Hidden layers are
    /// seeded randomly.
    pub fn identity(dim: usize, n_blocks: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::domain("flow dimension must be at least 2"));
        }
        if n_blocks == 0 || hidden == 0 {
            return Err(Error::domain(
                "flow needs at least one block and one hidden unit",
            ));
        }
        let mut rng = crate::data::rng_for(seed, 0x666c_6f77);
        let blocks = (0..n_blocks)
            .map(|k| {
                let mask: Vec<bool> = (0..dim).map(|i| i % 2 == k % 2).collect();
                CouplingBlock::new(mask, hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            hidden,
            blocks,
            head: GaussianHead::standard(dim),
        })
    }

    /// Identity structure with all parameters drawn from N(0, spread²);
    /// used by tests that need a generic non-trivial flow.
    pub fn random(
        dim: usize,
        n_blocks: usize,
        hidden: usize,
        seed: u64,
        spread: f64,
    ) -> Result<Self> {
        let mut model = Self::identity(dim, n_blocks, hidden, seed)?;
        let mut rng = crate::data::rng_for(seed, 0x726e64);
        let mut params = Vec::with_capacity(model.param_count());
        while params.len() < model.param_count() {
            let (a, b) = normal_pair(&mut rng);
            params.push(a * spread);
            if params.len() < model.param_count() {
                params.push(b * spread);
            }
        }
        model.set_params(&params)?;
        Ok(model)
    }

    /// Rebuild from serialized parts (checkpoint loading).
    pub fn from_parts(
        dim: usize,
        hidden: usize,
        masks: Vec<Vec<bool>>,
        params: &[f64],
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::domain("flow dimension must be at least 2"));
        }
        let mut rng = crate::data::rng_for(0, 0);
        let blocks = masks
            .into_iter()
            .map(|mask| {
                if mask.len() != dim {
                    return Err(Error::shape("mask length does not match flow dimension"));
                }
                CouplingBlock::new(mask, hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            dim,
            hidden,
            blocks,
            head: GaussianHead::standard(dim),
        };
        model.set_params(params)?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &GaussianHead {
        &self.head
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "flow expects dimension {}, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// u = s_n ∘ … ∘ s_1(x) with the exact sum of per-block log-dets.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut u = x.to_vec();
        let mut log_det = 0.0;
        for block in &self.blocks {
            log_det += block.forward_in_place(&mut u);
        }
        (u, log_det)
    }

    /// Exact inverse of [`FlowModel::forward`].
    pub fn inverse(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let mut x = u.to_vec();
        for block in self.blocks.iter().rev() {
            block.inverse_in_place(&mut x);
        }
        Ok(x)
    }

    /// Change-of-variables log-density: log N(forward(x)) + log|det J|.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_prob_unchecked(x))
    }

    pub(crate) fn log_prob_unchecked(&self, x: &[f64]) -> f64 {
        let (u, log_det) = self.forward_unchecked(x);
        self.head.log_density_unchecked(&u, true) + log_det
    }

    /// Free energy = −log_prob; low energy marks familiar inputs.
    pub fn free_energy(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_prob(x)?)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.scale.param_count() + b.shift.param_count())
            .sum::<usize>()
            + self.head.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in &self.blocks {
            block.scale.append_params(&mut out);
            block.shift.append_params(&mut out);
        }
        self.head.append_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flow has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut cursor = 0;
        for block in &mut self.blocks {
            block.scale.read_params(params, &mut cursor);
            block.shift.read_params(params, &mut cursor);
        }
        self.head.read_params(params, &mut cursor);
        Ok(())
    }

    /// Push every parameter as a tape leaf, in [`FlowModel::params`] order.
    pub fn leaves_on(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    scale: b.scale.leaves_on(tape),
                    shift: b.shift.leaves_on(tape),
                })
                .collect(),
            head: self.head.leaves_on(tape),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &FlowVars, x: &[f64]) -> (Vec<Var>, Var) {
        debug_assert_eq!(x.len(), self.dim);
        let mut u: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let mut log_det = tape.leaf(0.0);
        for (block, bvars) in self.blocks.iter().zip(&vars.blocks) {
            let (next, det) = block.forward_tape(tape, bvars, &u);
            u = next;
            log_det = tape.add(log_det, det);
        }
        (u, log_det)
    }

    pub fn log_prob_tape(&self, tape: &mut Tape, vars: &FlowVars, x: &[f64]) -> Var {
        let (u, log_det) = self.forward_tape(tape, vars, x);
        let base = self.head.log_density_tape(tape, &vars.head, &u, true);
        tape.add(base, log_det)
    }
}

/// Normalize a pair of joint log-densities into a posterior, stabilized by
/// the log-sum-exp shift (so adding a common constant to both inputs leaves
/// the result unchanged).
pub fn normalize_log_posterior(a: f64, b: f64) -> Result<(f64, f64)> {
    let m = a.max(b);
    if !m.is_finite() {
        return Err(Error::Degenerate(
            "both class likelihoods underflowed; posterior undefined".into(),
        ));
    }
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    Ok((ea / z, eb / z))
}

// ---------------------------------------------------------------------------
// Class-conditional pair
// ---------------------------------------------------------------------------

/// Inlier flow P, outlier flow Q and the inlier prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalFlows {
    pub flow_in: FlowModel,
    pub flow_out: FlowModel,
    prior_in: f64,
}

impl ClassConditionalFlows {
    pub fn new(flow_in: FlowModel, flow_out: FlowModel, prior_in: f64) -> Result<Self> {
        if !(prior_in > 0.0 && prior_in < 1.0) {
            return Err(Error::domain(format!(
                "prior_in must lie strictly inside (0,1), got {prior_in}"
            )));
        }
        if flow_in.dim() != flow_out.dim() {
            return Err(Error::shape("class flows must share a dimension"));
        }
        Ok(Self {
            flow_in,
            flow_out,
            prior_in,
        })
    }

    pub fn dim(&self) -> usize {
        self.flow_in.dim()
    }

    pub fn prior_in(&self) -> f64 {
        self.prior_in
    }

    /// Normalized Bayes posterior over {in, out}, computed in log-space with
    /// log-sum-exp stabilization.
    pub fn class_posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        normalize_log_posterior(
            self.flow_in.log_prob(x)? + self.prior_in.ln(),
            self.flow_out.log_prob(x)? + (1.0 - self.prior_in).ln(),
        )
    }

    /// Per-cell Beta parameters over a grid, in the requested mode.
    pub fn beta_field_from_flows(&self, grid: &LabeledGrid, mode: BetaMode) -> Result<BetaField> {
        if grid.feat_dim() != self.dim() {
            return Err(Error::shape(format!(
                "grid features have dimension {}, flows expect {}",
                grid.feat_dim(),
                self.dim()
            )));
        }
        let cells = grid.cell_count();
        let log_probs: Vec<(f64, f64)> = map_indexed(cells, |cell| {
            let x = grid.feature_flat(cell);
            (
                self.flow_in.log_prob_unchecked(x),
                self.flow_out.log_prob_unchecked(x),
            )
        });
        let mut params = Vec::with_capacity(cells);
        for (lp_in, lp_out) in log_probs {
            params.push(match mode {
                BetaMode::SoftplusLogit => beta_from_logits(lp_in, lp_out)?,
                BetaMode::Contextual => beta_from_log_densities_contextual(lp_in, lp_out)?,
            });
        }
        BetaField::new(grid.height(), grid.width(), params)
    }
}
