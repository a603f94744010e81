//! Beta evidential posterior: parameterization from flow log-probabilities,
//! expectation, thresholded prediction, variance and differential entropy.
//!
//! `alpha` counts inlier pseudo-evidence and `beta` outlier pseudo-evidence.
//! The `1 + softplus(z)` construction keeps both at or above 1 for any real
//! logit, which pins the variance into (0, 1/12] with the maximum at (1, 1).

use std::io::Write;

use crate::error::{Error, Result};
use crate::special::{digamma_raw, log_beta_raw, softplus};
use crate::tape::{Tape, Var};

/// Clamp floor for the contextual `1 + log P` parameterization.
pub const CONTEXTUAL_EPS: f64 = 1e-6;

/// Per-sample parameters (α, β) of the Beta posterior over the inlier
/// probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    /// Validates α ≥ 1, β ≥ 1, both finite.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() || alpha < 1.0 || beta < 1.0 {
            return Err(Error::domain(format!(
                "Beta parameters must be finite and >= 1, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// How flow log-densities become Beta parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BetaMode {
    /// α = 1 + softplus(z_in), β = 1 + softplus(z_out). Default; keeps
    /// α, β ≥ 1 for any real logit.
    #[serde(rename = "softplus-logit")]
    SoftplusLogit,
    /// α = 1 + log P(z|c) clamped at 1 + ε. Literal contextual form; the
    /// clamp prevents parameters below 1 when the density is small.
    #[serde(rename = "contextual")]
    Contextual,
}

/// α = 1 + softplus(z_in), β = 1 + softplus(z_out).
pub fn beta_from_logits(z_in: f64, z_out: f64) -> Result<BetaParams> {
    let alpha = 1.0 + softplus(z_in)?;
    let beta = 1.0 + softplus(z_out)?;
    BetaParams::new(alpha, beta)
}

/// Contextual form: α = max(1 + log_p_in, 1 + ε), same for β.
pub fn beta_from_log_densities_contextual(log_p_in: f64, log_p_out: f64) -> Result<BetaParams> {
    if !log_p_in.is_finite() || !log_p_out.is_finite() {
        return Err(Error::domain(format!(
            "contextual log-densities must be finite, got ({log_p_in}, {log_p_out})"
        )));
    }
    let floor = 1.0 + CONTEXTUAL_EPS;
    BetaParams::new((1.0 + log_p_in).max(floor), (1.0 + log_p_out).max(floor))
}

/// Binary specialization of the Dirichlet certainty budget:
/// evidence = prior + N · P(c|z) · P(z).
pub fn beta_from_budget(p_class: f64, p_z: f64, beta_prior: f64, n_budget: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_class) {
        return Err(Error::domain(format!(
            "p_class must lie in [0,1], got {p_class}"
        )));
    }
    if p_z < 0.0 || !p_z.is_finite() {
        return Err(Error::domain(format!(
            "p_z must be non-negative, got {p_z}"
        )));
    }
    if beta_prior <= 0.0 || !beta_prior.is_finite() {
        return Err(Error::domain(format!(
            "beta_prior must be positive, got {beta_prior}"
        )));
    }
    if n_budget < 0.0 || !n_budget.is_finite() {
        return Err(Error::domain(format!(
            "n_budget must be non-negative, got {n_budget}"
        )));
    }
    Ok(beta_prior + n_budget * p_class * p_z)
}

/// Posterior mean E[p_in] = α / (α + β).
pub fn expected_inlier(p: BetaParams) -> f64 {
    p.alpha / (p.alpha + p.beta)
}

/// E[p_in] straight from a pair of class densities.
pub fn expected_inlier_from_densities(p_in: f64, p_out: f64) -> Result<f64> {
    if p_in < 0.0 || p_out < 0.0 {
        return Err(Error::domain(format!(
            "densities must be non-negative, got ({p_in}, {p_out})"
        )));
    }
    if p_in + p_out <= 0.0 {
        return Err(Error::Degenerate(
            "both class densities are zero; cannot normalize".into(),
        ));
    }
    Ok(p_in / (p_in + p_out))
}

/// Hard label: 1 if E[p_in] ≥ τ, else 0. τ is expected in [0, 1].
pub fn predict_label(p: BetaParams, tau: f64) -> u8 {
    if expected_inlier(p) >= tau {
        1
    } else {
        0
    }
}

/// Var[p] = αβ / ((α+β)²(α+β+1)); in (0, 1/12] for α, β ≥ 1.
pub fn beta_variance(p: BetaParams) -> f64 {
    let s = p.alpha + p.beta;
    (p.alpha * p.beta) / (s * s * (s + 1.0))
}

/// Differential entropy of Beta(α, β):
/// ln B(α,β) − (α−1)ψ(α) − (β−1)ψ(β) + (α+β−2)ψ(α+β).
pub fn beta_diff_entropy(p: BetaParams) -> f64 {
    // Evaluated in sorted argument order so (a, b) and (b, a) are
    // bit-identical.
    let (lo, hi) = if p.alpha <= p.beta {
        (p.alpha, p.beta)
    } else {
        (p.beta, p.alpha)
    };
    let s = lo + hi;
    log_beta_raw(lo, hi) - (lo - 1.0) * digamma_raw(lo) - (hi - 1.0) * digamma_raw(hi)
        + (s - 2.0) * digamma_raw(s)
}

/// Analytic (∂Var/∂α, ∂Var/∂β).
pub fn variance_grad(p: BetaParams) -> (f64, f64) {
    let (a, b) = (p.alpha, p.beta);
    let s = a + b;
    let s2 = s * s;
    let s1 = s + 1.0;
    let common = -2.0 * a * b / (s2 * s * s1) - a * b / (s2 * s1 * s1);
    (b / (s2 * s1) + common, a / (s2 * s1) + common)
}

// ---------------------------------------------------------------------------
// Tape variants used by the training path.
// ---------------------------------------------------------------------------

/// Beta parameters on the tape, carrying the evidence excesses α−1 and β−1
/// as their own nodes. Near the (1,1) corner the excesses hold full float
/// precision while the materialized α, β do not, so downstream terms that
/// would otherwise subtract to zero (variance gap, BCE complement) are built
/// from the excess nodes.
pub struct BetaNodes {
    pub alpha: Var,
    pub beta: Var,
    pub excess_in: Var,
    pub excess_out: Var,
}

/// (α, β) from flow log-densities on the tape, in either parameterization.
pub fn beta_nodes_tape(tape: &mut Tape, lp_in: Var, lp_out: Var, mode: BetaMode) -> BetaNodes {
    let (excess_in, excess_out) = match mode {
        BetaMode::SoftplusLogit => (tape.softplus(lp_in), tape.softplus(lp_out)),
        BetaMode::Contextual => {
            let floor = tape.leaf(CONTEXTUAL_EPS);
            (tape.max(lp_in, floor), tape.max(lp_out, floor))
        }
    };
    BetaNodes {
        alpha: tape.add_const(excess_in, 1.0),
        beta: tape.add_const(excess_out, 1.0),
        excess_in,
        excess_out,
    }
}

/// Var[p] on the tape.
pub fn beta_variance_tape(tape: &mut Tape, alpha: Var, beta: Var) -> Var {
    let s = tape.add(alpha, beta);
    let s1 = tape.add_const(s, 1.0);
    let num = tape.mul(alpha, beta);
    let s2 = tape.mul(s, s);
    let den = tape.mul(s2, s1);
    tape.div(num, den)
}

/// Differential entropy on the tape.
pub fn beta_diff_entropy_tape(tape: &mut Tape, alpha: Var, beta: Var) -> Var {
    let lb = tape.log_beta(alpha, beta);
    let pa = tape.digamma(alpha);
    let pb = tape.digamma(beta);
    let s = tape.add(alpha, beta);
    let ps = tape.digamma(s);
    let am1 = tape.add_const(alpha, -1.0);
    let bm1 = tape.add_const(beta, -1.0);
    let sm2 = tape.add_const(s, -2.0);
    let t1 = tape.mul(am1, pa);
    let t2 = tape.mul(bm1, pb);
    let t3 = tape.mul(sm2, ps);
    let x = tape.sub(lb, t1);
    let y = tape.sub(x, t2);
    tape.add(y, t3)
}

// ---------------------------------------------------------------------------
// BetaField
// ---------------------------------------------------------------------------

/// H×W raster of Beta parameters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaField {
    height: usize,
    width: usize,
    params: Vec<BetaParams>,
}

impl BetaField {
    pub fn new(height: usize, width: usize, params: Vec<BetaParams>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("BetaField dimensions must be positive"));
        }
        if params.len() != height * width {
            return Err(Error::shape(format!(
                "BetaField expects {}x{} = {} cells, got {}",
                height,
                width,
                height * width,
                params.len()
            )));
        }
        Ok(Self {
            height,
            width,
            params,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> BetaParams {
        self.params[row * self.width + col]
    }

    pub fn cells(&self) -> &[BetaParams] {
        &self.params
    }

    /// CSV with header `row,col,alpha,beta`, row-major, 17 significant
    /// digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,alpha,beta")?;
        for row in 0..self.height {
            for col in 0..self.width {
                let p = self.params[row * self.width + col];
                writeln!(out, "{},{},{:.16e},{:.16e}", row, col, p.alpha, p.beta)?;
            }
        }
        Ok(())
    }
}
