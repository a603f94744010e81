//! The BUCE objective: cross-entropy, Beta uncertainty cross-entropy with a
//! differential-entropy regularizer, variance-consistency BCE, and the
//! outlier variance term (both the literal form, which is identically zero,
//! and the hinge surrogate used for training).

use serde::{Deserialize, Serialize};

use crate::beta::{beta_diff_entropy, beta_variance, BetaField, BetaMode};
use crate::error::{Error, Result};
use crate::grid::OodMask;
use crate::special::digamma_raw;

/// Probabilities are clamped to at least this before a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Maximum Beta variance under the α, β ≥ 1 floor.
pub const VAR_MAX: f64 = 1.0 / 12.0;

/// Flavor of the outlier variance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutMode {
    /// Σ max(−m·Var, 0), exactly as written; identically zero since Var ≥ 0.
    Literal,
    /// Σ m·(1/12 − Var): decreases as masked-cell variance rises toward its
    /// maximum. Default for training.
    Hinge,
}

/// Weights and modes of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_reg: f64,
    pub uce_scale: f64,
    pub out_mode: OutMode,
    pub out_enabled: bool,
    pub beta_mode: BetaMode,
    /// Multiply variance by 12 inside the BCE so the target 1 is reachable.
    pub var_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_reg: 1.0,
            uce_scale: 1e-7,
            out_mode: OutMode::Hinge,
            out_enabled: true,
            beta_mode: BetaMode::SoftplusLogit,
            var_normalize: true,
        }
    }
}

/// Per-term values of one BUCE evaluation;
/// total = ce + λ1·uce + λ2·var + out (out is 0 when disabled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub uce: f64,
    pub var: f64,
    pub out: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        ce: f64,
        uce: f64,
        var: f64,
        out: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        let total = buce_total(ce, uce, var, lambda1, lambda2)? + out;
        if !total.is_finite() {
            return Err(Error::domain(format!("non-finite loss total {total}")));
        }
        Ok(Self {
            ce,
            uce,
            var,
            out,
            total,
        })
    }
}

/// CE(pred, target) = −Σ target·ln(pred), with pred clamped to
/// [PROB_FLOOR, 1] inside the logarithm. Both vectors must sum to 1.
pub fn ce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("prediction and target lengths differ"));
    }
    for (name, v) in [("pred", pred), ("target", target)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("{name} must sum to 1, got {sum}")));
        }
        if v.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::domain(format!("{name} entries must lie in [0,1]")));
        }
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -t * p.clamp(PROB_FLOOR, 1.0).ln())
        .sum())
}

/// Uncertainty cross-entropy over a field:
/// scale · Σ_i [ y_i·(ψ(α_i+β_i) − ψ(α_i) − ψ(β_i)) − λ_reg·H[Beta(α_i,β_i)] ]
/// where y = 1 − mask marks inlier cells.
pub fn uce_loss(field: &BetaField, mask: &OodMask, lambda_reg: f64, scale: f64) -> Result<f64> {
    check_dims(field, mask)?;
    if lambda_reg < 0.0 {
        return Err(Error::domain(format!(
            "lambda_reg must be non-negative, got {lambda_reg}"
        )));
    }
    let mut acc = 0.0;
    for (p, &m) in field.cells().iter().zip(mask.cells()) {
        if m == 0 {
            acc += digamma_raw(p.alpha + p.beta) - digamma_raw(p.alpha) - digamma_raw(p.beta);
        }
        if lambda_reg != 0.0 {
            acc -= lambda_reg * beta_diff_entropy(*p);
        }
    }
    Ok(scale * acc)
}

/// Mean BCE between the (optionally ×12-normalized) Beta variance and the
/// OoD mask; masked cells target variance 1, inlier cells target 0.
pub fn var_consistency_loss(field: &BetaField, mask: &OodMask, normalize: bool) -> Result<f64> {
    check_dims(field, mask)?;
    let mut acc = 0.0;
    for (p, &m) in field.cells().iter().zip(mask.cells()) {
        let raw = beta_variance(*p);
        let v = if normalize { 12.0 * raw } else { raw };
        let v = v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        acc -= if m == 1 { v.ln() } else { (1.0 - v).ln() };
    }
    Ok(acc / field.len() as f64)
}

/// Outlier variance term over masked cells; see [`OutMode`].
pub fn out_loss(field: &BetaField, mask: &OodMask, mode: OutMode) -> Result<f64> {
    check_dims(field, mask)?;
    let mut acc = 0.0;
    for (p, &m) in field.cells().iter().zip(mask.cells()) {
        let var = beta_variance(*p);
        match mode {
            OutMode::Literal => acc += (-(m as f64) * var).max(0.0),
            OutMode::Hinge => {
                if m == 1 {
                    acc += VAR_MAX - var;
                }
            }
        }
    }
    Ok(acc)
}

/// ce + λ1·uce + λ2·var.
pub fn buce_total(ce: f64, uce: f64, var: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [
        ("ce", ce),
        ("uce", uce),
        ("var", var),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() {
            return Err(Error::domain(format!("{name} must be finite, got {v}")));
        }
    }
    Ok(ce + lambda1 * uce + lambda2 * var)
}

fn check_dims(field: &BetaField, mask: &OodMask) -> Result<()> {
    if field.height() != mask.height() || field.width() != mask.width() {
        return Err(Error::shape(format!(
            "field is {}x{} but mask is {}x{}",
            field.height(),
            field.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}
