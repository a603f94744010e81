//! OoD detection metrics (AUROC, AUPRC, FPR@95TPR) and the score maps they
//! rank: Shannon entropy and negative-log-sum-exp energy from the head
//! logits, Beta variance and Beta differential entropy from the posterior
//! field.
//!
//! Score orientation is fixed repo-wide: higher = more anomalous. Labels
//! passed to the ranking metrics mark OoD cells with 1.

use std::io::Write;

use crate::beta::{beta_diff_entropy, beta_variance, BetaField, BetaMode};
use crate::error::{Error, Result};
use crate::flow::ClassConditionalFlows;
use crate::grid::{LabeledGrid, OodMask, ScoreField};
use crate::loss::PROB_FLOOR;
use crate::train::ResidualHead;

/// −Σ p·ln p per cell (p clamped inside the logarithm only, so exact zeros
/// contribute nothing).
pub fn shannon_entropy_score(
    height: usize,
    width: usize,
    probs: &[Vec<f64>],
) -> Result<ScoreField> {
    if probs.len() != height * width {
        return Err(Error::shape(format!(
            "expected {} probability vectors, got {}",
            height * width,
            probs.len()
        )));
    }
    let mut cells = Vec::with_capacity(probs.len());
    for p in probs {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("probability vector sums to {sum}")));
        }
        cells.push(
            -p.iter()
                .map(|&x| x * x.clamp(PROB_FLOOR, 1.0).ln())
                .sum::<f64>(),
        );
    }
    ScoreField::new(height, width, cells)
}

/// −ln Σ_c e^{logit_c} per cell (stable log-sum-exp); adding a constant to
/// all logits shifts the score by its negative.
pub fn energy_score(height: usize, width: usize, logits: &[Vec<f64>]) -> Result<ScoreField> {
    if logits.len() != height * width {
        return Err(Error::shape(format!(
            "expected {} logit vectors, got {}",
            height * width,
            logits.len()
        )));
    }
    let mut cells = Vec::with_capacity(logits.len());
    for l in logits {
        if l.is_empty() || l.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("logit vectors must be non-empty and finite"));
        }
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|&v| (v - m).exp()).sum();
        cells.push(-(m + z.ln()));
    }
    ScoreField::new(height, width, cells)
}

/// Per-cell Beta variance; flat Beta(1,1) scores highest (1/12).
pub fn variance_score(field: &BetaField) -> ScoreField {
    let cells = field.cells().iter().map(|&p| beta_variance(p)).collect();
    ScoreField::new(field.height(), field.width(), cells)
        .expect("beta variance is finite for valid parameters")
}

/// Per-cell Beta differential entropy; flatter posteriors score higher.
pub fn diff_entropy_score(field: &BetaField) -> ScoreField {
    let cells = field
        .cells()
        .iter()
        .map(|&p| beta_diff_entropy(p))
        .collect();
    ScoreField::new(field.height(), field.width(), cells)
        .expect("beta differential entropy is finite for valid parameters")
}

fn validate_ranking_input(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape(
            "scores and labels must be equal-length and non-empty",
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::domain("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(
            "ranking metrics need at least one positive and one negative".into(),
        ));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped by exact score ties.
fn descending_tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counted ½. Computed by a midrank sweep; agrees exactly with the pairwise
/// oracle.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = validate_ranking_input(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // midrank of the tie group [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision–recall curve by step integration over the
/// descending-score sweep, processing tie groups atomically.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = validate_ranking_input(scores, labels)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall_prev = 0.0;
    let mut area = 0.0;
    for group in descending_tie_groups(scores) {
        for &i in &group {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        if recall > recall_prev {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
    }
    Ok(area)
}

/// Interpolation-free average precision. Identical to [`auprc`] under the
/// step-integration convention; kept as a named alias.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    auprc(scores, labels)
}

/// False-positive rate at the smallest threshold whose TPR reaches
/// `tpr_target`; the whole tie group at that threshold is included.
pub fn fpr_at_tpr(scores: &[f64], labels: &[u8], tpr_target: f64) -> Result<f64> {
    let (pos, neg) = validate_ranking_input(scores, labels)?;
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::domain(format!(
            "tpr_target must lie in [0,1], got {tpr_target}"
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    for group in descending_tie_groups(scores) {
        for &i in &group {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp as f64 / pos as f64 >= tpr_target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(1.0)
}

/// Conventional FPR95.
pub fn fpr95(scores: &[f64], labels: &[u8]) -> Result<f64> {
    fpr_at_tpr(scores, labels, 0.95)
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    /// Rank a score field against an OoD mask with all three metrics.
    pub fn compute(method: &str, scores: &ScoreField, mask: &OodMask) -> Result<Self> {
        if scores.height() != mask.height() || scores.width() != mask.width() {
            return Err(Error::shape("score field and mask dimensions differ"));
        }
        let s = scores.cells();
        let l = mask.cells();
        Ok(Self {
            method: method.to_string(),
            fpr95: fpr95(s, l)?,
            auroc: auroc(s, l)?,
            auprc: auprc(s, l)?,
            n_pos: l.iter().filter(|&&x| x == 1).count(),
            n_neg: l.iter().filter(|&&x| x == 0).count(),
        })
    }

    /// Same metrics over flat score/label slices pooled from several scenes.
    pub fn from_slices(method: &str, scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            fpr95: fpr95(scores, labels)?,
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            n_pos: labels.iter().filter(|&&x| x == 1).count(),
            n_neg: labels.iter().filter(|&&x| x == 0).count(),
        })
    }
}

pub const METRICS_CSV_HEADER: &str = "method,fpr95,auroc,auprc,n_pos,n_neg";

/// Append rows as `method,fpr95,auroc,auprc,n_pos,n_neg`.
pub fn write_metrics_csv<W: Write>(mut out: W, reports: &[MetricsReport]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{},{}",
            r.method, r.fpr95, r.auroc, r.auprc, r.n_pos, r.n_neg
        )?;
    }
    Ok(())
}

/// The four scoring methods evaluated everywhere: head-based Shannon entropy
/// and energy, posterior-based variance and differential entropy.
pub fn method_scores(
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
    grid: &LabeledGrid,
    beta_mode: BetaMode,
) -> Result<Vec<(&'static str, ScoreField)>> {
    let (h, w) = (grid.height(), grid.width());
    let mut probs = Vec::with_capacity(grid.cell_count());
    let mut logits = Vec::with_capacity(grid.cell_count());
    for cell in 0..grid.cell_count() {
        let x = grid.feature_flat(cell);
        logits.push(head.logits(x)?.to_vec());
        probs.push(head.probs(x)?.to_vec());
    }
    let field = flows.beta_field_from_flows(grid, beta_mode)?;
    Ok(vec![
        ("se", shannon_entropy_score(h, w, &probs)?),
        ("energy", energy_score(h, w, &logits)?),
        ("variance", variance_score(&field)),
        ("diff_entropy", diff_entropy_score(&field)),
    ])
}
