//! Independent oracles shared by the integration suites. Everything here
//! deliberately avoids the implementation paths it checks: log-gamma uses a
//! shift-to-10⁴ Stirling series with a certified truncation bound instead of
//! the Lanczos form, Beta entropy comes from quadrature of −f·ln f, Gaussian
//! log-densities from dense matrix algebra, Jacobians from finite
//! differences with an LU determinant, and the ranking metrics from
//! exhaustive pairwise/threshold enumeration.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)] // dense-matrix oracles read best with indices

/// Splitmix64; deterministic test randomness with no dependencies.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_add(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let v = self.uniform();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }
}

const LN_SQRT_TAU: f64 = 0.918938533204672741780329736405617639;

/// Kahan-compensated running sum.
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn new() -> Self {
        Compensated {
            sum: 0.0,
            carry: 0.0,
        }
    }

    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// ln Γ(x) by compensated upward recurrence to z ≥ 32 followed by the
/// Stirling series with Bernoulli terms through B₁₀; the first omitted term
/// bounds the truncation error below 10⁻¹⁸ at the shift point.
pub fn stirling_log_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "oracle domain");
    let mut shift_ln = Compensated::new();
    let mut z = x;
    while z < 32.0 {
        shift_ln.add(z.ln());
        z += 1.0;
    }
    let zi = 1.0 / z;
    let z2 = zi * zi;
    let series = zi
        * (1.0 / 12.0
            - z2 * (1.0 / 360.0 - z2 * (1.0 / 1260.0 - z2 * (1.0 / 1680.0 - z2 * (1.0 / 1188.0)))));
    (z - 0.5) * z.ln() - z + LN_SQRT_TAU + series - shift_ln.sum
}

/// ψ(x) by compensated upward recurrence to z ≥ 32 followed by the
/// asymptotic series through B₁₀; truncation below 10⁻¹⁸ at the shift point.
pub fn oracle_digamma(x: f64) -> f64 {
    assert!(x > 0.0, "oracle domain");
    let mut shift = Compensated::new();
    let mut z = x;
    while z < 32.0 {
        shift.add(-1.0 / z);
        z += 1.0;
    }
    let z2 = 1.0 / (z * z);
    let series = z2
        * (1.0 / 12.0
            - z2 * (1.0 / 120.0 - z2 * (1.0 / 252.0 - z2 * (1.0 / 240.0 - z2 * (1.0 / 132.0)))));
    z.ln() - 0.5 / z - series + shift.sum
}

/// γ from the Euler–Maclaurin corrected harmonic sum at n = 10⁴.
pub fn oracle_euler_gamma() -> f64 {
    let n = 10_000u64;
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let nf = n as f64;
    h - nf.ln() - 0.5 / nf + 1.0 / (12.0 * nf * nf) - 1.0 / (120.0 * nf.powi(4))
}

/// ln B(a, b) from the Stirling oracle.
pub fn oracle_log_beta(a: f64, b: f64) -> f64 {
    stirling_log_gamma(a) + stirling_log_gamma(b) - stirling_log_gamma(a + b)
}

/// Differential entropy of Beta(a, b) as −∫ f ln f over (0,1) by composite
/// Simpson quadrature (the pdf normalization also comes from the Stirling
/// oracle, not the library).
pub fn beta_entropy_quadrature(a: f64, b: f64, intervals: usize) -> f64 {
    assert!(a >= 1.0 && b >= 1.0, "quadrature assumes a bounded pdf");
    assert!(intervals.is_multiple_of(2));
    let ln_norm = -oracle_log_beta(a, b);
    let integrand = |x: f64| {
        if x <= 0.0 || x >= 1.0 {
            // for a = 1 (resp. b = 1) the endpoint pdf is finite: f = b(1-x)^{b-1}
            let lf = ln_norm
                + if x <= 0.0 {
                    if a > 1.0 {
                        return 0.0;
                    }
                    (b - 1.0) * (1.0f64 - x).ln()
                } else {
                    if b > 1.0 {
                        return 0.0;
                    }
                    (a - 1.0) * x.ln()
                };
            return -lf.exp() * lf;
        }
        let lf = ln_norm + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln();
        let f = lf.exp();
        if f == 0.0 {
            0.0
        } else {
            -f * lf
        }
    };
    let h = 1.0 / intervals as f64;
    let mut acc = integrand(0.0) + integrand(1.0);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * h);
    }
    acc * h / 3.0
}

/// log N(x; mu, (UᵀU)⁻¹) the long way: build Σ⁻¹ = UᵀU densely, take the
/// log-determinant from an LU factorization, and evaluate the quadratic form
/// by explicit matrix-vector products.
pub fn dense_gaussian_logpdf(mu: &[f64], u_factor: &[Vec<f64>], x: &[f64]) -> f64 {
    let d = mu.len();
    let mut prec = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += u_factor[k][i] * u_factor[k][j];
            }
            prec[i][j] = acc;
        }
    }
    let log_det_prec = lu_log_abs_det(&prec);
    let r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += prec[i][j] * r[j];
        }
        quad += r[i] * acc;
    }
    -0.5 * d as f64 * std::f64::consts::TAU.ln() + 0.5 * log_det_prec - 0.5 * quad
}

/// ln |det M| by Gaussian elimination with partial pivoting.
pub fn lu_log_abs_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        assert!(p != 0.0, "singular matrix in oracle");
        log_det += p.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / p;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    log_det
}

/// Central-difference Jacobian of a flow forward map.
pub fn fd_jacobian(flow: &fepn::flow::FlowModel, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let (up, _) = flow.forward(&plus).unwrap();
        let (um, _) = flow.forward(&minus).unwrap();
        for i in 0..d {
            jac[i][j] = (up[i] - um[i]) / (2.0 * h);
        }
    }
    jac
}

/// AUROC by exhaustive pairwise comparison, ties counted one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        if l != 1 {
            continue;
        }
        for (j, (&t, &m)) in scores.iter().zip(labels).enumerate() {
            if m != 0 || i == j {
                continue;
            }
            pairs += 1.0;
            if s > t {
                wins += 1.0;
            } else if s == t {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// AUPRC by exhaustive enumeration of every distinct threshold, step
/// integration of precision over achieved recall levels.
pub fn auprc_thresholds(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut recall_prev = 0.0;
    for &t in &thresholds {
        let (tp, fp) = confusion_at(scores, labels, t);
        let recall = tp as f64 / pos;
        if recall > recall_prev {
            area += (recall - recall_prev) * (tp as f64 / (tp + fp) as f64);
            recall_prev = recall;
        }
    }
    area
}

/// FPR at the smallest threshold reaching the TPR target, by exhaustive
/// threshold enumeration (whole tie groups included).
pub fn fpr_at_tpr_thresholds(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    for &t in &thresholds {
        let (tp, fp) = confusion_at(scores, labels, t);
        if tp as f64 / pos >= target {
            return fp as f64 / neg;
        }
    }
    1.0
}
