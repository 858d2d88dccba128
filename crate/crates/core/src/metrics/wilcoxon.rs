//! Paired Wilcoxon signed-rank test. Zero differences are dropped, absolute
//! differences are midranked, and the two-sided p-value comes from exact
//! sign-flip enumeration for small n or a continuity-corrected normal
//! approximation otherwise.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for n <= 12, normal approximation beyond.
    Auto,
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p: f64,
    /// Significance band: "****", "***", "**", "*", or "ns".
    pub stars: &'static str,
    /// Whether p < alpha.
    pub significant: bool,
    /// Pairs with non-zero difference.
    pub n: usize,
    /// Sum of ranks of positive differences (midranks).
    pub w_plus: f64,
    pub exact: bool,
}

/// Significance bands: "*" for 0.01 < p < 0.05, "**" for 0.001 < p < 0.01,
/// "***" for 0.0001 < p < 0.001, "****" below, "ns" at or above 0.05.
pub fn stars_for_p(p: f64) -> &'static str {
    if p < 0.0001 {
        "****"
    } else if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}

/// Doubled midranks (integers) for the absolute differences, plus the tie
/// correction term sum(t^3 - t) for the normal approximation.
fn doubled_midranks(abs_diffs: &[f64]) -> (Vec<u64>, f64) {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_diffs[a].partial_cmp(&abs_diffs[b]).unwrap());
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the midrank; doubled it is (i+j+2).
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = doubled;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks2, tie_term)
}

fn exact_two_sided_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let n = ranks2.len();
    let s2: u64 = ranks2.iter().sum();
    let lo = w_plus2.min(s2 - w_plus2);
    let hi = w_plus2.max(s2 - w_plus2);
    let mut extreme = 0u64;
    for signs in 0u64..(1u64 << n) {
        let mut w = 0u64;
        for (k, &r2) in ranks2.iter().enumerate() {
            if signs & (1 << k) != 0 {
                w += r2;
            }
        }
        if w <= lo || w >= hi {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Abramowitz & Stegun 7.1.26, absolute error below 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn approx_two_sided_p(w_plus: f64, ranks: &[f64], tie_term: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = ranks.iter().sum::<f64>() / 2.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    // Continuity correction toward the mean.
    let z = if w_plus > mean {
        (w_plus - mean - 0.5) / sd
    } else if w_plus < mean {
        (w_plus - mean + 0.5) / sd
    } else {
        0.0
    };
    let z = z.abs();
    // Edgeworth refinement: the rank-sum distribution is symmetric, so the
    // first correction to the normal tail is the fourth-moment term
    // phi(z) * (g2/24) * (z^3 - 3z) with g2 = -2 * sum(r^4) / (sum(r^2))^2.
    let r2: f64 = ranks.iter().map(|r| r * r).sum();
    let r4: f64 = ranks.iter().map(|r| r.powi(4)).sum();
    let g2 = -2.0 * r4 / (r2 * r2);
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tail = (1.0 - normal_cdf(z)) + phi * (g2 / 24.0) * (z * z * z - 3.0 * z);
    (2.0 * tail.max(0.0)).min(1.0)
}

/// Two-sided paired test with the default method selection.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    wilcoxon_with_method(a, b, alpha, WilcoxonMethod::Auto)
}

pub fn wilcoxon_with_method(
    a: &[f64],
    b: &[f64],
    alpha: f64,
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Metrics(format!("paired lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Metrics("need at least one pair".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            p: 1.0,
            stars: "ns",
            significant: false,
            n: 0,
            w_plus: 0.0,
            exact: true,
        });
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks2, tie_term) = doubled_midranks(&abs);
    let w_plus2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r2)| r2)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;

    let use_exact = match method {
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::NormalApprox => false,
        WilcoxonMethod::Auto => n <= 12,
    };
    let p = if use_exact {
        exact_two_sided_p(&ranks2, w_plus2)
    } else {
        let ranks: Vec<f64> = ranks2.iter().map(|&r| r as f64 / 2.0).collect();
        approx_two_sided_p(w_plus, &ranks, tie_term)
    };
    Ok(WilcoxonResult {
        p,
        stars: stars_for_p(p),
        significant: p < alpha,
        n,
        w_plus,
        exact: use_exact,
    })
}
