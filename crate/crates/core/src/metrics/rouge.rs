//! ROUGE-L: recall/precision on the longest common subsequence with an
//! F-measure combination (beta = 1 by default).

/// Longest-common-subsequence length by the standard DP.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1-combined ROUGE-L.
pub fn rouge_l(hyp: &[String], refr: &[String]) -> f64 {
    rouge_l_with_beta(hyp, refr, 1.0)
}

/// ROUGE-L with an explicit beta: F = (1+b^2) P R / (R + b^2 P).
pub fn rouge_l_with_beta(hyp: &[String], refr: &[String], beta: f64) -> f64 {
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / refr.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    #[test]
    fn identical_sequences_score_one() {
        let t = tokenize("get the backup partitions");
        assert_eq!(rouge_l(&t, &t), 1.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        assert_eq!(rouge_l(&tokenize("a b"), &tokenize("c d")), 0.0);
        assert_eq!(rouge_l(&[], &tokenize("c d")), 0.0);
    }

    #[test]
    fn worked_example_acd_vs_abcd() {
        // LCS = 3, P = 1, R = 0.75, F = 2*0.75/1.75 = 6/7.
        let h = tokenize("a c d");
        let r = tokenize("a b c d");
        let got = rouge_l(&h, &r);
        assert!((got - 6.0 / 7.0).abs() < 1e-12);

        // Independent oracle: DP LCS + formula spelled out.
        let lcs = lcs_len(&h, &r) as f64;
        assert_eq!(lcs, 3.0);
        let p = lcs / 3.0;
        let rr = lcs / 4.0;
        assert!((got - 2.0 * p * rr / (p + rr)).abs() < 1e-12);
    }

    #[test]
    fn beta_parameterization_reduces_to_f1() {
        let h = tokenize("x a b");
        let r = tokenize("a b y z");
        assert_eq!(rouge_l(&h, &r), rouge_l_with_beta(&h, &r, 1.0));
        // Large beta weighs recall.
        let recall_heavy = rouge_l_with_beta(&h, &r, 8.0);
        assert!((recall_heavy - 2.0 / 4.0).abs() < 0.05);
    }

    #[test]
    fn lcs_against_exhaustive_subsequence_check() {
        // Small strings: verify the DP against an exhaustive common
        // subsequence search.
        let words = ["a", "b", "c"];
        let mk = |bits: u32, len: usize| -> Vec<String> {
            (0..len).map(|i| words[((bits >> (2 * i)) & 3) as usize % 3].to_string()).collect()
        };
        for xa in 0..64u32 {
            for xb in 0..64u32 {
                let a = mk(xa, 3);
                let b = mk(xb, 3);
                // Exhaustive: longest subsequence of a that is also a
                // subsequence of b.
                let mut best = 0;
                for mask in 0..8u32 {
                    let sub: Vec<&String> =
                        (0..3).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
                    // Check subsequence of b.
                    let mut it = 0;
                    for w in &b {
                        if it < sub.len() && w == sub[it] {
                            it += 1;
                        }
                    }
                    if it == sub.len() {
                        best = best.max(sub.len());
                    }
                }
                assert_eq!(lcs_len(&a, &b), best, "a={a:?} b={b:?}");
            }
        }
    }
}
