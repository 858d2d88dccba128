//! BLEU: geometric mean of clipped 1..4-gram precisions times a brevity
//! penalty. The corpus variant aggregates counts before the mean; the
//! sentence variant applies add-one smoothing to the n >= 2 counts so
//! per-sample score distributions stay informative.

use std::collections::HashMap;

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and total hypothesis n-gram count.
fn clipped_counts(hyp: &[String], refr: &[String], n: usize) -> (u64, u64) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(refr, n);
    let clipped = h
        .iter()
        .map(|(gram, &c)| c.min(r.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = hyp.len().saturating_sub(n - 1) as u64;
    (clipped, total)
}

fn brevity_penalty(hyp_len: u64, ref_len: u64) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence-level BLEU with add-one smoothing on the n >= 2 precisions.
/// An empty hypothesis scores 0.
pub fn sentence_bleu(hyp: &[String], refr: &[String]) -> f64 {
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let (clipped, total) = clipped_counts(hyp, refr, n);
        let (num, den) = if n == 1 {
            (clipped as f64, total as f64)
        } else {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln() / MAX_N as f64;
    }
    brevity_penalty(hyp.len() as u64, refr.len() as u64) * log_sum.exp()
}

/// Corpus-level BLEU: n-gram counts pooled over all pairs, no smoothing.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "one reference per hypothesis");
    let mut clipped = [0u64; MAX_N];
    let mut totals = [0u64; MAX_N];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=MAX_N {
            let (c, t) = clipped_counts(h, r, n);
            clipped[n - 1] += c;
            totals[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if clipped[n] == 0 || totals[n] == 0 {
            return 0.0;
        }
        log_sum += (clipped[n] as f64 / totals[n] as f64).ln() / MAX_N as f64;
    }
    brevity_penalty(hyp_len, ref_len) * log_sum.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: n-gram matching by direct position comparison,
    /// clip by counting occurrences in both sides explicitly.
    fn oracle_sentence_bleu(hyp: &[String], refr: &[String]) -> f64 {
        if hyp.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let hyp_grams: Vec<&[String]> = if hyp.len() >= n {
                (0..=hyp.len() - n).map(|i| &hyp[i..i + n]).collect()
            } else {
                vec![]
            };
            let ref_grams: Vec<&[String]> = if refr.len() >= n {
                (0..=refr.len() - n).map(|i| &refr[i..i + n]).collect()
            } else {
                vec![]
            };
            // Clipped count: for each distinct hyp gram, min(hyp occurrences,
            // ref occurrences), each counted by exhaustive scan.
            let mut seen: Vec<&[String]> = Vec::new();
            let mut clipped = 0usize;
            for g in &hyp_grams {
                if seen.iter().any(|s| s == g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = hyp_grams.iter().filter(|x| x == &g).count();
                let in_ref = ref_grams.iter().filter(|x| x == &g).count();
                clipped += in_hyp.min(in_ref);
            }
            let total = hyp_grams.len();
            let (num, den) = if n == 1 {
                (clipped as f64, total as f64)
            } else {
                (clipped as f64 + 1.0, total as f64 + 1.0)
            };
            if num == 0.0 {
                return 0.0;
            }
            log_sum += (num / den).ln() / 4.0;
        }
        let bp = if hyp.len() >= refr.len() {
            1.0
        } else {
            (1.0 - refr.len() as f64 / hyp.len() as f64).exp()
        };
        bp * log_sum.exp()
    }

    #[test]
    fn identical_sentences_score_one() {
        let t = tokenize("returns the index of the value");
        assert_eq!(sentence_bleu(&t, &t), 1.0);
        assert_eq!(corpus_bleu(std::slice::from_ref(&t), std::slice::from_ref(&t)), 1.0);
    }

    #[test]
    fn disjoint_sentences_score_zero() {
        let h = tokenize("alpha beta gamma");
        let r = tokenize("delta epsilon zeta");
        assert_eq!(sentence_bleu(&h, &r), 0.0);
        assert_eq!(corpus_bleu(&[h], &[r]), 0.0);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let r = tokenize("a b c");
        assert_eq!(sentence_bleu(&[], &r), 0.0);
    }

    #[test]
    fn the_the_the_worked_example() {
        let h = tokenize("the the the");
        let r = tokenize("the cat sat here");
        // Corpus level: p2 clipped is 0, so the whole score collapses.
        assert_eq!(corpus_bleu(std::slice::from_ref(&h), std::slice::from_ref(&r)), 0.0);

        // Sentence level: p1 = 1/3 unsmoothed, higher orders smoothed.
        let got = sentence_bleu(&h, &r);
        let p1: f64 = 1.0 / 3.0;
        let p2: f64 = (0.0 + 1.0) / (2.0 + 1.0);
        let p3: f64 = (0.0 + 1.0) / (1.0 + 1.0);
        let p4: f64 = (0.0 + 1.0) / (0.0 + 1.0);
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        let expect = bp * (0.25 * (p1.ln() + p2.ln() + p3.ln() + p4.ln())).exp();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - oracle_sentence_bleu(&h, &r)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_pairs() {
        let words = ["the", "cat", "sat", "on", "mat", "dog", "ran"];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<String> {
                let len = rng.gen_range(1..10);
                (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
            };
            let h = mk(&mut rng);
            let r = mk(&mut rng);
            let got = sentence_bleu(&h, &r);
            let want = oracle_sentence_bleu(&h, &r);
            assert!((got - want).abs() < 1e-9, "{h:?} vs {r:?}: {got} != {want}");
        }
    }

    #[test]
    fn corpus_bleu_is_order_invariant() {
        let hyps: Vec<Vec<String>> = vec![
            tokenize("the cat sat"),
            tokenize("a dog ran far away"),
            tokenize("returns the index"),
        ];
        let refs: Vec<Vec<String>> = vec![
            tokenize("the cat sat down"),
            tokenize("the dog ran away"),
            tokenize("returns an index"),
        ];
        let a = corpus_bleu(&hyps, &refs);
        let perm = [2usize, 0, 1];
        let hp: Vec<Vec<String>> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let rp: Vec<Vec<String>> = perm.iter().map(|&i| refs[i].clone()).collect();
        assert_eq!(a, corpus_bleu(&hp, &rp));
    }
}
