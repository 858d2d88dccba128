//! METEOR, original exact-surface-match formulation: a unigram alignment
//! that first maximizes matches and then minimizes chunks, combined into
//! Fmean = 10PR/(R+9P) with the fragmentation penalty 0.5*(chunks/matches)^3.

use std::collections::HashMap;

/// Maximum number of matched unigrams: sum over word types of
/// min(occurrences in hyp, occurrences in ref).
fn max_matches(hyp: &[String], refr: &[String]) -> usize {
    let mut h: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *h.entry(w).or_insert(0) += 1;
    }
    let mut r: HashMap<&str, usize> = HashMap::new();
    for w in refr {
        *r.entry(w).or_insert(0) += 1;
    }
    h.iter().map(|(w, &c)| c.min(r.get(w).copied().unwrap_or(0))).sum()
}

struct ChunkSearch<'a> {
    hyp: &'a [String],
    /// Candidate ref positions per hyp position.
    cands: Vec<Vec<usize>>,
    /// Bitmask of ref positions per word type of the hyp.
    word_mask: HashMap<&'a str, u128>,
    needed: HashMap<&'a str, usize>,
    /// hyp occurrences of this word at or after position i.
    suffix_count: Vec<HashMap<&'a str, usize>>,
    memo: HashMap<(usize, u128, usize), usize>,
}

impl<'a> ChunkSearch<'a> {
    fn new(hyp: &'a [String], refr: &'a [String]) -> ChunkSearch<'a> {
        let mut word_mask: HashMap<&str, u128> = HashMap::new();
        for (j, w) in refr.iter().enumerate() {
            *word_mask.entry(w).or_insert(0) |= 1u128 << j;
        }
        let cands: Vec<Vec<usize>> = hyp
            .iter()
            .map(|w| (0..refr.len()).filter(|&j| &refr[j] == w).collect())
            .collect();
        let mut h: HashMap<&str, usize> = HashMap::new();
        for w in hyp {
            *h.entry(w).or_insert(0) += 1;
        }
        let mut r: HashMap<&str, usize> = HashMap::new();
        for w in refr {
            *r.entry(w).or_insert(0) += 1;
        }
        let needed: HashMap<&str, usize> = h
            .iter()
            .map(|(&w, &c)| (w, c.min(r.get(w).copied().unwrap_or(0))))
            .collect();
        let mut suffix_count: Vec<HashMap<&str, usize>> = vec![HashMap::new(); hyp.len() + 1];
        for i in (0..hyp.len()).rev() {
            let mut m = suffix_count[i + 1].clone();
            *m.entry(&hyp[i]).or_insert(0) += 1;
            suffix_count[i] = m;
        }
        ChunkSearch { hyp, cands, word_mask, needed, suffix_count, memo: HashMap::new() }
    }

    fn matched_so_far(&self, word: &str, used: u128) -> usize {
        (self.word_mask.get(word).copied().unwrap_or(0) & used).count_ones() as usize
    }

    /// Minimum chunks over all maximum alignments of hyp[i..], given the set
    /// of consumed ref positions and the previously matched ref position + 1
    /// (0 when no match yet or the previous hyp position was unmatched).
    fn solve(&mut self, i: usize, used: u128, prev: usize) -> usize {
        if i == self.hyp.len() {
            return 0;
        }
        if let Some(&v) = self.memo.get(&(i, used, prev)) {
            return v;
        }
        let word: &str = &self.hyp[i];
        let need = self.needed.get(word).copied().unwrap_or(0);
        let have = self.matched_so_far(word, used);
        let ahead = self.suffix_count[i].get(word).copied().unwrap_or(0);

        let mut best = usize::MAX;
        // Skip this occurrence if enough later occurrences remain to reach
        // the required match count.
        if have + (ahead - 1) >= need {
            best = best.min(self.solve(i + 1, used, 0));
        }
        if have < need {
            for &j in &self.cands[i].clone() {
                if used & (1u128 << j) != 0 {
                    continue;
                }
                let new_chunk = usize::from(prev == 0 || j + 1 != prev);
                let sub = self.solve(i + 1, used | (1u128 << j), j + 2);
                if sub != usize::MAX {
                    best = best.min(new_chunk + sub);
                }
            }
        }
        self.memo.insert((i, used, prev), best);
        best
    }
}

/// Minimal chunk count over maximum alignments. Exact for references up to
/// 128 tokens; beyond that a greedy leftmost alignment stands in.
fn min_chunks(hyp: &[String], refr: &[String]) -> usize {
    if refr.len() <= 128 {
        let mut search = ChunkSearch::new(hyp, refr);
        let c = search.solve(0, 0, 0);
        if c != usize::MAX {
            return c;
        }
    }
    // Greedy fallback: leftmost unused occurrence per word.
    let mut used = vec![false; refr.len()];
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for w in hyp {
        let mut matched = None;
        for (j, r) in refr.iter().enumerate() {
            if !used[j] && r == w {
                matched = Some(j);
                break;
            }
        }
        match matched {
            Some(j) => {
                used[j] = true;
                if prev.is_none_or(|p| p + 1 != j) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks
}

/// METEOR score for a hypothesis/reference pair of metric tokens.
pub fn meteor(hyp: &[String], refr: &[String]) -> f64 {
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let m = max_matches(hyp, refr) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / refr.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = min_chunks(hyp, refr) as f64;
    let penalty = 0.5 * (chunks / m).powi(3);
    fmean * (1.0 - penalty)
}
