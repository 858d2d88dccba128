//! Batch construction: summary masking, the attention-mask regimes for the
//! three pretraining tasks, and PAD-filled collation.
//!
//! Mask semantics:
//! - ULM: code positions see all of code and none of the summary; summary
//!   position j sees all of code plus summary positions up to and including j.
//! - bidirectional: all real positions see each other; PAD sees and is seen
//!   by nothing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_of, ActionWordTable};
use crate::mask::VisMask;
use crate::tokenizer::{TokenizedPair, EOS, MASK, PAD, SOS, UNK};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ulm,
    Mlm,
    Awp,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Ulm => write!(f, "ULM"),
            TaskKind::Mlm => write!(f, "MLM"),
            TaskKind::Awp => write!(f, "AWP"),
        }
    }
}

/// A collated, PAD-filled batch for one pretraining task.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub kind: TaskKind,
    /// B x L token ids, PAD-filled to the batch max length.
    pub ids: Vec<Vec<u32>>,
    /// Per-row L x L visibility.
    pub attn: Vec<VisMask>,
    /// Per-row masked positions (MLM only; global indices into the row).
    pub masked_positions: Vec<Vec<usize>>,
    /// Per-row targets: original ids at the masked positions (MLM), the
    /// summary ids in order (ULM), or a single action-word class id (AWP).
    pub targets: Vec<Vec<u32>>,
    /// Per-row (code_len, summary_len) split point before padding.
    pub region: Vec<(usize, usize)>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn padded_len(&self) -> usize {
        self.ids.first().map_or(0, |r| r.len())
    }
}

fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | SOS | EOS | MASK | UNK)
}

/// Replace a seeded 15% (at least one) of the summary's maskable tokens with
/// MASK. The code region is never touched, and the chosen positions with
/// their original ids are returned. Positions index the concatenated
/// code+summary row.
pub fn mask_summary(
    pair: &TokenizedPair,
    rate: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<usize>, Vec<u32>)> {
    let code_len = pair.code_ids.len();
    let maskable: Vec<usize> = pair
        .summary_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| is_maskable(id))
        .map(|(i, _)| code_len + i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::Batch("summary has no maskable tokens".into()));
    }

    let n_mask = ((rate * maskable.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = maskable
        .choose_multiple(&mut rng, n_mask.min(maskable.len()))
        .copied()
        .collect();
    chosen.sort_unstable();

    let mut ids: Vec<u32> = pair.code_ids.iter().chain(pair.summary_ids.iter()).copied().collect();
    let targets: Vec<u32> = chosen.iter().map(|&p| ids[p]).collect();
    for &p in &chosen {
        ids[p] = MASK;
    }
    Ok((ids, chosen, targets))
}

/// Visibility matrix for left-to-right summary modeling over a
/// code_len + summary_len sequence.
pub fn ulm_mask(code_len: usize, summary_len: usize) -> VisMask {
    let n = code_len + summary_len;
    let mut m = VisMask::new(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i < code_len {
                j < code_len
            } else {
                j < code_len || j <= i
            };
            m.set(i, j, v);
        }
    }
    m
}

/// Visibility matrix where all real positions attend each other and PAD
/// rows/columns are dark.
pub fn bidirectional_mask(code_len: usize, summary_len: usize, total_len_with_pad: usize) -> VisMask {
    let real = code_len + summary_len;
    debug_assert!(real <= total_len_with_pad);
    let mut m = VisMask::new(total_len_with_pad, total_len_with_pad);
    for i in 0..real {
        for j in 0..real {
            m.set(i, j, true);
        }
    }
    m
}

/// Embed a real-length mask into a padded L x L mask; PAD rows and columns
/// stay invisible.
fn pad_mask(real: &VisMask, total: usize) -> VisMask {
    let mut m = VisMask::new(total, total);
    for i in 0..real.rows() {
        for j in 0..real.cols() {
            if real.visible(i, j) {
                m.set(i, j, true);
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct CollateOptions {
    pub mask_rate: f64,
    /// When set, AWP rows carry code plus the (unmasked) summary instead of
    /// the code region alone.
    pub awp_include_summary: bool,
}

impl Default for CollateOptions {
    fn default() -> Self {
        CollateOptions {
            mask_rate: 0.15,
            awp_include_summary: false,
        }
    }
}

/// Pad a list of tokenized pairs into one task batch. Masks, targets, and
/// MLM masking are all derived here; the same seed yields the same batch.
pub fn collate(
    pairs: &[TokenizedPair],
    kind: TaskKind,
    table: Option<&ActionWordTable>,
    seed: u64,
    opts: &CollateOptions,
) -> Result<MaskedBatch> {
    if pairs.is_empty() {
        return Err(Error::Batch("cannot collate an empty batch".into()));
    }
    if kind == TaskKind::Awp && table.is_none() {
        return Err(Error::Batch("AWP collation requires an action-word table".into()));
    }

    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(pairs.len());
    let mut masked_positions: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    let mut targets: Vec<Vec<u32>> = Vec::with_capacity(pairs.len());
    let mut region: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());

    for (i, pair) in pairs.iter().enumerate() {
        let code_len = pair.code_ids.len();
        match kind {
            TaskKind::Ulm => {
                let ids: Vec<u32> =
                    pair.code_ids.iter().chain(pair.summary_ids.iter()).copied().collect();
                rows.push(ids);
                masked_positions.push(Vec::new());
                targets.push(pair.summary_ids.clone());
                region.push((code_len, pair.summary_ids.len()));
            }
            TaskKind::Mlm => {
                let row_seed = crate::subseed(seed, "mlm-row", i as u64);
                let (ids, s_m, orig) = mask_summary(pair, opts.mask_rate, row_seed)?;
                rows.push(ids);
                masked_positions.push(s_m);
                targets.push(orig);
                region.push((code_len, pair.summary_ids.len()));
            }
            TaskKind::Awp => {
                let label = label_of(table.unwrap(), &pair.summary_text)?;
                if opts.awp_include_summary {
                    let ids: Vec<u32> =
                        pair.code_ids.iter().chain(pair.summary_ids.iter()).copied().collect();
                    rows.push(ids);
                    region.push((code_len, pair.summary_ids.len()));
                } else {
                    rows.push(pair.code_ids.clone());
                    region.push((code_len, 0));
                }
                masked_positions.push(Vec::new());
                targets.push(vec![label]);
            }
        }
    }

    let max_len = rows.iter().map(|r| r.len()).max().unwrap();
    let mut attn = Vec::with_capacity(rows.len());
    for (row, &(code_len, summary_len)) in rows.iter_mut().zip(&region) {
        row.resize(max_len, PAD);
        let real = match kind {
            TaskKind::Ulm => ulm_mask(code_len, summary_len),
            TaskKind::Mlm | TaskKind::Awp => {
                bidirectional_mask(code_len, summary_len, code_len + summary_len)
            }
        };
        attn.push(pad_mask(&real, max_len));
    }

    Ok(MaskedBatch {
        kind,
        ids: rows,
        attn,
        masked_positions,
        targets,
        region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_action_table, CorpusSplit, SplitName};
    use crate::tokenizer::{train_vocab, assemble};
    use rand::Rng;

    fn fixture() -> (Vec<TokenizedPair>, ActionWordTable) {
        let pairs = [
            ("int get_x() { return x; }", "get the x value"),
            ("void set_x(int v) { x = v; }", "set the x value to v"),
            ("int add(int a, int b) { return a + b; }", "add two numbers"),
        ];
        let corpus = CorpusSplit::new(
            SplitName::Train,
            pairs.iter().map(|(c, s)| (c.to_string(), s.to_string())).collect(),
        );
        let vocab = train_vocab(&corpus, 96).unwrap();
        let table = build_action_table(&corpus, 40).unwrap();
        let tokenized = corpus.samples.iter().map(|s| assemble(&vocab, s)).collect();
        (tokenized, table)
    }

    fn synthetic_pair(code_len: usize, n_words: usize) -> TokenizedPair {
        // ids >= 5 are ordinary subwords.
        let mut code_ids = vec![SOS];
        code_ids.extend((0..code_len.saturating_sub(2)).map(|i| 5 + (i as u32 % 20)));
        code_ids.push(EOS);
        let mut summary_ids: Vec<u32> = (0..n_words).map(|i| 25 + (i as u32 % 20)).collect();
        summary_ids.push(EOS);
        TokenizedPair { code_ids, summary_ids, summary_text: "get x".into() }
    }

    #[test]
    fn mask_count_follows_rate() {
        let pair = synthetic_pair(8, 20);
        let (_, s_m, _) = mask_summary(&pair, 0.15, 7).unwrap();
        assert_eq!(s_m.len(), 3); // round(0.15 * 20) = 3

        let pair = synthetic_pair(8, 2);
        let (_, s_m, _) = mask_summary(&pair, 0.15, 7).unwrap();
        assert_eq!(s_m.len(), 1); // max(1, round(0.3)) = 1
    }

    #[test]
    fn mask_never_touches_code_or_specials() {
        for seed in 0..50 {
            let pair = synthetic_pair(10, 9);
            let (ids, s_m, targets) = mask_summary(&pair, 0.15, seed).unwrap();
            assert_eq!(&ids[..pair.code_ids.len()], pair.code_ids.as_slice());
            for (&p, &t) in s_m.iter().zip(&targets) {
                assert!(p >= pair.code_ids.len());
                assert_eq!(ids[p], MASK);
                let orig = pair.summary_ids[p - pair.code_ids.len()];
                assert_eq!(t, orig);
                assert!(is_maskable(orig));
            }
        }
    }

    #[test]
    fn mask_on_eos_only_summary_errors() {
        let pair = TokenizedPair {
            code_ids: vec![SOS, 7, EOS],
            summary_ids: vec![EOS],
            summary_text: "x".into(),
        };
        assert!(mask_summary(&pair, 0.15, 0).is_err());
    }

    #[test]
    fn ulm_mask_worked_example() {
        let m = ulm_mask(2, 2);
        assert_eq!(m.grid_string(), "1100\n1100\n1110\n1111\n");

        let m = ulm_mask(3, 1);
        // Single summary word: last row all ones over code + itself.
        assert_eq!(m.grid_string(), "1110\n1110\n1110\n1111\n");
    }

    #[test]
    fn ulm_mask_matches_predicate_on_random_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let c = rng.gen_range(1..=12);
            let s = rng.gen_range(1..=12);
            let m = ulm_mask(c, s);
            for i in 0..c + s {
                for j in 0..c + s {
                    let expect = if i < c { j < c } else { j < c || j <= i };
                    assert_eq!(m.visible(i, j), expect, "c={c} s={s} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn bidirectional_mask_pads_dark() {
        let m = bidirectional_mask(2, 2, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert!(m.visible(i, j));
            }
        }

        let m = bidirectional_mask(2, 2, 6);
        let mut dark_cols = 0;
        for j in 0..6 {
            if (0..4).all(|i| !m.visible(i, j)) {
                dark_cols += 1;
            }
        }
        assert_eq!(dark_cols, 2);
    }

    #[test]
    fn collate_pads_to_batch_max() {
        let (pairs, table) = fixture();
        let batch = collate(&pairs, TaskKind::Ulm, Some(&table), 3, &CollateOptions::default()).unwrap();
        let max = batch.padded_len();
        for (row, &(c, s)) in batch.ids.iter().zip(&batch.region) {
            assert_eq!(row.len(), max);
            assert!(row[c + s..].iter().all(|&id| id == PAD));
        }

        // Batch of one has no padding at all.
        let single = collate(&pairs[..1], TaskKind::Mlm, Some(&table), 3, &CollateOptions::default()).unwrap();
        assert!(!single.ids[0].contains(&PAD));
    }

    #[test]
    fn collate_two_rows_pad_count() {
        let a = synthetic_pair(6, 3); // length 10
        let b = synthetic_pair(8, 7); // length 16
        let batch = collate(&[a, b], TaskKind::Ulm, None, 5, &CollateOptions::default()).unwrap();
        assert_eq!(batch.padded_len(), 16);
        assert_eq!(batch.ids[0].iter().filter(|&&id| id == PAD).count(), 6);
    }

    #[test]
    fn collate_is_deterministic() {
        let (pairs, table) = fixture();
        for kind in [TaskKind::Ulm, TaskKind::Mlm, TaskKind::Awp] {
            let a = collate(&pairs, kind, Some(&table), 42, &CollateOptions::default()).unwrap();
            let b = collate(&pairs, kind, Some(&table), 42, &CollateOptions::default()).unwrap();
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.masked_positions, b.masked_positions);
            assert_eq!(a.targets, b.targets);
            assert_eq!(a.attn, b.attn);
        }
    }

    #[test]
    fn awp_batch_is_code_only_by_default() {
        let (pairs, table) = fixture();
        let batch = collate(&pairs, TaskKind::Awp, Some(&table), 1, &CollateOptions::default()).unwrap();
        for (i, &(c, s)) in batch.region.iter().enumerate() {
            assert_eq!(s, 0);
            assert_eq!(c, pairs[i].code_ids.len());
            assert_eq!(batch.targets[i].len(), 1);
        }

        let full = collate(
            &pairs,
            TaskKind::Awp,
            Some(&table),
            1,
            &CollateOptions { awp_include_summary: true, ..Default::default() },
        )
        .unwrap();
        assert!(full.region.iter().all(|&(_, s)| s > 0));
    }

    #[test]
    fn ulm_targets_align_one_per_summary_position() {
        let (pairs, table) = fixture();
        let batch = collate(&pairs, TaskKind::Ulm, Some(&table), 1, &CollateOptions::default()).unwrap();
        for (i, t) in batch.targets.iter().enumerate() {
            assert_eq!(t.len(), batch.region[i].1);
            assert_eq!(t, &pairs[i].summary_ids);
        }
    }

    #[test]
    fn padding_neutrality() {
        // Visibility among real positions is unchanged by extra PAD columns.
        let pair = synthetic_pair(5, 4);
        let longer = synthetic_pair(9, 8);
        for kind in [TaskKind::Ulm, TaskKind::Mlm] {
            let alone = collate(
                std::slice::from_ref(&pair),
                kind,
                None,
                9,
                &CollateOptions::default(),
            )
            .unwrap();
            let padded = collate(&[pair.clone(), longer.clone()], kind, None, 9, &CollateOptions::default()).unwrap();
            let real = pair.code_ids.len() + pair.summary_ids.len();
            for i in 0..real {
                for j in 0..real {
                    assert_eq!(alone.attn[0].visible(i, j), padded.attn[0].visible(i, j));
                }
            }
            // PAD rows and columns are dark.
            for i in 0..padded.padded_len() {
                for j in real..padded.padded_len() {
                    assert!(!padded.attn[0].visible(i, j));
                    assert!(!padded.attn[0].visible(j, i));
                }
            }
        }
    }
}
