//! Subword vocabulary: byte-pair-style merge training, encode/decode, and
//! assembly of the special-token-framed sequences fed to the model.
//!
//! Layout contract: ids 0..4 are PAD, SOS, EOS, MASK, UNK in that order, and
//! special tokens never participate in merges. Words end with an internal
//! sentinel character so decoding can restore word boundaries.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, Sample};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

pub const N_SPECIALS: usize = 5;
const SPECIAL_NAMES: [&str; N_SPECIALS] = ["<pad>", "<sos>", "<eos>", "<mask>", "<unk>"];

/// End-of-word sentinel appended to every pretoken before merging. Control
/// characters are stripped from input text, so it cannot collide with data.
const MARKER: char = '\u{0001}';

/// Maximum code region length, counting the framing SOS and EOS.
pub const MAX_CODE_LEN: usize = 256;
/// Maximum summary region length, counting the trailing EOS.
pub const MAX_SUMMARY_LEN: usize = 128;

/// Split text into pretokens: runs of `[A-Za-z0-9_]` or single other
/// non-whitespace characters. Control characters are dropped.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || ch.is_control() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// The canonical text form a round trip through encode/decode preserves.
pub fn normalize_text(text: &str) -> String {
    pretokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Token strings, indexed by id. Ids 0..4 are the specials.
    tokens: Vec<String>,
    /// Merge rules in the order they were learned.
    merges: Vec<(String, String)>,
    /// Special-token ids, spelled out for file self-description.
    #[serde(default = "special_ids")]
    specials: std::collections::BTreeMap<String, u32>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    merge_rank: HashMap<(String, String), usize>,
}

fn special_ids() -> std::collections::BTreeMap<String, u32> {
    [("pad", PAD), ("sos", SOS), ("eos", EOS), ("mask", MASK), ("unk", UNK)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

impl Vocabulary {
    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Stable fingerprint used to detect checkpoint/vocabulary mismatches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut vocab: Vocabulary = serde_json::from_str(&data)?;
        if vocab.tokens.len() < N_SPECIALS {
            return Err(Error::Tokenizer("vocabulary file missing special tokens".into()));
        }
        vocab.rebuild_index();
        Ok(vocab)
    }
}

/// Train a subword vocabulary by greedy most-frequent-pair merging over the
/// pretokenized corpus. Merging stops when `target_size` is reached or no
/// pair occurs at least twice. Ties break toward the lexicographically
/// smaller pair, so training is a pure function of the corpus text.
pub fn train_vocab(corpus: &CorpusSplit, target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("cannot train vocabulary on empty corpus".into()));
    }

    // Pretoken frequencies over code and summaries together.
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for s in &corpus.samples {
        for w in pretokenize(&s.code) {
            *word_freq.entry(w).or_insert(0) += 1;
        }
        for w in pretokenize(&s.summary) {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }

    // Base symbols: every character seen, plus the end-of-word marker.
    let mut base: Vec<String> = word_freq
        .keys()
        .flat_map(|w| w.chars())
        .map(|c| c.to_string())
        .collect();
    base.push(MARKER.to_string());
    base.sort();
    base.dedup();

    if target_size <= N_SPECIALS + base.len() {
        return Err(Error::Tokenizer(format!(
            "target_size {} too small: need more than {} specials + {} base symbols",
            target_size,
            N_SPECIALS,
            base.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().cloned());

    // Each distinct pretoken as a symbol sequence, with its corpus frequency.
    // Kept in sorted order so every pass is deterministic.
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut v: Vec<(String, u64)> = word_freq.into_iter().collect();
        v.sort();
        v.into_iter()
            .map(|(w, f)| {
                let mut seq: Vec<String> = w.chars().map(|c| c.to_string()).collect();
                seq.push(MARKER.to_string());
                (seq, f)
            })
            .collect()
    };

    let mut merges: Vec<(String, String)> = Vec::new();
    while tokens.len() < target_size {
        let mut pair_count: HashMap<(String, String), u64> = HashMap::new();
        for (seq, f) in &words {
            for pair in seq.windows(2) {
                *pair_count
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += f;
            }
        }
        let best = pair_count
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let (pair, _) = match best {
            Some((p, c)) => (p.clone(), *c),
            None => break,
        };

        let merged = format!("{}{}", pair.0, pair.1);
        tokens.push(merged.clone());
        merges.push(pair.clone());
        for (seq, _) in &mut words {
            merge_in_place(seq, &pair, &merged);
        }
    }

    let mut vocab = Vocabulary {
        tokens,
        merges,
        specials: special_ids(),
        index: HashMap::new(),
        merge_rank: HashMap::new(),
    };
    vocab.rebuild_index();
    Ok(vocab)
}

fn merge_in_place(seq: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut i = 0;
    while i + 1 < seq.len() {
        if seq[i] == pair.0 && seq[i + 1] == pair.1 {
            seq[i] = merged.to_string();
            seq.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl Vocabulary {
    fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut seq: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        seq.push(MARKER.to_string());
        // Repeatedly apply the earliest-learned merge present anywhere.
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..seq.len().saturating_sub(1) {
                if let Some(&rank) = self
                    .merge_rank
                    .get(&(seq[i].clone(), seq[i + 1].clone()))
                {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank].clone();
            let merged = format!("{a}{b}");
            merge_in_place(&mut seq, &(a, b), &merged);
        }
        seq.iter()
            .map(|s| self.index.get(s).copied().unwrap_or(UNK))
            .collect()
    }

    /// Subword ids for arbitrary text. Unknown symbols become UNK; special
    /// tokens are never produced for user text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Text for a sequence of ids. PAD/SOS/EOS/MASK are dropped, UNK renders
    /// as `<unk>`. Errors on out-of-range ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut buf = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range (|V|={})", self.len())))?;
            match id {
                PAD | SOS | EOS | MASK => {}
                UNK => {
                    buf.push_str("<unk>");
                    buf.push(MARKER);
                }
                _ => buf.push_str(tok),
            }
        }
        let words: Vec<&str> = buf.split(MARKER).filter(|w| !w.is_empty()).collect();
        Ok(words.join(" "))
    }
}

/// Subword ids for one sample: a SOS..EOS framed code region and an
/// EOS-suffixed summary region, both truncated to their caps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub code_ids: Vec<u32>,
    pub summary_ids: Vec<u32>,
    /// Raw summary text, kept for action-word labeling and evaluation.
    pub summary_text: String,
}

/// How many regions were cut down to their caps while assembling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationCounts {
    pub code: usize,
    pub summary: usize,
}

pub fn assemble(vocab: &Vocabulary, sample: &Sample) -> TokenizedPair {
    assemble_counted(vocab, sample, &mut TruncationCounts::default())
}

pub fn assemble_counted(
    vocab: &Vocabulary,
    sample: &Sample,
    truncated: &mut TruncationCounts,
) -> TokenizedPair {
    let mut code = vocab.encode(&sample.code);
    if code.len() > MAX_CODE_LEN - 2 {
        code.truncate(MAX_CODE_LEN - 2);
        truncated.code += 1;
    }
    let mut code_ids = Vec::with_capacity(code.len() + 2);
    code_ids.push(SOS);
    code_ids.extend(code);
    code_ids.push(EOS);

    let mut summary_ids = vocab.encode(&sample.summary);
    if summary_ids.len() > MAX_SUMMARY_LEN - 1 {
        summary_ids.truncate(MAX_SUMMARY_LEN - 1);
        truncated.summary += 1;
    }
    summary_ids.push(EOS);

    TokenizedPair {
        code_ids,
        summary_ids,
        summary_text: sample.summary.clone(),
    }
}

/// Assemble a whole split, reporting truncation counts.
pub fn assemble_all(vocab: &Vocabulary, split: &CorpusSplit) -> (Vec<TokenizedPair>, TruncationCounts) {
    let mut counts = TruncationCounts::default();
    let pairs = split
        .samples
        .iter()
        .map(|s| assemble_counted(vocab, s, &mut counts))
        .collect();
    (pairs, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitName;

    fn tiny_corpus(lines: &[(&str, &str)]) -> CorpusSplit {
        CorpusSplit::new(
            SplitName::Train,
            lines.iter().map(|(c, s)| (c.to_string(), s.to_string())).collect(),
        )
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let corpus = tiny_corpus(&[("aaab aaab", "x")]);
        let vocab = train_vocab(&corpus, 12).unwrap();
        assert_eq!(vocab.token(PAD).unwrap(), "<pad>");
        assert_eq!(vocab.token(SOS).unwrap(), "<sos>");
        assert_eq!(vocab.token(EOS).unwrap(), "<eos>");
        assert_eq!(vocab.token(MASK).unwrap(), "<mask>");
        assert_eq!(vocab.token(UNK).unwrap(), "<unk>");
    }

    #[test]
    fn first_merge_on_aaab_corpus_is_aa() {
        // Hand-simulated BPE: "aaab" twice gives pair counts
        // (a,a)=4, (a,b)=2, (b,marker)=2, so "aa" is learned first.
        let corpus = tiny_corpus(&[("aaab aaab", "x")]);
        let vocab = train_vocab(&corpus, 10).unwrap();
        assert_eq!(vocab.merges[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn training_is_deterministic_on_disk() {
        let corpus = tiny_corpus(&[
            ("int get_index(int x) { return idx[x]; }", "returns the index of x"),
            ("void set_index(int x) { idx = x; }", "sets the index"),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("v1.json");
        let p2 = dir.path().join("v2.json");
        train_vocab(&corpus, 64).unwrap().save(&p1).unwrap();
        train_vocab(&corpus, 64).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn too_small_target_errors() {
        let corpus = tiny_corpus(&[("ab", "c")]);
        assert!(train_vocab(&corpus, 6).is_err());
    }

    #[test]
    fn encode_empty_is_empty() {
        let corpus = tiny_corpus(&[("aaab", "x")]);
        let vocab = train_vocab(&corpus, 10).unwrap();
        assert!(vocab.encode("").is_empty());
    }

    #[test]
    fn unknown_chars_become_unk() {
        let corpus = tiny_corpus(&[("abc abc", "x y")]);
        let vocab = train_vocab(&corpus, 12).unwrap();
        let ids = vocab.encode("abq");
        assert!(ids.contains(&UNK));
        // Decoding never crashes on UNK.
        let text = vocab.decode(&ids).unwrap();
        assert!(text.contains("<unk>"));
    }

    #[test]
    fn round_trip_reproduces_normalized_text() {
        let lines = [
            "int get_index(int x) { return idx[x]; }",
            "returns the index of x .",
            "set value ( v )",
            "a.b.c(d, e)",
        ];
        let corpus = tiny_corpus(&[
            (lines[0], lines[1]),
            (lines[2], lines[3]),
        ]);
        let vocab = train_vocab(&corpus, 96).unwrap();
        for t in lines {
            let ids = vocab.encode(t);
            assert_eq!(vocab.decode(&ids).unwrap(), normalize_text(t));
        }
    }

    #[test]
    fn round_trip_over_many_generated_lines() {
        let words = ["get", "set", "index", "value", "node", "x1", "y2", "(", ")", "{", "}"];
        let mut lines = Vec::new();
        for i in 0..1000 {
            let mut s = String::new();
            for j in 0..(3 + i % 5) {
                s.push_str(words[(i * 13 + j * 7) % words.len()]);
                s.push(' ');
            }
            lines.push(s);
        }
        let pairs: Vec<(String, String)> = lines.iter().map(|l| (l.clone(), l.clone())).collect();
        let corpus = CorpusSplit::new(SplitName::Train, pairs);
        let vocab = train_vocab(&corpus, 128).unwrap();
        for l in &lines {
            assert_eq!(vocab.decode(&vocab.encode(l)).unwrap(), normalize_text(l));
        }
    }

    #[test]
    fn encode_never_emits_specials_on_user_text() {
        let corpus = tiny_corpus(&[("abc def", "ghi")]);
        let vocab = train_vocab(&corpus, 24).unwrap();
        for t in ["abc", "def ghi", "abcdef", "<pad> <sos>"] {
            for id in vocab.encode(t) {
                // UNK is the one special that may appear, for unknown chars.
                assert!(id == UNK || !Vocabulary::is_special(id), "emitted special {id} for {t:?}");
            }
        }
    }

    #[test]
    fn vocab_file_round_trip_reproduces_encodings() {
        let corpus = tiny_corpus(&[("int get_index(int x)", "returns the index")]);
        let vocab = train_vocab(&corpus, 48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        vocab.save(&p).unwrap();
        let loaded = Vocabulary::load(&p).unwrap();
        for t in ["int get_index(int x)", "returns the index", "unseen words"] {
            assert_eq!(vocab.encode(t), loaded.encode(t));
        }
    }

    #[test]
    fn assemble_frames_and_truncates() {
        let corpus = tiny_corpus(&[("a b c d e f g h", "s t u v")]);
        let vocab = train_vocab(&corpus, 24).unwrap();

        // Long code: 300 single-char pretokens, each one subword.
        let long_code = vec!["a"; 300].join(" ");
        let mut truncated = TruncationCounts::default();
        let pair = assemble_counted(
            &vocab,
            &Sample { code: long_code, summary: "s t".into(), id: 0 },
            &mut truncated,
        );
        assert_eq!(pair.code_ids.len(), MAX_CODE_LEN);
        assert_eq!(*pair.code_ids.first().unwrap(), SOS);
        assert_eq!(*pair.code_ids.last().unwrap(), EOS);
        assert_eq!(truncated.code, 1);

        // Short summary: ids + EOS.
        let n_summary_subwords = vocab.encode("s t").len();
        assert_eq!(pair.summary_ids.len(), n_summary_subwords + 1);
        assert_eq!(*pair.summary_ids.last().unwrap(), EOS);
    }

    #[test]
    fn assembled_lengths_respect_caps() {
        let corpus = tiny_corpus(&[("a b c", "x y z")]);
        let vocab = train_vocab(&corpus, 16).unwrap();
        let long = vec!["a"; 400].join(" ");
        for (code, summary) in [("a", "x"), (long.as_str(), long.as_str())] {
            let pair = assemble(&vocab, &Sample { code: code.into(), summary: summary.into(), id: 0 });
            assert!(pair.code_ids.len() >= 2 && pair.code_ids.len() <= MAX_CODE_LEN);
            assert!(!pair.summary_ids.is_empty() && pair.summary_ids.len() <= MAX_SUMMARY_LEN);
            assert_eq!(*pair.summary_ids.last().unwrap(), EOS);
            assert!(!pair.code_ids[1..pair.code_ids.len() - 1].contains(&PAD));
        }
    }
}
