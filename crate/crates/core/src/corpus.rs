//! Corpus ingestion and action-word machinery.
//!
//! Datasets are JSON-Lines files with string fields `code` and `summary`.
//! This module loads them into splits, removes train/test duplicates, and
//! builds the table of the most frequent summary action words (the first
//! word of each summary) used as classification targets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One (code snippet, reference summary) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub code: String,
    pub summary: String,
    /// Stable index within the owning split.
    pub id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitName::Train => write!(f, "train"),
            SplitName::Valid => write!(f, "valid"),
            SplitName::Test => write!(f, "test"),
        }
    }
}

/// An ordered set of samples with contiguous ids starting at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub samples: Vec<Sample>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, texts: Vec<(String, String)>) -> Self {
        let samples = texts
            .into_iter()
            .enumerate()
            .map(|(i, (code, summary))| Sample {
                code,
                summary,
                id: i as u32,
            })
            .collect();
        CorpusSplit { name, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-file load statistics; malformed lines are skipped, not fatal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    code: Option<String>,
    summary: Option<String>,
}

/// Load a JSONL corpus file. Each line must be an object with non-empty
/// string fields `code` and `summary`; lines that are not are skipped and
/// counted in the returned stats.
pub fn load_corpus(path: &Path, split_name: SplitName) -> Result<(CorpusSplit, LoadStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);

    let mut stats = LoadStats::default();
    let mut texts = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: std::result::Result<RawSample, _> = serde_json::from_str(&line);
        let keep = match raw {
            Ok(RawSample {
                code: Some(code),
                summary: Some(summary),
            }) => {
                if code.trim().is_empty() {
                    Err("empty code".to_string())
                } else if summary.split_whitespace().next().is_none() {
                    Err("empty summary".to_string())
                } else {
                    Ok((code, summary))
                }
            }
            Ok(_) => Err("missing \"code\" or \"summary\" field".to_string()),
            Err(e) => Err(format!("invalid JSON: {e}")),
        };
        match keep {
            Ok(pair) => texts.push(pair),
            Err(why) => {
                stats.skipped += 1;
                stats
                    .warnings
                    .push(format!("{}:{}: skipped ({why})", path.display(), lineno + 1));
            }
        }
    }
    stats.loaded = texts.len();
    Ok((CorpusSplit::new(split_name, texts), stats))
}

fn normalize_code(code: &str) -> String {
    code.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Remove every train sample whose whitespace-normalized code exactly matches
/// some test-split code. Ids are reassigned so they stay contiguous.
pub fn dedup_against(train: &CorpusSplit, test: &CorpusSplit) -> CorpusSplit {
    let test_codes: HashSet<String> = test.samples.iter().map(|s| normalize_code(&s.code)).collect();
    let kept: Vec<(String, String)> = train
        .samples
        .iter()
        .filter(|s| !test_codes.contains(&normalize_code(&s.code)))
        .map(|s| (s.code.clone(), s.summary.clone()))
        .collect();
    CorpusSplit::new(train.name, kept)
}

/// First whitespace-delimited word of the summary, lowercased, trailing
/// punctuation stripped.
pub fn extract_action_word(summary: &str) -> Result<String> {
    let first = summary
        .split_whitespace()
        .next()
        .ok_or_else(|| Error::Corpus("cannot extract action word from empty summary".into()))?;
    let word = first.trim_end_matches(['.', ',', ';', ':', '!', '?']).to_lowercase();
    if word.is_empty() {
        // Summary started with bare punctuation; keep the raw token lowercased.
        return Ok(first.to_lowercase());
    }
    Ok(word)
}

/// The K most frequent action words plus an "other" class.
///
/// Class ids 0..K-1 follow descending frequency (ties by word order);
/// `other_id` is K, so the classifier sees K+1 classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionWordTable {
    pub k: usize,
    pub words: Vec<String>,
    pub counts: BTreeMap<String, u64>,
}

impl ActionWordTable {
    pub fn other_id(&self) -> u32 {
        self.words.len() as u32
    }

    /// Total number of classes, table words plus "other".
    pub fn n_classes(&self) -> usize {
        self.words.len() + 1
    }

    pub fn class_of_word(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .unwrap_or_else(|| self.other_id())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&data)?)
    }
}

/// Count action words over the training split and keep the `k` most frequent.
/// With fewer than `k` distinct words the table shrinks (and the class count
/// with it).
pub fn build_action_table(train: &CorpusSplit, k: usize) -> Result<ActionWordTable> {
    if train.is_empty() {
        return Err(Error::Corpus("cannot build action table from empty split".into()));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for s in &train.samples {
        let w = extract_action_word(&s.summary)?;
        *freq.entry(w).or_insert(0) += 1;
    }
    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);

    let words: Vec<String> = ranked.iter().map(|(w, _)| w.clone()).collect();
    let counts: BTreeMap<String, u64> = ranked.into_iter().collect();
    Ok(ActionWordTable { k, words, counts })
}

/// Class id for a summary's action word, or the "other" id when it is not in
/// the table.
pub fn label_of(table: &ActionWordTable, summary: &str) -> Result<u32> {
    let word = extract_action_word(summary)?;
    Ok(table.class_of_word(&word))
}
