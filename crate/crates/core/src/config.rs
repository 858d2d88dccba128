//! Run configuration: a single TOML document with one section per pipeline
//! stage. Every field has a default; unknown keys are rejected so typos
//! cannot silently fall back to defaults. The resolved document is echoed
//! into each output directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::pretrain::{PretrainConfig, TaskSet};
use crate::summarizer::FinetuneConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { train: None, valid: None, test: None, out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Remove train samples whose normalized code matches the test split.
    pub dedup: bool,
    /// Number of action-word classes before "other".
    pub action_words: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { dedup: false, action_words: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_lm_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 512,
            max_len: 384,
            dropout: 0.1,
            tie_lm_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub mask_rate: f64,
    /// Enabled tasks, any subset of ["AWP", "ULM", "MLM"].
    pub tasks: Vec<String>,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub awp_include_summary: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            batch_size: 32,
            lr: 5e-4,
            steps: 2000,
            mask_rate: 0.15,
            tasks: vec!["AWP".into(), "ULM".into(), "MLM".into()],
            checkpoint_every: 1000,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            weight_decay: 0.01,
            awp_include_summary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub beam: usize,
    pub max_gen_len: usize,
    pub freeze_encoder: bool,
    pub validate_every: u64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub length_normalize: bool,
    /// Skip the pretrained checkpoint and fine-tune from random init.
    pub random_init: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            batch_size: 32,
            lr: 5e-4,
            steps: 2000,
            beam: 5,
            max_gen_len: 128,
            freeze_encoder: false,
            validate_every: 200,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            weight_decay: 0.01,
            length_normalize: false,
            random_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam: usize,
    pub max_gen_len: usize,
    /// Which prepared split to evaluate: "train", "valid", or "test".
    pub split: String,
    pub buckets: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { beam: 5, max_gen_len: 128, split: "test".into(), buckets: true }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Write the fully resolved configuration for provenance.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn task_set(&self) -> Result<TaskSet> {
        let mut set = TaskSet { awp: false, ulm: false, mlm: false };
        for t in &self.pretrain.tasks {
            match t.to_uppercase().as_str() {
                "AWP" => set.awp = true,
                "ULM" => set.ulm = true,
                "MLM" => set.mlm = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown pretraining task {other:?} (expected AWP, ULM, or MLM)"
                    )))
                }
            }
        }
        if !set.any() {
            return Err(Error::Config("pretrain.tasks must enable at least one task".into()));
        }
        Ok(set)
    }

    /// Model configuration once vocabulary size and class count are known.
    pub fn model_config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ffn: self.model.d_ffn,
            max_len: self.model.max_len,
            vocab_size,
            n_classes,
            dropout: self.model.dropout,
            seed: crate::subseed(self.seed, "model-init", 0),
            tie_lm_head: self.model.tie_lm_head,
        }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            steps: self.pretrain.steps,
            mask_rate: self.pretrain.mask_rate,
            tasks: self.task_set()?,
            seed: crate::subseed(self.seed, "pretrain", 0),
            checkpoint_every: self.pretrain.checkpoint_every,
            grad_clip: self.pretrain.grad_clip,
            warmup_frac: self.pretrain.warmup_frac,
            weight_decay: self.pretrain.weight_decay,
            awp_include_summary: self.pretrain.awp_include_summary,
        })
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            batch_size: self.finetune.batch_size,
            lr: self.finetune.lr,
            steps: self.finetune.steps,
            beam: self.finetune.beam,
            max_gen_len: self.finetune.max_gen_len,
            freeze_encoder: self.finetune.freeze_encoder,
            seed: crate::subseed(self.seed, "finetune", 0),
            validate_every: self.finetune.validate_every,
            grad_clip: self.finetune.grad_clip,
            warmup_frac: self.finetune.warmup_frac,
            weight_decay: self.finetune.weight_decay,
            length_normalize: self.finetune.length_normalize,
        }
    }
}
