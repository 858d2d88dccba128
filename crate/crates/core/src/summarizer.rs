//! Fine-tuning the pretrained encoder with the decoder on code-to-summary
//! generation, plus beam-search decoding and a cross-attention dump for
//! debugging.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::mask::VisMask;
use crate::model::{
    adamw_step, clip_global_norm, AdamHyper, AdamState, Checkpoint, CrossAttnDump, Encoding,
    ForwardCtx, Mode, ModelConfig, Parameters,
};
use crate::pretrain::{warmup_lr, BatchCycler};
use crate::tokenizer::{TokenizedPair, Vocabulary, EOS, MASK, PAD, SOS};
use crate::{subseed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub beam: usize,
    pub max_gen_len: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
    pub validate_every: u64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Divide beam scores by hypothesis length. Off by default.
    pub length_normalize: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            lr: 5e-4,
            steps: 2000,
            beam: 5,
            max_gen_len: 128,
            freeze_encoder: false,
            seed: 0,
            validate_every: 200,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            weight_decay: 0.01,
            length_normalize: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.max_gen_len == 0 {
            return Err(Error::Config("lr, batch_size, max_gen_len must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters updated during fine-tuning. The classification head is not
/// part of the summarization loss and stays untouched.
pub fn finetune_trainable(freeze_encoder: bool) -> impl Fn(&str) -> bool {
    move |name: &str| {
        if name.starts_with("awp.") {
            return false;
        }
        if freeze_encoder && (name.starts_with("enc.") || name.starts_with("embed.")) {
            return false;
        }
        true
    }
}

/// All-visible mask over the code region (the encoder input during
/// fine-tuning and deployment is the code ids alone).
fn code_mask(len: usize) -> VisMask {
    VisMask::full(len)
}

/// Summed token cross entropy of one teacher-forced sample.
fn sample_cs_node(ctx: &mut ForwardCtx, pair: &TokenizedPair) -> Result<NodeId> {
    let code = &pair.code_ids;
    let e_code = ctx.encode(code, &code_mask(code.len()))?;
    let mut input = Vec::with_capacity(pair.summary_ids.len());
    input.push(SOS);
    input.extend(&pair.summary_ids[..pair.summary_ids.len() - 1]);
    let visible = vec![true; code.len()];
    let logits = ctx.decode(e_code, &input, &visible)?;
    let ce = ctx.graph().ce_rows(logits, &pair.summary_ids);
    Ok(ctx.graph().sum_all(ce))
}

/// Mean over samples of the summed summary log-loss.
pub fn batch_cs_node(ctx: &mut ForwardCtx, pairs: &[TokenizedPair]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for pair in pairs {
        let s = sample_cs_node(ctx, pair)?;
        acc = Some(match acc {
            Some(a) => ctx.graph().add(a, s),
            None => s,
        });
    }
    let total = acc.ok_or_else(|| Error::Model("empty fine-tune batch".into()))?;
    Ok(ctx.graph().scale(total, 1.0 / pairs.len() as f64))
}

/// Eval-mode summarization loss over a set of pairs.
pub fn cs_loss(cfg: &ModelConfig, params: &Parameters, pairs: &[TokenizedPair]) -> Result<f64> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let node = batch_cs_node(&mut ctx, pairs)?;
    Ok(ctx.value(node).item())
}

/// Teacher-forced next-token accuracy over the summary targets.
pub fn token_accuracy(
    cfg: &ModelConfig,
    params: &Parameters,
    pairs: &[TokenizedPair],
) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let e_code =
            crate::model::encode(cfg, params, &pair.code_ids, &code_mask(pair.code_ids.len()))?;
        let mut input = Vec::with_capacity(pair.summary_ids.len());
        input.push(SOS);
        input.extend(&pair.summary_ids[..pair.summary_ids.len() - 1]);
        let visible = vec![true; pair.code_ids.len()];
        let logits = crate::model::decode_forward(cfg, params, &e_code, &input, &visible)?;
        for (i, &target) in pair.summary_ids.iter().enumerate() {
            let row = logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if argmax == target as usize {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl FinetuneRecord {
    pub fn csv_header() -> &'static str {
        "step,L_CS,val_loss"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{}",
            self.step,
            self.train_loss,
            self.val_loss.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    /// Parameters after the final step.
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the lowest validation loss (the final one when no
    /// validation pairs were given).
    pub best_checkpoint: Checkpoint,
    pub records: Vec<FinetuneRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Fine-tune a pretrained checkpoint (encoder + decoder jointly unless the
/// encoder is frozen) on code-to-summary pairs.
pub fn finetune_run(
    fcfg: &FinetuneConfig,
    checkpoint: Checkpoint,
    train_pairs: &[TokenizedPair],
    valid_pairs: Option<&[TokenizedPair]>,
    vocab_fingerprint: u64,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    fcfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Corpus("cannot fine-tune on an empty corpus".into()));
    }
    if checkpoint.vocab_fingerprint != vocab_fingerprint {
        return Err(Error::Checkpoint(
            "checkpoint was built with a different vocabulary".into(),
        ));
    }
    let cfg = checkpoint.config.clone();
    let mut params = checkpoint.params;
    // Fresh optimizer for the fine-tuning phase.
    let mut opt = AdamState::new(&params);
    let trainable = finetune_trainable(fcfg.freeze_encoder);
    let mut cycler = BatchCycler::new(train_pairs.len(), subseed(fcfg.seed, "ft-batches", 0));

    let mut log: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("loss_log.csv");
            let mut f = std::fs::File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            writeln!(f, "{}", FinetuneRecord::csv_header())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some(f)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(fcfg.steps as usize);
    let mut best: Option<(f64, Parameters, u64)> = None;
    for step in 0..fcfg.steps {
        let idxs = cycler.next_batch(fcfg.batch_size);
        let batch: Vec<TokenizedPair> = idxs.iter().map(|&i| train_pairs[i].clone()).collect();
        let mut ctx = ForwardCtx::new(&cfg, &params, Mode::Train {
            dropout_seed: subseed(fcfg.seed, "ft-dropout", step),
        });
        let loss_node = batch_cs_node(&mut ctx, &batch)?;
        let train_loss = ctx.value(loss_node).item();
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { task: "CS".into(), step });
        }
        let mut grads = ctx.backward(loss_node)?;
        clip_global_norm(&params, &mut grads, fcfg.grad_clip, &trainable);
        let hp = AdamHyper { lr: fcfg.lr, weight_decay: fcfg.weight_decay, ..AdamHyper::default() };
        let lr = warmup_lr(fcfg.lr, step, fcfg.steps, fcfg.warmup_frac);
        adamw_step(&mut params, &grads, &mut opt, &hp, lr, &trainable);

        let mut val_loss = None;
        let last = step + 1 == fcfg.steps;
        if let Some(vp) = valid_pairs {
            if !vp.is_empty()
                && fcfg.validate_every > 0
                && ((step + 1) % fcfg.validate_every == 0 || last)
            {
                let v = cs_loss(&cfg, &params, vp)?;
                val_loss = Some(v);
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, params.clone(), step + 1));
                }
            }
        }
        let record = FinetuneRecord { step, train_loss, val_loss };
        if let Some(f) = &mut log {
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io("loss_log.csv", e))?;
        }
        records.push(record);
    }

    let make_ck = |params: Parameters, opt: Option<AdamState>, step: u64| Checkpoint {
        config: cfg.clone(),
        params,
        opt,
        step,
        label: checkpoint.label.clone(),
        vocab_fingerprint,
    };
    let final_checkpoint = make_ck(params.clone(), Some(opt), fcfg.steps);
    let best_checkpoint = match best {
        Some((_, p, step)) => make_ck(p, None, step),
        None => final_checkpoint.clone(),
    };

    let mut checkpoint_paths = Vec::new();
    if let Some(dir) = out_dir {
        let fp = dir.join("checkpoint_final.ckpt");
        final_checkpoint.save(&fp)?;
        checkpoint_paths.push(fp);
        let bp = dir.join("checkpoint_best.ckpt");
        best_checkpoint.save(&bp)?;
        checkpoint_paths.push(bp);
    }
    Ok(FinetuneOutcome { final_checkpoint, best_checkpoint, records, checkpoint_paths })
}

/// One beam-search candidate. `ids` are generated tokens (the terminating
/// EOS included when the hypothesis ended on it).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Anything that can score the next token given the generated prefix.
pub trait NextTokenScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
    fn eos_id(&self) -> u32;
}

fn better(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> std::cmp::Ordering {
    let score = |h: &Hypothesis| {
        if normalize && !h.ids.is_empty() {
            h.log_prob / h.ids.len() as f64
        } else {
            h.log_prob
        }
    };
    score(b)
        .partial_cmp(&score(a))
        .unwrap_or(std::cmp::Ordering::Equal)
        // Higher score first; on ties the lexicographically smaller sequence.
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Length-synchronized beam search. Finished hypotheses (EOS or length cap)
/// retire into a pool; the best pooled hypothesis wins, ties going to the
/// lexicographically smaller id sequence. The greedy path is always scored
/// as well, so the result never falls below the greedy baseline.
pub fn beam_search(
    scorer: &mut dyn NextTokenScorer,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Model("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Model("max_len must be at least 1".into()));
    }
    let eos = scorer.eos_id();

    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut live = vec![Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }];
    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let lps = scorer.log_probs(&hyp.ids)?;
            for (tok, &lp) in lps.iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(tok as u32);
                candidates.push(Hypothesis {
                    ids,
                    log_prob: hyp.log_prob + lp,
                    finished: tok as u32 == eos,
                });
            }
        }
        // The beam budget is shared: only candidates ranked within the top
        // `beam` survive, and EOS ones among them retire into the pool.
        candidates.sort_by(|a, b| better(a, b, length_normalize));
        candidates.truncate(beam);
        let mut next: Vec<Hypothesis> = Vec::new();
        for cand in candidates {
            if cand.finished {
                pool.push(cand);
            } else {
                next.push(cand);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    for mut hyp in live {
        hyp.finished = true; // length cap
        pool.push(hyp);
    }

    // Greedy baseline: argmax chain with the same tie rule (smallest id).
    let mut greedy = Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false };
    for _ in 0..max_len {
        let lps = scorer.log_probs(&greedy.ids)?;
        let mut best_tok: Option<(usize, f64)> = None;
        for (tok, &lp) in lps.iter().enumerate() {
            if !lp.is_finite() {
                continue;
            }
            if best_tok.is_none_or(|(_, b)| lp > b) {
                best_tok = Some((tok, lp));
            }
        }
        let Some((tok, lp)) = best_tok else { break };
        greedy.ids.push(tok as u32);
        greedy.log_prob += lp;
        if tok as u32 == eos {
            break;
        }
    }
    if !greedy.ids.is_empty() {
        greedy.finished = true;
        pool.push(greedy);
    }

    pool.sort_by(|a, b| better(a, b, length_normalize));
    pool.into_iter()
        .next()
        .ok_or_else(|| Error::Model("no candidate sequence could be produced".into()))
}

/// Beam-search scorer backed by the trained model. PAD, SOS and MASK are
/// never proposed.
pub struct ModelScorer<'a> {
    cfg: &'a ModelConfig,
    params: &'a Parameters,
    e_code: Encoding,
    code_visible: Vec<bool>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Parameters, code_ids: &[u32]) -> Result<Self> {
        let e_code = crate::model::encode(cfg, params, code_ids, &code_mask(code_ids.len()))?;
        Ok(ModelScorer { cfg, params, e_code, code_visible: vec![true; code_ids.len()] })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(SOS);
        input.extend_from_slice(prefix);
        let logits = crate::model::decode_forward(
            self.cfg,
            self.params,
            &self.e_code,
            &input,
            &self.code_visible,
        )?;
        let row = logits.row(logits.rows() - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut lps: Vec<f64> = row.iter().map(|v| v - lse).collect();
        for banned in [PAD, SOS, MASK] {
            lps[banned as usize] = f64::NEG_INFINITY;
        }
        Ok(lps)
    }

    fn eos_id(&self) -> u32 {
        EOS
    }
}

/// Generate a summary for raw code text: encode, beam-search, decode.
pub fn summarize(
    cfg: &ModelConfig,
    params: &Parameters,
    vocab: &Vocabulary,
    code: &str,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<String> {
    if code.trim().is_empty() {
        return Err(Error::Model("cannot summarize empty code".into()));
    }
    let sample = crate::corpus::Sample { code: code.to_string(), summary: "-".into(), id: 0 };
    let pair = crate::tokenizer::assemble(vocab, &sample);
    let mut scorer = ModelScorer::new(cfg, params, &pair.code_ids)?;
    let hyp = beam_search(&mut scorer, beam, max_len, length_normalize)?;
    let ids: Vec<u32> = hyp.ids.iter().copied().filter(|&id| id != EOS).collect();
    vocab.decode(&ids)
}

/// Teacher-forced cross-attention dump for a (code, summary) pair.
pub fn export_attention(
    cfg: &ModelConfig,
    params: &Parameters,
    vocab: &Vocabulary,
    code: &str,
    summary: &str,
) -> Result<CrossAttnDump> {
    let sample =
        crate::corpus::Sample { code: code.to_string(), summary: summary.to_string(), id: 0 };
    let pair = crate::tokenizer::assemble(vocab, &sample);
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    ctx.record_cross_attention();
    let e_code = ctx.encode(&pair.code_ids, &code_mask(pair.code_ids.len()))?;
    let mut input = Vec::with_capacity(pair.summary_ids.len());
    input.push(SOS);
    input.extend(&pair.summary_ids[..pair.summary_ids.len() - 1]);
    let visible = vec![true; pair.code_ids.len()];
    ctx.decode(e_code, &input, &visible)?;
    Ok(ctx.cross_attention().clone())
}
