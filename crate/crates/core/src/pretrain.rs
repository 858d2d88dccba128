//! The three summary-focused pretraining losses and the joint multi-task
//! training loop. The shared encoder receives gradients from every enabled
//! task; the per-step loss is their plain (unweighted) sum.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tensor};
use crate::batching::{collate, CollateOptions, MaskedBatch, TaskKind};
use crate::corpus::ActionWordTable;
use crate::mask::VisMask;
use crate::model::{
    adamw_step, clip_global_norm, AdamHyper, AdamState, Checkpoint, ForwardCtx, Mode, ModelConfig,
    Parameters,
};
use crate::tokenizer::TokenizedPair;
use crate::{subseed, Error, Result};

/// Which pretraining tasks are enabled. Ablations switch individual tasks
/// off; at least one must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub awp: bool,
    pub ulm: bool,
    pub mlm: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet { awp: true, ulm: true, mlm: true }
    }
}

impl TaskSet {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn any(&self) -> bool {
        self.awp || self.ulm || self.mlm
    }

    /// Human-readable tag: "all tasks", or the disabled ones in the fixed
    /// order AWP, MLM, ULM, e.g. "w/o AWP, w/o MLM".
    pub fn label(&self) -> String {
        let mut missing = Vec::new();
        if !self.awp {
            missing.push("w/o AWP");
        }
        if !self.mlm {
            missing.push("w/o MLM");
        }
        if !self.ulm {
            missing.push("w/o ULM");
        }
        if missing.is_empty() {
            "all tasks".to_string()
        } else {
            missing.join(", ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub mask_rate: f64,
    pub tasks: TaskSet,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    /// Fraction of steps spent in linear warmup before the constant lr.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub awp_include_summary: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 32,
            lr: 5e-4,
            steps: 2000,
            mask_rate: 0.15,
            tasks: TaskSet::all(),
            seed: 0,
            checkpoint_every: 1000,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            weight_decay: 0.01,
            awp_include_summary: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tasks.any() {
            return Err(Error::Config("pretraining requires at least one enabled task".into()));
        }
        if !(0.0..1.0).contains(&self.mask_rate) || self.mask_rate == 0.0 {
            return Err(Error::Config(format!("mask_rate {} outside (0,1)", self.mask_rate)));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss readings for one joint step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLossRecord {
    pub step: u64,
    pub awp: Option<f64>,
    pub ulm: Option<f64>,
    pub mlm: Option<f64>,
    pub joint: f64,
}

impl TaskLossRecord {
    pub fn csv_header() -> &'static str {
        "step,L_AWP,L_ULM,L_MLM,joint"
    }

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            opt(self.awp),
            opt(self.ulm),
            opt(self.mlm),
            self.joint
        )
    }
}

/// Mean categorical cross entropy of logit rows against class labels.
pub fn loss_awp(logits: &Tensor, labels: &[u32]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Model("one label per logit row required".into()));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Model(format!("label {bad} out of range for {c} classes")));
    }
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i] as usize];
    }
    Ok(total / logits.rows() as f64)
}

fn awp_loss_node(ctx: &mut ForwardCtx, batch: &MaskedBatch) -> Result<NodeId> {
    debug_assert_eq!(batch.kind, TaskKind::Awp);
    let mut acc: Option<NodeId> = None;
    for (i, row) in batch.ids.iter().enumerate() {
        let (c, s) = batch.region[i];
        let real = c + s;
        let enc = ctx.encode(&row[..real], &VisMask::full(real))?;
        let logits = ctx.awp_logits(enc)?;
        let label = batch.targets[i][0];
        if label as usize >= ctx.value(logits).cols() {
            return Err(Error::Model(format!("class label {label} out of range")));
        }
        let ce = ctx.graph().ce_rows(logits, &[label]);
        acc = Some(match acc {
            Some(a) => ctx.graph().add(a, ce),
            None => ce,
        });
    }
    let total = acc.expect("non-empty batch");
    Ok(ctx.graph().scale(total, 1.0 / batch.batch_size() as f64))
}

fn ulm_loss_node(ctx: &mut ForwardCtx, batch: &MaskedBatch) -> Result<NodeId> {
    debug_assert_eq!(batch.kind, TaskKind::Ulm);
    let mut acc: Option<NodeId> = None;
    let mut n_tokens = 0usize;
    for (i, row) in batch.ids.iter().enumerate() {
        let (c, s) = batch.region[i];
        if s == 0 {
            return Err(Error::Model("empty summary region in ULM batch".into()));
        }
        let real = c + s;
        let vis = crate::batching::ulm_mask(c, s);
        let enc = ctx.encode(&row[..real], &vis)?;
        // The state one position left of each summary word predicts it; the
        // last code position predicts the first word.
        let positions: Vec<usize> = (c - 1..c - 1 + s).collect();
        let logits = ctx.lm_logits(enc, &positions)?;
        let ce = ctx.graph().ce_rows(logits, &batch.targets[i]);
        let sum = ctx.graph().sum_all(ce);
        acc = Some(match acc {
            Some(a) => ctx.graph().add(a, sum),
            None => sum,
        });
        n_tokens += s;
    }
    let total = acc.expect("non-empty batch");
    Ok(ctx.graph().scale(total, 1.0 / n_tokens as f64))
}

fn mlm_loss_node(ctx: &mut ForwardCtx, batch: &MaskedBatch) -> Result<NodeId> {
    debug_assert_eq!(batch.kind, TaskKind::Mlm);
    let mut acc: Option<NodeId> = None;
    let mut n_masked = 0usize;
    for (i, row) in batch.ids.iter().enumerate() {
        let (c, s) = batch.region[i];
        let real = c + s;
        let positions = &batch.masked_positions[i];
        if positions.is_empty() {
            return Err(Error::Model("MLM row without masked positions".into()));
        }
        let enc = ctx.encode(&row[..real], &VisMask::full(real))?;
        let logits = ctx.lm_logits(enc, positions)?;
        let ce = ctx.graph().ce_rows(logits, &batch.targets[i]);
        let sum = ctx.graph().sum_all(ce);
        acc = Some(match acc {
            Some(a) => ctx.graph().add(a, sum),
            None => sum,
        });
        n_masked += positions.len();
    }
    let total = acc.expect("non-empty batch");
    Ok(ctx.graph().scale(total, 1.0 / n_masked as f64))
}

/// Graph node for a task batch's loss on an existing forward tape.
pub fn task_loss_node(ctx: &mut ForwardCtx, batch: &MaskedBatch) -> Result<NodeId> {
    match batch.kind {
        TaskKind::Awp => awp_loss_node(ctx, batch),
        TaskKind::Ulm => ulm_loss_node(ctx, batch),
        TaskKind::Mlm => mlm_loss_node(ctx, batch),
    }
}

/// Eval-mode loss of any task batch (classification loss for AWP batches).
pub fn task_loss(cfg: &ModelConfig, params: &Parameters, batch: &MaskedBatch) -> Result<f64> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let node = task_loss_node(&mut ctx, batch)?;
    Ok(ctx.value(node).item())
}

/// Eval-mode ULM loss: mean token-level cross entropy over all summary
/// targets, final EOS included.
pub fn loss_ulm(cfg: &ModelConfig, params: &Parameters, batch: &MaskedBatch) -> Result<f64> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let node = ulm_loss_node(&mut ctx, batch)?;
    Ok(ctx.value(node).item())
}

/// Eval-mode MLM loss over the masked positions only.
pub fn loss_mlm(cfg: &ModelConfig, params: &Parameters, batch: &MaskedBatch) -> Result<f64> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
    let node = mlm_loss_node(&mut ctx, batch)?;
    Ok(ctx.value(node).item())
}

/// Per-row, per-position ULM cross entropies (eval mode), for inspecting the
/// causal structure of the loss.
pub fn ulm_per_position_losses(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &MaskedBatch,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(batch.batch_size());
    for (i, row) in batch.ids.iter().enumerate() {
        let (c, s) = batch.region[i];
        let real = c + s;
        let mut ctx = ForwardCtx::new(cfg, params, Mode::Eval);
        let vis = crate::batching::ulm_mask(c, s);
        let enc = ctx.encode(&row[..real], &vis)?;
        let positions: Vec<usize> = (c - 1..c - 1 + s).collect();
        let logits = ctx.lm_logits(enc, &positions)?;
        let ce = ctx.graph().ce_rows(logits, &batch.targets[i]);
        let v = ctx.value(ce);
        out.push((0..v.rows()).map(|r| v.get(r, 0)).collect());
    }
    Ok(out)
}

/// The batches for one joint step, one collation per enabled task, all drawn
/// from the same underlying samples.
#[derive(Debug, Clone, Default)]
pub struct TaskBatches {
    pub awp: Option<MaskedBatch>,
    pub ulm: Option<MaskedBatch>,
    pub mlm: Option<MaskedBatch>,
}

impl TaskBatches {
    /// Collate the given samples for every enabled task.
    pub fn build(
        pairs: &[TokenizedPair],
        tasks: TaskSet,
        table: &ActionWordTable,
        seed: u64,
        opts: &CollateOptions,
    ) -> Result<TaskBatches> {
        let mut b = TaskBatches::default();
        if tasks.awp {
            b.awp = Some(collate(pairs, TaskKind::Awp, Some(table), subseed(seed, "awp", 0), opts)?);
        }
        if tasks.ulm {
            b.ulm = Some(collate(pairs, TaskKind::Ulm, Some(table), subseed(seed, "ulm", 0), opts)?);
        }
        if tasks.mlm {
            b.mlm = Some(collate(pairs, TaskKind::Mlm, Some(table), subseed(seed, "mlm", 0), opts)?);
        }
        Ok(b)
    }
}

/// Parameter subset updated during pretraining: shared encoder, embeddings,
/// and the heads of the enabled tasks. The decoder waits for fine-tuning.
pub fn pretrain_trainable(tasks: TaskSet) -> impl Fn(&str) -> bool {
    move |name: &str| {
        if name.starts_with("dec.") {
            return false;
        }
        if name.starts_with("awp.") {
            return tasks.awp;
        }
        if name.starts_with("lm.") {
            return tasks.ulm || tasks.mlm;
        }
        true
    }
}

/// Effective learning rate with linear warmup (0-indexed step).
pub fn warmup_lr(base: f64, step: u64, total_steps: u64, warmup_frac: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_frac).round() as u64).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

/// One multi-task update: forward every enabled task on a shared tape,
/// backprop the summed loss once, clip, and apply AdamW.
pub fn joint_step(
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    params: &mut Parameters,
    opt: &mut AdamState,
    batches: &TaskBatches,
    step: u64,
) -> Result<TaskLossRecord> {
    let mut ctx = ForwardCtx::new(cfg, params, Mode::Train {
        dropout_seed: subseed(pcfg.seed, "dropout", step),
    });

    let mut record = TaskLossRecord { step, awp: None, ulm: None, mlm: None, joint: 0.0 };
    let mut nodes: Vec<NodeId> = Vec::new();
    let add_task = |ctx: &mut ForwardCtx,
                        batch: &Option<MaskedBatch>,
                        slot: &mut Option<f64>,
                        name: &str,
                        nodes: &mut Vec<NodeId>|
     -> Result<()> {
        if let Some(b) = batch {
            let node = task_loss_node(ctx, b)?;
            let v = ctx.value(node).item();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { task: name.to_string(), step });
            }
            *slot = Some(v);
            nodes.push(node);
        }
        Ok(())
    };
    add_task(&mut ctx, &batches.awp, &mut record.awp, "AWP", &mut nodes)?;
    add_task(&mut ctx, &batches.ulm, &mut record.ulm, "ULM", &mut nodes)?;
    add_task(&mut ctx, &batches.mlm, &mut record.mlm, "MLM", &mut nodes)?;
    if nodes.is_empty() {
        return Err(Error::Config("joint step with no enabled task batches".into()));
    }

    let mut joint = nodes[0];
    for &n in &nodes[1..] {
        joint = ctx.graph().add(joint, n);
    }
    record.joint = ctx.value(joint).item();

    let mut grads = ctx.backward(joint)?;
    let trainable = pretrain_trainable(pcfg.tasks);
    clip_global_norm(params, &mut grads, pcfg.grad_clip, &trainable);
    let hp = AdamHyper {
        lr: pcfg.lr,
        weight_decay: pcfg.weight_decay,
        ..AdamHyper::default()
    };
    let lr = warmup_lr(pcfg.lr, step, pcfg.steps, pcfg.warmup_frac);
    adamw_step(params, &grads, opt, &hp, lr, &trainable);
    Ok(record)
}

/// Deterministic epoch-shuffled batch index stream.
pub struct BatchCycler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchCycler {
    pub fn new(n: usize, seed: u64) -> BatchCycler {
        let mut c = BatchCycler { n, order: Vec::new(), cursor: 0, epoch: 0, seed };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(self.seed, "order", self.epoch));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.n);
        if self.cursor + k > self.n {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        out
    }
}

/// Everything a pretraining run leaves behind.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<TaskLossRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Run the joint loop for `pcfg.steps` steps over the assembled corpus.
/// When `out_dir` is given, a `loss_log.csv` and periodic plus final
/// checkpoints are written there. The final checkpoint carries the
/// enabled-task label for ablation bookkeeping.
pub fn pretrain_run(
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    pairs: &[TokenizedPair],
    table: &ActionWordTable,
    vocab_fingerprint: u64,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    pcfg.validate()?;
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Corpus("cannot pretrain on an empty corpus".into()));
    }

    let mut params = Parameters::init(cfg);
    let mut opt = AdamState::new(&params);
    let mut cycler = BatchCycler::new(pairs.len(), subseed(pcfg.seed, "batches", 0));
    let opts = CollateOptions {
        mask_rate: pcfg.mask_rate,
        awp_include_summary: pcfg.awp_include_summary,
    };

    let mut log: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("loss_log.csv");
            let mut f = std::fs::File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            writeln!(f, "{}", TaskLossRecord::csv_header())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some(f)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(pcfg.steps as usize);
    let mut checkpoint_paths = Vec::new();
    for step in 0..pcfg.steps {
        let idxs = cycler.next_batch(pcfg.batch_size);
        let batch_pairs: Vec<TokenizedPair> = idxs.iter().map(|&i| pairs[i].clone()).collect();
        let batches = TaskBatches::build(
            &batch_pairs,
            pcfg.tasks,
            table,
            subseed(pcfg.seed, "collate", step),
            &opts,
        )?;
        let record = joint_step(cfg, pcfg, &mut params, &mut opt, &batches, step)?;
        if let Some(f) = &mut log {
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io("loss_log.csv", e))?;
        }
        records.push(record);

        let last = step + 1 == pcfg.steps;
        if let Some(dir) = out_dir {
            if !last && pcfg.checkpoint_every > 0 && (step + 1) % pcfg.checkpoint_every == 0 {
                let ck = Checkpoint {
                    config: cfg.clone(),
                    params: params.clone(),
                    opt: Some(opt.clone()),
                    step: step + 1,
                    label: pcfg.tasks.label(),
                    vocab_fingerprint,
                };
                let path = dir.join(format!("checkpoint_step_{}.ckpt", step + 1));
                ck.save(&path)?;
                checkpoint_paths.push(path);
            }
        }
    }

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        params,
        opt: Some(opt),
        step: pcfg.steps,
        label: pcfg.tasks.label(),
        vocab_fingerprint,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint_final.ckpt");
        checkpoint.save(&path)?;
        checkpoint_paths.push(path);
    }
    Ok(PretrainOutcome { checkpoint, records, checkpoint_paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_action_table, CorpusSplit, SplitName};
    use crate::tokenizer::{assemble_all, train_vocab, Vocabulary};

    fn synthetic_corpus(n: usize) -> CorpusSplit {
        let verbs = ["get", "set", "add", "remove"];
        let nouns = ["index", "value", "node", "cache", "flag", "count", "limit", "name"];
        let pairs: Vec<(String, String)> = (0..n)
            .map(|i| {
                let v = verbs[i % verbs.len()];
                let o = nouns[(i / verbs.len()) % nouns.len()];
                (
                    format!("int {v}_{o}_{i}(int x) {{ return {o} [ x + {i} ] ; }}"),
                    format!("{v} the {o} field {i}"),
                )
            })
            .collect();
        CorpusSplit::new(SplitName::Train, pairs)
    }

    fn fixture(
        n: usize,
    ) -> (ModelConfig, Vocabulary, ActionWordTable, Vec<crate::tokenizer::TokenizedPair>) {
        let corpus = synthetic_corpus(n);
        let vocab = train_vocab(&corpus, 160).unwrap();
        let table = build_action_table(&corpus, 40).unwrap();
        let (pairs, _) = assemble_all(&vocab, &corpus);
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_len: 96,
            vocab_size: vocab.len(),
            n_classes: table.n_classes(),
            dropout: 0.0,
            seed: 5,
            tie_lm_head: false,
        };
        (cfg, vocab, table, pairs)
    }

    #[test]
    fn loss_awp_uniform_is_ln_classes() {
        let logits = Tensor::zeros(3, 41);
        let loss = loss_awp(&logits, &[0, 5, 40]).unwrap();
        assert!((loss - (41.0f64).ln()).abs() < 1e-9);
        assert!((loss - 3.71357).abs() < 1e-4);
    }

    #[test]
    fn loss_awp_saturated_is_near_zero() {
        let mut logits = Tensor::zeros(1, 41);
        logits.set(0, 7, 1e9);
        assert!(loss_awp(&logits, &[7]).unwrap() < 1e-12);
    }

    #[test]
    fn loss_awp_out_of_range_label_errors() {
        let logits = Tensor::zeros(2, 5);
        assert!(loss_awp(&logits, &[0, 5]).is_err());
    }

    #[test]
    fn loss_awp_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        let data: Vec<f64> = (0..5 * 41).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let logits = Tensor::from_vec(5, 41, data);
        let labels = [3u32, 40, 0, 17, 22];
        let got = loss_awp(&logits, &labels).unwrap();

        // Direct softmax + log.
        let mut expect = 0.0;
        for i in 0..5 {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[labels[i] as usize].exp() / denom;
            expect -= p.ln();
        }
        expect /= 5.0;
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_model_task_losses_equal_ln_vocab() {
        let (cfg, _vocab, table, pairs) = fixture(8);
        let params = Parameters::zeros_like(&cfg);
        let batches =
            TaskBatches::build(&pairs[..4], TaskSet::all(), &table, 3, &CollateOptions::default())
                .unwrap();
        let ln_v = (cfg.vocab_size as f64).ln();
        let ulm = loss_ulm(&cfg, &params, batches.ulm.as_ref().unwrap()).unwrap();
        let mlm = loss_mlm(&cfg, &params, batches.mlm.as_ref().unwrap()).unwrap();
        assert!((ulm - ln_v).abs() < 1e-6, "ULM {ulm} vs ln|V| {ln_v}");
        assert!((mlm - ln_v).abs() < 1e-6, "MLM {mlm} vs ln|V| {ln_v}");
    }

    #[test]
    fn saturated_lm_bias_drives_ulm_loss_to_zero() {
        let (cfg, _vocab, table, mut pairs) = fixture(4);
        // Make every summary target the same token so a shared bias can
        // saturate it.
        let t = 9u32;
        for p in &mut pairs {
            for id in &mut p.summary_ids {
                *id = t;
            }
        }
        let mut params = Parameters::zeros_like(&cfg);
        params.get_mut("lm.b").set(0, t as usize, 40.0);
        let batch =
            collate(&pairs[..1], TaskKind::Ulm, Some(&table), 0, &CollateOptions::default()).unwrap();
        let loss = loss_ulm(&cfg, &params, &batch).unwrap();
        assert!(loss < 0.01, "saturated loss {loss}");
    }

    #[test]
    fn ulm_loss_matches_manual_per_position_cross_entropy() {
        let (cfg, _vocab, table, pairs) = fixture(4);
        let params = Parameters::init(&cfg);
        let batch =
            collate(&pairs[..1], TaskKind::Ulm, Some(&table), 0, &CollateOptions::default()).unwrap();
        let got = loss_ulm(&cfg, &params, &batch).unwrap();

        // Manual forward + softmax per position.
        let (c, s) = batch.region[0];
        let ids = &batch.ids[0][..c + s];
        let vis = crate::batching::ulm_mask(c, s);
        let enc = crate::model::encode(&cfg, &params, ids, &vis).unwrap();
        let mut expect = 0.0;
        for i in 0..s {
            let pos = c - 1 + i;
            let logits = crate::model::lm_logits(&cfg, &params, &enc, &[pos]).unwrap();
            let row = logits.row(0);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let target = batch.targets[0][i] as usize;
            let logp = (row[target] - m) - denom.ln();
            expect -= logp;
        }
        expect /= s as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn mlm_loss_matches_manual_computation() {
        let (cfg, _vocab, table, pairs) = fixture(4);
        let params = Parameters::init(&cfg);
        let batch =
            collate(&pairs[..2], TaskKind::Mlm, Some(&table), 5, &CollateOptions::default()).unwrap();
        let got = loss_mlm(&cfg, &params, &batch).unwrap();

        let mut expect = 0.0;
        let mut count = 0usize;
        for r in 0..batch.batch_size() {
            let (c, s) = batch.region[r];
            let ids = &batch.ids[r][..c + s];
            let enc = crate::model::encode(&cfg, &params, ids, &VisMask::full(c + s)).unwrap();
            for (k, &pos) in batch.masked_positions[r].iter().enumerate() {
                let logits = crate::model::lm_logits(&cfg, &params, &enc, &[pos]).unwrap();
                let row = logits.row(0);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let target = batch.targets[r][k] as usize;
                expect -= (row[target] - m) - denom.ln();
                count += 1;
            }
        }
        expect /= count as f64;
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn ulm_loss_is_causal_per_position() {
        let (cfg, _vocab, table, pairs) = fixture(4);
        let params = Parameters::init(&cfg);
        let batch =
            collate(&pairs[..1], TaskKind::Ulm, Some(&table), 0, &CollateOptions::default()).unwrap();
        let base = ulm_per_position_losses(&cfg, &params, &batch).unwrap();

        // Edit summary word at local index k; earlier per-position losses
        // must be bit-identical.
        let (c, s) = batch.region[0];
        assert!(s >= 3);
        let k = 2usize;
        let mut edited = batch.clone();
        edited.ids[0][c + k] = 6;
        edited.targets[0][k] = 6;
        let alt = ulm_per_position_losses(&cfg, &params, &edited).unwrap();
        for i in 0..k {
            assert_eq!(base[0][i], alt[0][i], "loss at position {i} changed");
        }
        assert_ne!(base[0][k], alt[0][k]);
    }

    #[test]
    fn joint_equals_sum_of_enabled_losses() {
        let (cfg, _vocab, table, pairs) = fixture(8);
        let mut params = Parameters::init(&cfg);
        let mut opt = AdamState::new(&params);
        let pcfg = PretrainConfig { steps: 10, batch_size: 4, ..Default::default() };
        let batches =
            TaskBatches::build(&pairs[..4], TaskSet::all(), &table, 1, &CollateOptions::default())
                .unwrap();
        let rec = joint_step(&cfg, &pcfg, &mut params, &mut opt, &batches, 0).unwrap();
        let sum = rec.awp.unwrap() + rec.ulm.unwrap() + rec.mlm.unwrap();
        assert!((rec.joint - sum).abs() < 1e-6);

        // Single-task joint equals that task's loss exactly.
        let mut params = Parameters::init(&cfg);
        let mut opt = AdamState::new(&params);
        let only_mlm = TaskSet { awp: false, ulm: false, mlm: true };
        let pcfg = PretrainConfig { tasks: only_mlm, steps: 10, batch_size: 4, ..Default::default() };
        let batches =
            TaskBatches::build(&pairs[..4], only_mlm, &table, 1, &CollateOptions::default()).unwrap();
        let rec = joint_step(&cfg, &pcfg, &mut params, &mut opt, &batches, 0).unwrap();
        assert!(rec.awp.is_none() && rec.ulm.is_none());
        assert_eq!(rec.joint, rec.mlm.unwrap());
    }

    #[test]
    fn two_hundred_steps_reduce_joint_loss() {
        let (cfg, _vocab, table, pairs) = fixture(8);
        let pcfg = PretrainConfig {
            steps: 200,
            batch_size: 8,
            checkpoint_every: 0,
            seed: 11,
            ..Default::default()
        };
        let outcome = pretrain_run(&cfg, &pcfg, &pairs, &table, 0, None).unwrap();
        let first = outcome.records.first().unwrap().joint;
        let last = outcome.records.last().unwrap().joint;
        assert!(last < first, "joint loss did not descend: {first} -> {last}");
    }

    #[test]
    fn same_seed_reproduces_early_losses() {
        let (cfg, _vocab, table, pairs) = fixture(8);
        let pcfg =
            PretrainConfig { steps: 10, batch_size: 4, checkpoint_every: 0, seed: 2, ..Default::default() };
        let a = pretrain_run(&cfg, &pcfg, &pairs, &table, 0, None).unwrap();
        let b = pretrain_run(&cfg, &pcfg, &pairs, &table, 0, None).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn checkpoint_label_reflects_task_set() {
        assert_eq!(TaskSet::all().label(), "all tasks");
        assert_eq!(TaskSet { awp: false, ..TaskSet::all() }.label(), "w/o AWP");
        let ulm_only = TaskSet { awp: false, mlm: false, ulm: true };
        assert_eq!(ulm_only.label(), "w/o AWP, w/o MLM");

        let (cfg, _vocab, table, pairs) = fixture(4);
        let pcfg = PretrainConfig {
            steps: 2,
            batch_size: 2,
            tasks: ulm_only,
            checkpoint_every: 0,
            ..Default::default()
        };
        let outcome = pretrain_run(&cfg, &pcfg, &pairs, &table, 0, None).unwrap();
        assert_eq!(outcome.checkpoint.label, "w/o AWP, w/o MLM");
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let (cfg, _vocab, table, pairs) = fixture(8);
        let pcfg =
            PretrainConfig { steps: 10, batch_size: 4, checkpoint_every: 0, seed: 7, ..Default::default() };
        let opts = CollateOptions::default();

        // Uninterrupted 10 steps.
        let mut params_a = Parameters::init(&cfg);
        let mut opt_a = AdamState::new(&params_a);
        let mut cycler_a = BatchCycler::new(pairs.len(), subseed(pcfg.seed, "batches", 0));
        let mut losses_a = Vec::new();
        for step in 0..10 {
            let idxs = cycler_a.next_batch(4);
            let bp: Vec<_> = idxs.iter().map(|&i| pairs[i].clone()).collect();
            let batches =
                TaskBatches::build(&bp, pcfg.tasks, &table, subseed(pcfg.seed, "collate", step), &opts)
                    .unwrap();
            losses_a.push(joint_step(&cfg, &pcfg, &mut params_a, &mut opt_a, &batches, step).unwrap());
        }

        // 5 steps, checkpoint, reload, 5 more.
        let mut params_b = Parameters::init(&cfg);
        let mut opt_b = AdamState::new(&params_b);
        let mut cycler_b = BatchCycler::new(pairs.len(), subseed(pcfg.seed, "batches", 0));
        let mut losses_b = Vec::new();
        for step in 0..5 {
            let idxs = cycler_b.next_batch(4);
            let bp: Vec<_> = idxs.iter().map(|&i| pairs[i].clone()).collect();
            let batches =
                TaskBatches::build(&bp, pcfg.tasks, &table, subseed(pcfg.seed, "collate", step), &opts)
                    .unwrap();
            losses_b.push(joint_step(&cfg, &pcfg, &mut params_b, &mut opt_b, &batches, step).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        Checkpoint {
            config: cfg.clone(),
            params: params_b,
            opt: Some(opt_b),
            step: 5,
            label: pcfg.tasks.label(),
            vocab_fingerprint: 0,
        }
        .save(&path)
        .unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut params_c = loaded.params;
        let mut opt_c = loaded.opt.unwrap();
        // The batch stream is a pure function of (seed, epoch, cursor);
        // replaying the cycler reaches the same point.
        for step in 5..10 {
            let idxs = cycler_b.next_batch(4);
            let bp: Vec<_> = idxs.iter().map(|&i| pairs[i].clone()).collect();
            let batches =
                TaskBatches::build(&bp, pcfg.tasks, &table, subseed(pcfg.seed, "collate", step), &opts)
                    .unwrap();
            losses_b.push(joint_step(&cfg, &pcfg, &mut params_c, &mut opt_c, &batches, step).unwrap());
        }
        assert_eq!(losses_a, losses_b);
        assert_eq!(params_a, params_c);
    }

    #[test]
    fn decoder_untouched_by_pretraining() {
        let (cfg, _vocab, table, pairs) = fixture(4);
        let mut params = Parameters::init(&cfg);
        let before: Vec<Tensor> = (0..params.n_tensors())
            .filter(|&i| params.name(i).starts_with("dec."))
            .map(|i| params.tensor(i).clone())
            .collect();
        let mut opt = AdamState::new(&params);
        let pcfg = PretrainConfig { steps: 3, batch_size: 4, ..Default::default() };
        for step in 0..3 {
            let batches =
                TaskBatches::build(&pairs[..4], pcfg.tasks, &table, step, &CollateOptions::default())
                    .unwrap();
            joint_step(&cfg, &pcfg, &mut params, &mut opt, &batches, step).unwrap();
        }
        let after: Vec<Tensor> = (0..params.n_tensors())
            .filter(|&i| params.name(i).starts_with("dec."))
            .map(|i| params.tensor(i).clone())
            .collect();
        assert_eq!(before, after);
    }
}
