//! Pipeline commands behind the command-line entry points: prepare,
//! pretrain, finetune, summarize, evaluate, ablate. Every command reads the
//! resolved `RunConfig`, writes its outputs under a stage directory inside
//! `paths.out_dir`, and echoes the configuration it ran with.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    build_action_table, dedup_against, load_corpus, ActionWordTable, CorpusSplit,
    SplitName,
};
use crate::metrics::{
    attach_significance, classification_report, render_table, score_corpus, ClassificationReport,
    ScoreReport,
};
use crate::model::{awp_logits, encode, Checkpoint, Parameters};
use crate::pretrain::{pretrain_run, TaskSet};
use crate::summarizer::{finetune_run, summarize};
use crate::tokenizer::{assemble, assemble_all, train_vocab, Vocabulary};
use crate::mask::VisMask;
use crate::{Error, Result};

fn artifacts_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("artifacts")
}

fn write_split_jsonl(split: &CorpusSplit, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        code: &'a str,
        summary: &'a str,
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for s in &split.samples {
        let line = serde_json::to_string(&Line { code: &s.code, summary: &s.summary })?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrepareReport {
    pub train_loaded: usize,
    pub train_skipped: usize,
    pub valid_loaded: usize,
    pub valid_skipped: usize,
    pub test_loaded: usize,
    pub test_skipped: usize,
    pub dedup_removed: Option<usize>,
    pub vocab_size: usize,
    pub n_classes: usize,
}

/// Load corpora, optionally dedup train against test, train the subword
/// vocabulary, and build the action-word table. Artifacts land in
/// `<out_dir>/artifacts/` and are byte-stable across reruns.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareReport> {
    let train_path = cfg
        .paths
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("paths.train is required for prepare".into()))?;
    let dir = artifacts_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut report = PrepareReport::default();
    let (mut train, train_stats) = load_corpus(train_path, SplitName::Train)?;
    report.train_loaded = train_stats.loaded;
    report.train_skipped = train_stats.skipped;
    for w in &train_stats.warnings {
        eprintln!("warning: {w}");
    }
    if train.is_empty() {
        return Err(Error::Corpus(format!("{} contains no usable samples", train_path.display())));
    }

    let valid = match &cfg.paths.valid {
        Some(p) => {
            let (split, stats) = load_corpus(p, SplitName::Valid)?;
            report.valid_loaded = stats.loaded;
            report.valid_skipped = stats.skipped;
            Some(split)
        }
        None => None,
    };
    let test = match &cfg.paths.test {
        Some(p) => {
            let (split, stats) = load_corpus(p, SplitName::Test)?;
            report.test_loaded = stats.loaded;
            report.test_skipped = stats.skipped;
            Some(split)
        }
        None => None,
    };

    if cfg.corpus.dedup {
        let test = test.as_ref().ok_or_else(|| {
            Error::Config("corpus.dedup requires paths.test to dedup against".into())
        })?;
        let before = train.len();
        train = dedup_against(&train, test);
        report.dedup_removed = Some(before - train.len());
        if train.is_empty() {
            return Err(Error::Corpus("dedup removed every training sample".into()));
        }
    }

    let vocab = train_vocab(&train, cfg.tokenizer.vocab_size)?;
    let table = build_action_table(&train, cfg.corpus.action_words)?;
    report.vocab_size = vocab.len();
    report.n_classes = table.n_classes();

    vocab.save(&dir.join("vocab.json"))?;
    table.save(&dir.join("action_table.json"))?;
    write_split_jsonl(&train, &dir.join("train.jsonl"))?;
    if let Some(v) = &valid {
        write_split_jsonl(v, &dir.join("valid.jsonl"))?;
    }
    if let Some(t) = &test {
        write_split_jsonl(t, &dir.join("test.jsonl"))?;
    }
    let report_json = serde_json::to_string_pretty(&report)?;
    let report_path = dir.join("prepare_report.json");
    std::fs::write(&report_path, report_json)
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    cfg.echo_into(&dir)?;
    Ok(report)
}

/// Load the vocabulary and action table produced by `prepare`.
pub fn load_artifacts(cfg: &RunConfig) -> Result<(Vocabulary, ActionWordTable)> {
    let dir = artifacts_dir(cfg);
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let table = ActionWordTable::load(&dir.join("action_table.json"))?;
    Ok((vocab, table))
}

/// Load a prepared split back from the artifact directory.
pub fn load_prepared_split(cfg: &RunConfig, name: SplitName) -> Result<CorpusSplit> {
    let dir = artifacts_dir(cfg);
    let path = dir.join(format!("{name}.jsonl"));
    let (split, _) = load_corpus(&path, name)?;
    Ok(split)
}

/// Joint multi-task pretraining over the prepared train split. Returns the
/// path of the final checkpoint.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let (vocab, table) = load_artifacts(cfg)?;
    let train = load_prepared_split(cfg, SplitName::Train)?;
    let (pairs, truncated) = assemble_all(&vocab, &train);
    if truncated.code + truncated.summary > 0 {
        eprintln!(
            "note: truncated {} code regions and {} summaries to their caps",
            truncated.code, truncated.summary
        );
    }
    let model_cfg = cfg.model_config(vocab.len(), table.n_classes());
    let pcfg = cfg.pretrain_config()?;
    let dir = cfg.paths.out_dir.join("pretrain");
    let outcome = pretrain_run(&model_cfg, &pcfg, &pairs, &table, vocab.fingerprint(), Some(&dir))?;
    cfg.echo_into(&dir)?;
    let last = outcome.records.last().expect("at least one step");
    eprintln!("pretrain: {} steps, final joint loss {:.4} ({})", pcfg.steps, last.joint, pcfg.tasks.label());
    Ok(dir.join("checkpoint_final.ckpt"))
}

/// Fine-tune the pretrained checkpoint (or a random init) on summarization.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<PathBuf> {
    let (vocab, table) = load_artifacts(cfg)?;
    let train = load_prepared_split(cfg, SplitName::Train)?;
    let (train_pairs, _) = assemble_all(&vocab, &train);
    let valid_pairs = match load_prepared_split(cfg, SplitName::Valid) {
        Ok(split) => Some(assemble_all(&vocab, &split).0),
        Err(_) => None,
    };

    let checkpoint = if cfg.finetune.random_init {
        let model_cfg = cfg.model_config(vocab.len(), table.n_classes());
        Checkpoint {
            params: Parameters::init(&model_cfg),
            config: model_cfg,
            opt: None,
            step: 0,
            label: "random init".into(),
            vocab_fingerprint: vocab.fingerprint(),
        }
    } else {
        let path = cfg.paths.out_dir.join("pretrain").join("checkpoint_final.ckpt");
        Checkpoint::load(&path)?
    };

    let fcfg = cfg.finetune_config();
    let dir = cfg.paths.out_dir.join("finetune");
    let outcome = finetune_run(
        &fcfg,
        checkpoint,
        &train_pairs,
        valid_pairs.as_deref(),
        vocab.fingerprint(),
        Some(&dir),
    )?;
    cfg.echo_into(&dir)?;
    let last = outcome.records.last().expect("at least one step");
    eprintln!("finetune: {} steps, final training loss {:.4}", fcfg.steps, last.train_loss);
    Ok(dir.join("checkpoint_best.ckpt"))
}

/// The checkpoint later stages should run with: the best fine-tuned one,
/// falling back to the final.
pub fn find_model(cfg: &RunConfig) -> Result<Checkpoint> {
    let dir = cfg.paths.out_dir.join("finetune");
    for name in ["checkpoint_best.ckpt", "checkpoint_final.ckpt"] {
        let path = dir.join(name);
        if path.exists() {
            return Checkpoint::load(&path);
        }
    }
    Err(Error::Checkpoint(format!(
        "no fine-tuned checkpoint under {} (run finetune first)",
        dir.display()
    )))
}

/// Generate a summary for one code snippet.
pub fn cmd_summarize(cfg: &RunConfig, code: &str) -> Result<String> {
    let (vocab, _) = load_artifacts(cfg)?;
    let ck = find_model(cfg)?;
    if ck.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::Checkpoint("checkpoint does not match the prepared vocabulary".into()));
    }
    summarize(
        &ck.config,
        &ck.params,
        &vocab,
        code,
        cfg.eval.beam,
        cfg.eval.max_gen_len,
        cfg.finetune.length_normalize,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub scores: ScoreReport,
    /// Action-word head quality on the evaluated split.
    pub awp: Option<ClassificationReport>,
}

fn split_from_name(name: &str) -> Result<SplitName> {
    match name {
        "train" => Ok(SplitName::Train),
        "valid" => Ok(SplitName::Valid),
        "test" => Ok(SplitName::Test),
        other => Err(Error::Config(format!("unknown eval split {other:?}"))),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Evaluate generated summaries. With `hyp_file`/`ref_file` this scores two
/// line-aligned text files; otherwise the fine-tuned model generates
/// hypotheses for the configured split. `baseline_file` adds paired
/// significance tests against another hypothesis file.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    hyp_file: Option<&Path>,
    ref_file: Option<&Path>,
    baseline_file: Option<&Path>,
) -> Result<EvalOutput> {
    let dir = cfg.paths.out_dir.join("eval");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let (hypotheses, references, codes, awp) = match (hyp_file, ref_file) {
        (Some(h), Some(r)) => {
            let hyps = read_lines(h)?;
            let refs = read_lines(r)?;
            (hyps, refs, None, None)
        }
        (None, None) => {
            let (vocab, table) = load_artifacts(cfg)?;
            let split = load_prepared_split(cfg, split_from_name(&cfg.eval.split)?)?;
            let ck = find_model(cfg)?;
            if ck.vocab_fingerprint != vocab.fingerprint() {
                return Err(Error::Checkpoint(
                    "checkpoint does not match the prepared vocabulary".into(),
                ));
            }
            let mut hyps = Vec::with_capacity(split.len());
            for s in &split.samples {
                hyps.push(summarize(
                    &ck.config,
                    &ck.params,
                    &vocab,
                    &s.code,
                    cfg.eval.beam,
                    cfg.eval.max_gen_len,
                    cfg.finetune.length_normalize,
                )?);
            }
            let refs: Vec<String> = split.samples.iter().map(|s| s.summary.clone()).collect();
            let codes: Vec<String> = split.samples.iter().map(|s| s.code.clone()).collect();
            let awp = awp_report(&ck, &vocab, &table, &split)?;
            (hyps, refs, Some(codes), Some(awp))
        }
        _ => {
            return Err(Error::Config(
                "evaluate needs both --hypotheses and --references, or neither".into(),
            ))
        }
    };

    let mut scores = score_corpus(
        &hypotheses,
        &references,
        if cfg.eval.buckets { codes.as_deref() } else { None },
    )?;
    if let Some(b) = baseline_file {
        let baseline_hyps = read_lines(b)?;
        let baseline = score_corpus(&baseline_hyps, &references, None)?;
        attach_significance(&mut scores, &baseline)?;
    }
    let output = EvalOutput { scores, awp };

    let json = serde_json::to_string_pretty(&output)?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let hyp_path = dir.join("hypotheses.txt");
    std::fs::write(&hyp_path, hypotheses.join("\n") + "\n")
        .map_err(|e| Error::io(hyp_path.display().to_string(), e))?;

    let table_text = render_eval_report(&output);
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, &table_text)
        .map_err(|e| Error::io(txt_path.display().to_string(), e))?;
    cfg.echo_into(&dir)?;
    Ok(output)
}

fn awp_report(
    ck: &Checkpoint,
    vocab: &Vocabulary,
    table: &ActionWordTable,
    split: &CorpusSplit,
) -> Result<ClassificationReport> {
    let mut preds = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for s in &split.samples {
        let pair = assemble(vocab, s);
        let enc =
            encode(&ck.config, &ck.params, &pair.code_ids, &VisMask::full(pair.code_ids.len()))?;
        let logits = awp_logits(&ck.config, &ck.params, &enc)?;
        let pred = (0..logits.cols())
            .max_by(|&a, &b| logits.get(0, a).partial_cmp(&logits.get(0, b)).unwrap())
            .unwrap() as u32;
        preds.push(pred);
        labels.push(crate::corpus::label_of(table, &s.summary)?);
    }
    classification_report(&preds, &labels, table.n_classes())
}

fn render_eval_report(out: &EvalOutput) -> String {
    let s = &out.scores;
    let mut text = render_table(&[(
        "model".to_string(),
        s.bleu.mean_pct,
        s.meteor.mean_pct,
        s.rouge_l.mean_pct,
    )]);
    text.push_str(&format!(
        "\ncorpus BLEU: {:.2}   samples: {}   empty hypotheses: {}\n",
        s.corpus_bleu_pct, s.n, s.empty_hypotheses
    ));
    if let Some(awp) = &out.awp {
        text.push_str(&format!(
            "action words: weighted P {:.2} / R {:.2} / F {:.2}\n",
            100.0 * awp.weighted_precision,
            100.0 * awp.weighted_recall,
            100.0 * awp.weighted_f1
        ));
    }
    if let Some(sig) = &s.significance {
        for e in sig {
            text.push_str(&format!("{}: p = {:.6} {}\n", e.metric, e.p, e.stars));
        }
    }
    if let Some(buckets) = &s.buckets {
        text.push_str("\nby code length (lines):\n");
        for (metric, bs) in &buckets.by_code_lines {
            text.push_str(&format!("  {metric}:"));
            for b in bs {
                text.push_str(&format!(" [{}] {:.2}", b.label, 100.0 * b.mean));
            }
            text.push('\n');
        }
        text.push_str("by summary length (words):\n");
        for (metric, bs) in &buckets.by_summary_words {
            text.push_str(&format!("  {metric}:"));
            for b in bs {
                text.push_str(&format!(" [{}] {:.2}", b.label, 100.0 * b.mean));
            }
            text.push('\n');
        }
    }
    text
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// (configuration label, error message) for runs that failed.
    pub failures: Vec<(String, String)>,
}

/// Pretrain + finetune + evaluate for the full task set and the three
/// leave-one-out sets, then assemble the comparison table. A failing
/// configuration is recorded and the remaining rows still complete.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutcome> {
    let (vocab, table) = load_artifacts(cfg)?;
    let train = load_prepared_split(cfg, SplitName::Train)?;
    let (train_pairs, _) = assemble_all(&vocab, &train);
    let eval_split = {
        let requested = split_from_name(&cfg.eval.split)?;
        match load_prepared_split(cfg, requested) {
            Ok(s) => s,
            // Tiny-corpus runs often prepare only a train file.
            Err(_) => train.clone(),
        }
    };

    let configurations: [(&str, TaskSet); 4] = [
        ("all", TaskSet::all()),
        ("wo_awp", TaskSet { awp: false, ..TaskSet::all() }),
        ("wo_mlm", TaskSet { mlm: false, ..TaskSet::all() }),
        ("wo_ulm", TaskSet { ulm: false, ..TaskSet::all() }),
    ];

    let root = cfg.paths.out_dir.join("ablation");
    std::fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut outcome = AblationOutcome::default();
    for (slug, tasks) in configurations {
        let label = tasks.label();
        let dir = root.join(slug);
        let run = || -> Result<AblationRow> {
            let model_cfg = cfg.model_config(vocab.len(), table.n_classes());
            let mut pcfg = cfg.pretrain_config()?;
            pcfg.tasks = tasks;
            let pre = pretrain_run(
                &model_cfg,
                &pcfg,
                &train_pairs,
                &table,
                vocab.fingerprint(),
                Some(&dir.join("pretrain")),
            )?;
            let fcfg = cfg.finetune_config();
            let fine = finetune_run(
                &fcfg,
                pre.checkpoint,
                &train_pairs,
                None,
                vocab.fingerprint(),
                Some(&dir.join("finetune")),
            )?;
            let ck = fine.best_checkpoint;
            let mut hyps = Vec::with_capacity(eval_split.len());
            for s in &eval_split.samples {
                hyps.push(summarize(
                    &ck.config,
                    &ck.params,
                    &vocab,
                    &s.code,
                    cfg.eval.beam,
                    cfg.eval.max_gen_len,
                    cfg.finetune.length_normalize,
                )?);
            }
            let refs: Vec<String> =
                eval_split.samples.iter().map(|s| s.summary.clone()).collect();
            let scores = score_corpus(&hyps, &refs, None)?;
            Ok(AblationRow {
                label: label.clone(),
                bleu: scores.bleu.mean_pct,
                meteor: scores.meteor.mean_pct,
                rouge_l: scores.rouge_l.mean_pct,
            })
        };
        match run() {
            Ok(row) => {
                let row_json = serde_json::to_string_pretty(&row)?;
                let row_path = dir.join("row.json");
                std::fs::write(&row_path, row_json)
                    .map_err(|e| Error::io(row_path.display().to_string(), e))?;
                outcome.rows.push(row);
            }
            Err(e) => {
                eprintln!("ablation {label} failed: {e}");
                outcome.failures.push((label, e.to_string()));
            }
        }
    }

    let table_rows: Vec<(String, f64, f64, f64)> = outcome
        .rows
        .iter()
        .map(|r| (r.label.clone(), r.bleu, r.meteor, r.rouge_l))
        .collect();
    let text = render_table(&table_rows);
    let table_path = root.join("ablation_table.txt");
    std::fs::write(&table_path, &text)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    let json_path = root.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&outcome)?)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    cfg.echo_into(&root)?;
    Ok(outcome)
}

/// Teacher-forced cross-attention dump (deployment debugging aid).
pub fn cmd_export_attention(cfg: &RunConfig, code: &str, summary: &str) -> Result<String> {
    let (vocab, _) = load_artifacts(cfg)?;
    let ck = find_model(cfg)?;
    let dump = crate::summarizer::export_attention(&ck.config, &ck.params, &vocab, code, summary)?;
    Ok(serde_json::to_string_pretty(&dump)?)
}
