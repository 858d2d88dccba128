//! Evaluation machinery: text-overlap metrics, the weighted classification
//! report, significance testing, and length-bucketed aggregation.
//!
//! Metric tokenization is lowercase + whitespace split throughout, so scores
//! are reproducible regardless of upstream tokenizers.

mod bleu;
mod meteor;
mod report;
mod rouge;
mod wilcoxon;

pub use bleu::{corpus_bleu, sentence_bleu};
pub use meteor::meteor;
pub use report::{bucket_by_length, classification_report, Bucket, ClassificationReport};
pub use rouge::{rouge_l, rouge_l_with_beta};
pub use wilcoxon::{
    stars_for_p, wilcoxon_signed_rank, wilcoxon_with_method, WilcoxonMethod, WilcoxonResult,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_sample: Vec<f64>,
    /// Arithmetic mean of the per-sample scores, in percent.
    pub mean_pct: f64,
}

impl MetricSummary {
    fn new(per_sample: Vec<f64>) -> MetricSummary {
        let mean = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        MetricSummary { per_sample, mean_pct: 100.0 * mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub by_code_lines: Vec<(String, Vec<Bucket>)>,
    pub by_summary_words: Vec<(String, Vec<Bucket>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub metric: String,
    pub p: f64,
    pub stars: String,
}

/// Corpus-level evaluation results: per-sample and mean scores for each
/// metric, corpus BLEU, and optional bucket/significance breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub bleu: MetricSummary,
    pub meteor: MetricSummary,
    pub rouge_l: MetricSummary,
    pub corpus_bleu_pct: f64,
    pub empty_hypotheses: usize,
    pub buckets: Option<BucketReport>,
    pub significance: Option<Vec<SignificanceEntry>>,
}

/// Score hypotheses against single references. When `code_texts` is given,
/// per-sample scores are also bucketed by code length in lines and summary
/// length in words.
pub fn score_corpus(
    hypotheses: &[String],
    references: &[String],
    code_texts: Option<&[String]>,
) -> Result<ScoreReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Metrics(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Metrics("nothing to score".into()));
    }
    let hyp_tokens: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if let Some(bad) = ref_tokens.iter().position(|r| r.is_empty()) {
        return Err(Error::Metrics(format!("reference {bad} is empty")));
    }
    let empty_hypotheses = hyp_tokens.iter().filter(|h| h.is_empty()).count();

    let mut bleu_s = Vec::with_capacity(hyp_tokens.len());
    let mut meteor_s = Vec::with_capacity(hyp_tokens.len());
    let mut rouge_s = Vec::with_capacity(hyp_tokens.len());
    for (h, r) in hyp_tokens.iter().zip(&ref_tokens) {
        bleu_s.push(sentence_bleu(h, r));
        meteor_s.push(meteor(h, r));
        rouge_s.push(rouge_l(h, r));
    }
    let corpus_bleu_pct = 100.0 * corpus_bleu(&hyp_tokens, &ref_tokens);

    let buckets = code_texts.map(|codes| {
        let code_lines: Vec<usize> = codes.iter().map(|c| c.lines().count()).collect();
        let ref_words: Vec<usize> = ref_tokens.iter().map(|r| r.len()).collect();
        let table = |scores: &[f64], lengths: &[usize]| bucket_by_length(scores, lengths, 5, 50);
        BucketReport {
            by_code_lines: vec![
                ("BLEU".into(), table(&bleu_s, &code_lines)),
                ("METEOR".into(), table(&meteor_s, &code_lines)),
                ("ROUGE-L".into(), table(&rouge_s, &code_lines)),
            ],
            by_summary_words: vec![
                ("BLEU".into(), table(&bleu_s, &ref_words)),
                ("METEOR".into(), table(&meteor_s, &ref_words)),
                ("ROUGE-L".into(), table(&rouge_s, &ref_words)),
            ],
        }
    });

    Ok(ScoreReport {
        n: hyp_tokens.len(),
        bleu: MetricSummary::new(bleu_s),
        meteor: MetricSummary::new(meteor_s),
        rouge_l: MetricSummary::new(rouge_s),
        corpus_bleu_pct,
        empty_hypotheses,
        buckets,
        significance: None,
    })
}

/// Paired significance of this report's per-sample scores against a
/// baseline's, metric by metric.
pub fn attach_significance(report: &mut ScoreReport, baseline: &ScoreReport) -> Result<()> {
    let mut out = Vec::new();
    for (name, a, b) in [
        ("BLEU", &report.bleu.per_sample, &baseline.bleu.per_sample),
        ("METEOR", &report.meteor.per_sample, &baseline.meteor.per_sample),
        ("ROUGE-L", &report.rouge_l.per_sample, &baseline.rouge_l.per_sample),
    ] {
        let w = wilcoxon_signed_rank(a, b, 0.05)?;
        out.push(SignificanceEntry { metric: name.into(), p: w.p, stars: w.stars.to_string() });
    }
    report.significance = Some(out);
    Ok(())
}

/// Aligned three-metric table, one row per technique.
pub fn render_table(rows: &[(String, f64, f64, f64)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _, _, _)| n.len())
        .chain(std::iter::once("Technique".len()))
        .max()
        .unwrap_or(9);
    let mut s = String::new();
    s.push_str(&format!(
        "{:<name_w$}  {:>7}  {:>7}  {:>7}\n",
        "Technique", "BLEU", "METEOR", "ROUGE-L"
    ));
    for (name, bleu, meteor, rouge) in rows {
        s.push_str(&format!("{name:<name_w$}  {bleu:>7.2}  {meteor:>7.2}  {rouge:>7.2}\n"));
    }
    s
}
