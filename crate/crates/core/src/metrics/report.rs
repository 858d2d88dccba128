//! Support-weighted classification report and length-bucketed score
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Per class: (precision, recall, f1, support).
    pub per_class: Vec<(f64, f64, f64, usize)>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

/// Per-class precision/recall/F1 with zero-division mapped to 0, combined
/// into support-weighted averages.
pub fn classification_report(
    predictions: &[u32],
    labels: &[u32],
    n_classes: usize,
) -> Result<ClassificationReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metrics("empty classification report".into()));
    }
    for &v in predictions.iter().chain(labels) {
        if v as usize >= n_classes {
            return Err(Error::Metrics(format!("label {v} out of range for {n_classes} classes")));
        }
    }

    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        pred_count[p as usize] += 1;
        support[l as usize] += 1;
        if p == l {
            tp[p as usize] += 1;
            correct += 1;
        }
    }

    let total = labels.len() as f64;
    let mut per_class = Vec::with_capacity(n_classes);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let precision = if pred_count[c] > 0 { tp[c] as f64 / pred_count[c] as f64 } else { 0.0 };
        let recall = if support[c] > 0 { tp[c] as f64 / support[c] as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push((precision, recall, f1, support[c]));
        let w = support[c] as f64 / total;
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
    }

    Ok(ClassificationReport {
        per_class,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        accuracy: correct as f64 / total,
    })
}

/// One length interval with its mean score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    pub mean: f64,
}

/// Mean score per length interval [0-w], [w+1-2w], ... up to `max_edge`;
/// longer samples fall into a single overflow bucket. Empty intervals are
/// absent from the output.
pub fn bucket_by_length(
    scores: &[f64],
    lengths: &[usize],
    width: usize,
    max_edge: usize,
) -> Vec<Bucket> {
    assert_eq!(scores.len(), lengths.len(), "one length per score");
    assert!(width > 0);
    let overflow = usize::MAX;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&s, &l) in scores.iter().zip(lengths) {
        let key = if l > max_edge {
            overflow
        } else if l <= width {
            0
        } else {
            (l - 1) / width
        };
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, n))| {
            let (label, lo, hi) = if k == overflow {
                (format!("{}+", max_edge + 1), max_edge + 1, usize::MAX)
            } else if k == 0 {
                (format!("0-{width}"), 0, width)
            } else {
                let lo = k * width + 1;
                let hi = (k + 1) * width;
                (format!("{lo}-{hi}"), lo, hi)
            };
            Bucket { label, lo, hi, n, mean: sum / n as f64 }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_correct_is_all_ones() {
        let labels = [0u32, 1, 2, 1, 0];
        let r = classification_report(&labels, &labels, 3).unwrap();
        assert_eq!(r.weighted_precision, 1.0);
        assert_eq!(r.weighted_recall, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn single_class_all_wrong_is_zero() {
        let labels = [1u32, 1, 1];
        let preds = [0u32, 0, 2];
        let r = classification_report(&preds, &labels, 3).unwrap();
        assert_eq!(r.weighted_precision, 0.0);
        assert_eq!(r.weighted_recall, 0.0);
        assert_eq!(r.weighted_f1, 0.0);
    }

    #[test]
    fn six_sample_fixture_matches_hand_confusion_matrix() {
        // labels:      0 0 1 1 2 2
        // predictions: 0 1 1 1 2 0
        let labels = [0u32, 0, 1, 1, 2, 2];
        let preds = [0u32, 1, 1, 1, 2, 0];
        let r = classification_report(&preds, &labels, 3).unwrap();
        // Confusion: tp0=1 (pred0: 2 -> p0=1/2; support0=2 -> r0=1/2; f0=1/2)
        //            tp1=2 (pred1: 3 -> p1=2/3; support1=2 -> r1=1; f1=4/5)
        //            tp2=1 (pred2: 1 -> p2=1; support2=2 -> r2=1/2; f2=2/3)
        let expect_p = (2.0 / 6.0) * 0.5 + (2.0 / 6.0) * (2.0 / 3.0) + (2.0 / 6.0) * 1.0;
        let expect_r = (2.0 / 6.0) * 0.5 + (2.0 / 6.0) * 1.0 + (2.0 / 6.0) * 0.5;
        let expect_f = (2.0 / 6.0) * 0.5 + (2.0 / 6.0) * 0.8 + (2.0 / 6.0) * (2.0 / 3.0);
        assert!((r.weighted_precision - expect_p).abs() < 1e-12);
        assert!((r.weighted_recall - expect_r).abs() < 1e-12);
        assert!((r.weighted_f1 - expect_f).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_equals_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..60);
            let c = rng.gen_range(2..6);
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let preds: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let r = classification_report(&preds, &labels, c as usize).unwrap();
            assert!((r.weighted_recall - r.accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label_errors() {
        assert!(classification_report(&[0, 3], &[0, 1], 3).is_err());
    }

    #[test]
    fn single_bucket_mean_is_global_mean() {
        let scores = [0.2, 0.4, 0.9];
        let lengths = [1usize, 3, 5];
        let b = bucket_by_length(&scores, &lengths, 5, 50);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].label, "0-5");
        assert_eq!(b[0].n, 3);
        assert!((b[0].mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lengths_three_and_seven_split_buckets() {
        let b = bucket_by_length(&[0.25, 0.75], &[3, 7], 5, 50);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].label, "0-5");
        assert_eq!(b[0].mean, 0.25);
        assert_eq!(b[1].label, "6-10");
        assert_eq!(b[1].mean, 0.75);
    }

    #[test]
    fn overflow_bucket_collects_long_samples() {
        let b = bucket_by_length(&[0.1, 0.2, 0.3], &[50, 51, 400], 5, 50);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].label, "46-50");
        assert_eq!(b[1].label, "51+");
        assert_eq!(b[1].n, 2);
    }

    #[test]
    fn bucket_means_match_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..60)).collect();
        let got = bucket_by_length(&scores, &lengths, 5, 50);

        // Naive group-by oracle.
        for bucket in &got {
            let (mut sum, mut cnt) = (0.0, 0usize);
            for (&s, &l) in scores.iter().zip(&lengths) {
                let inside = if bucket.hi == usize::MAX {
                    l >= bucket.lo
                } else {
                    l >= bucket.lo && l <= bucket.hi
                };
                if inside {
                    sum += s;
                    cnt += 1;
                }
            }
            assert_eq!(bucket.n, cnt, "bucket {}", bucket.label);
            assert!((bucket.mean - sum / cnt as f64).abs() < 1e-12);
        }
        let total: usize = got.iter().map(|b| b.n).sum();
        assert_eq!(total, n);
    }
}
