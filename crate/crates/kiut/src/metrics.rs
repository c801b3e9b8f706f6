//! Corpus-level text-generation metrics (BLEU-1..4, ROUGE-L) and
//! micro-averaged clinical-efficacy precision/recall/F1 over symptom labels.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat metric bundle; every field lies in [0, 1]. `ce_zero_division` is the
/// warning flag (1.0 when any clinical-efficacy denominator was zero and the
/// affected metric was reported as 0).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub ce_zero_division: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("ce_precision", self.ce_precision),
            ("ce_recall", self.ce_recall),
            ("ce_f1", self.ce_f1),
            ("ce_zero_division", self.ce_zero_division),
        ]
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-1..max_n: modified n-gram precision with clipping,
/// geometric mean over orders with uniform weights, and brevity penalty
/// exp(1 − r/c) when c ≤ r.
pub fn bleu<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArg("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArg(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 || max_n > 4 {
        return Err(Error::InvalidArg(format!("max_n {max_n} outside 1..=4")));
    }
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references.iter()) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in cand_counts {
                let allowed = ref_counts.get(&gram).copied().unwrap_or(0);
                clipped[n - 1] += count.min(allowed);
                totals[n - 1] += count;
            }
        }
    }
    let brevity = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if totals[i] == 0 {
                0.0
            } else {
                clipped[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let scores = (1..=max_n)
        .map(|k| {
            if precisions[..k].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let log_mean =
                    precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
                brevity * log_mean.exp()
            }
        })
        .collect();
    Ok(scores)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score (β = 1) of one candidate/reference pair:
/// P = LCS/|c|, R = LCS/|r|, F = 2PR/(P+R), 0 when the LCS is empty.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArg("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean ROUGE-L over a corpus of pairs.
pub fn rouge_l_corpus<T: Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArg("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArg(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references.iter()) {
        total += rouge_l(c, r)?;
    }
    Ok(total / candidates.len() as f64)
}

/// Micro-averaged precision/recall/F1 over all (sample, symptom) cells.
/// A zero denominator yields 0 for that metric and sets the warning flag.
pub fn clinical_efficacy(
    pred_labels: &[Vec<bool>],
    true_labels: &[Vec<bool>],
) -> Result<(f64, f64, f64, bool)> {
    if pred_labels.len() != true_labels.len() {
        return Err(Error::InvalidArg(format!(
            "{} predictions vs {} truths",
            pred_labels.len(),
            true_labels.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, truth) in pred_labels.iter().zip(true_labels.iter()) {
        if pred.len() != truth.len() {
            return Err(Error::InvalidArg(
                "label vectors have differing lengths".into(),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let mut warn = false;
    let mut ratio = |num: usize, denom: usize| -> f64 {
        if denom == 0 {
            warn = true;
            0.0
        } else {
            num as f64 / denom as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        warn = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1, warn))
}

/// Assemble the full metric bundle from decoded/reference token sequences
/// and predicted/true label vectors.
pub fn metrics_report<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    pred_labels: &[Vec<bool>],
    true_labels: &[Vec<bool>],
) -> Result<MetricsReport> {
    let bleu_scores = bleu(candidates, references, 4)?;
    let rouge = rouge_l_corpus(candidates, references)?;
    let (p, r, f1, warn) = clinical_efficacy(pred_labels, true_labels)?;
    Ok(MetricsReport {
        bleu1: bleu_scores[0],
        bleu2: bleu_scores[1],
        bleu3: bleu_scores[2],
        bleu4: bleu_scores[3],
        rouge_l: rouge,
        ce_precision: p,
        ce_recall: r,
        ce_f1: f1,
        ce_zero_division: if warn { 1.0 } else { 0.0 },
    })
}
