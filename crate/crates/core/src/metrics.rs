//! AUC, and accuracy / F1 at the accuracy-optimal threshold.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    /// `±inf` when the best rule is "everything positive/negative".
    #[serde(with = "extended_f64")]
    pub best_threshold: f64,
    pub accuracy_at_best: f64,
    pub f1_at_best: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Infinite and NaN values are written as the strings `"inf"`, `"-inf"`
/// and `"nan"`, which plain JSON numbers cannot represent.
mod extended_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad number {other:?}"))),
            },
        }
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid(format!("binary label expected, got {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    Ok((n_pos, n_neg))
}

/// Rank-statistic AUC with ties counted as one half, in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie blocks in ascending score order. Counts stay integral
    // (doubled to absorb the one-half) so the result is exact.
    let mut doubled_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u128, 0u128);
        for &k in &order[i..j] {
            if labels[k] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        doubled_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(doubled_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Direct enumeration of every (positive, negative) pair.
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut doubled: u128 = 0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, l)| **l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| **l == 0) {
            if sp > sn {
                doubled += 2;
            } else if sp == sn {
                doubled += 1;
            }
        }
    }
    Ok(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scans `-inf`, every midpoint between consecutive distinct scores, and
/// `+inf`, predicting positive when `score >= threshold`. Keeps the
/// threshold with the best accuracy, then the best F1, then the lowest
/// threshold.
pub fn best_threshold_metrics(scores: &[f64], labels: &[u8]) -> Result<EvalResult> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let auc = auc(scores, labels)?;

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);

    let n = scores.len() as f64;
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (s, l) in scores.iter().zip(labels) {
            match (*s >= t, *l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let tn = n_neg - fp;
        let acc = (tp + tn) as f64 / n;
        let f = f1(tp, fp, fn_);
        // Candidates ascend, so strict improvement keeps the lowest threshold.
        let better = match best {
            None => true,
            Some((ba, bf, _)) => acc > ba || (acc == ba && f > bf),
        };
        if better {
            best = Some((acc, f, t));
        }
    }
    let (accuracy_at_best, f1_at_best, best_threshold) = best.expect("at least two candidates");
    Ok(EvalResult {
        auc,
        best_threshold,
        accuracy_at_best,
        f1_at_best,
        n_pos,
        n_neg,
    })
}

/// Evaluation of class-probability rows. Binary problems score class 1 and
/// use [`best_threshold_metrics`]. With more classes the AUC is the macro
/// one-vs-rest mean, accuracy is arg-max accuracy and F1 is macro F1; the
/// threshold is NaN and `n_pos` counts samples of class 1.
pub fn evaluate_probabilities(probs: &[Vec<f64>], labels: &[usize]) -> Result<EvalResult> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs.first().map_or(0, Vec::len);
    if c == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let binary: Vec<u8> = labels.iter().map(|&l| u8::from(l == 1)).collect();
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("label out of range for 2 classes"));
        }
        return best_threshold_metrics(&scores, &binary);
    }
    if c < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mut aucs = Vec::new();
    let mut f1s = Vec::new();
    for k in 0..c {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let binary: Vec<u8> = labels.iter().map(|&l| u8::from(l == k)).collect();
        match auc(&scores, &binary) {
            Ok(a) => aucs.push(a),
            Err(Error::AucUndefined) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(Error::AucUndefined);
    }
    let predicted: Vec<usize> = probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();
    for k in 0..c {
        let tp = predicted
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == k && **l == k)
            .count();
        let fp = predicted
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == k && **l != k)
            .count();
        let fn_ = predicted
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != k && **l == k)
            .count();
        f1s.push(f1(tp, fp, fn_));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(EvalResult {
        auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        best_threshold: f64::NAN,
        accuracy_at_best: correct as f64 / labels.len() as f64,
        f1_at_best: f1s.iter().sum::<f64>() / c as f64,
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}
