//! Threshold-based evaluation and threshold calibration.
//!
//! Everywhere in the crate a row is predicted (or filtered) as forget when
//! `score >= threshold`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ProbeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// `2TP / (2TP + FP + FN)`, i.e. the harmonic mean of precision and recall,
/// and 0 when there are no true positives.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ProbeError::NonFiniteScore(i));
    }
    Ok(())
}

fn check_pair(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(ProbeError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            what: "labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    check_scores(scores)
}

pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    check_pair(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(EvalReport {
        threshold,
        precision,
        recall,
        f1: f1_from_counts(tp, fp, fn_),
        auroc: auroc(scores, labels),
        tp,
        fp,
        tn,
        fn_,
    })
}

fn desc_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, tied
/// scores receiving their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Threshold {
    pub threshold: f64,
    pub f1: f64,
}

/// Threshold maximising F1 over every distinct score used as a cut.
/// Among equal F1 values the largest threshold wins.
pub fn calibrate_f1(scores: &[f64], labels: &[bool]) -> Result<F1Threshold> {
    check_pair(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l).count() as u64;
    if total_pos == 0 {
        return Err(ProbeError::NoPositives);
    }
    let order = desc_order(scores);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = F1Threshold {
        threshold: scores[order[0]],
        f1: -1.0,
    };
    let mut i = 0;
    while i < order.len() {
        let cut = scores[order[i]];
        while i < order.len() && scores[order[i]] == cut {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, total_pos - tp);
        if f1 > best.f1 {
            best = F1Threshold { threshold: cut, f1 };
        }
    }
    Ok(best)
}

/// `ceil(p * n)`, treating products within rounding error of an integer as
/// that integer.
pub fn target_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionThreshold {
    pub threshold: f64,
    /// Rows with `score >= threshold`.
    pub filtered: usize,
    /// `ceil(p * n)`.
    pub target: usize,
    /// Ties at the cut prevented reaching the target exactly.
    pub tie_limited: bool,
}

/// Smallest score threshold that filters at most `ceil(p * n)` rows.
///
/// When even the top score is tied across more than the target count the
/// threshold is placed just above the maximum and nothing is filtered.
pub fn calibrate_fraction(scores: &[f64], p: f64) -> Result<FractionThreshold> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbeError::Domain { name: "fraction", value: p });
    }
    check_scores(scores)?;
    let n = scores.len();
    let target = target_count(p, n);
    if n == 0 {
        return Ok(FractionThreshold {
            threshold: 1.0,
            filtered: 0,
            target,
            tie_limited: false,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));

    let mut best: Option<(f64, usize)> = None;
    let mut i = 0;
    while i < n {
        let cut = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == cut {
            j += 1;
        }
        if j > target {
            break;
        }
        best = Some((cut, j));
        i = j;
    }
    let result = match best {
        Some((threshold, filtered)) => FractionThreshold {
            threshold,
            filtered,
            target,
            tie_limited: filtered != target,
        },
        None => FractionThreshold {
            threshold: sorted[0].next_up(),
            filtered: 0,
            target,
            tie_limited: true,
        },
    };
    if result.tie_limited && target > 0 {
        log::warn!(
            "score ties: filtering {} rows instead of the requested {}",
            result.filtered,
            result.target
        );
    }
    Ok(result)
}

/// How token scores collapse to one document score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum DocAggregate {
    Max,
    Mean,
    /// Share of tokens with `score >= threshold`.
    FractionAbove { threshold: f64 },
}

pub fn aggregate_doc_score(scores: &[f64], method: DocAggregate) -> Result<f64> {
    if scores.is_empty() {
        return Err(ProbeError::Empty);
    }
    check_scores(scores)?;
    Ok(match method {
        DocAggregate::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        DocAggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        DocAggregate::FractionAbove { threshold } => {
            scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
        }
    })
}
