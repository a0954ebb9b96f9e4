//! Weak-to-strong relabeling: a probe trained on a small ground-truth set
//! labels a second set, and a probe on richer features learns from those
//! pseudo-labels.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{calibrate_f1, evaluate, EvalReport};
use super::{score, train_probe_with, Calibration, CalibrationMode, FeatureMatrix, Lbfgs, Probe, ProbeError, Result};
use crate::par::Executor;
use crate::rng::{derive_seed, substream};

pub struct WeakToStrongInput<'a> {
    /// Weak features with ground-truth labels.
    pub weak_train: &'a FeatureMatrix,
    pub weak_train_labels: &'a [bool],
    /// The relabel set, seen through both feature spaces (same rows).
    pub relabel_weak: &'a FeatureMatrix,
    pub relabel_strong: &'a FeatureMatrix,
    /// Held-out evaluation rows, seen through both feature spaces.
    pub eval_weak: &'a FeatureMatrix,
    pub eval_strong: &'a FeatureMatrix,
    pub eval_labels: &'a [bool],
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakToStrong {
    pub weak: Probe,
    pub strong: Probe,
    pub weak_eval: EvalReport,
    pub strong_eval: EvalReport,
    /// Relabel rows the weak probe marked as forget.
    pub pseudo_positive: usize,
    pub relabel_rows: usize,
}

fn same_rows(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(ProbeError::LengthMismatch {
            what: "rows in the strong view",
            expected: a.rows(),
            found: b.rows(),
        });
    }
    if let (Some(ka), Some(kb)) = (a.keys(), b.keys()) {
        if ka != kb {
            return Err(ProbeError::Format("weak and strong views list different rows".into()));
        }
    }
    Ok(())
}

pub fn weak_to_strong(input: &WeakToStrongInput<'_>, exec: &Executor) -> Result<WeakToStrong> {
    if input.relabel_weak.rows() == 0 {
        return Err(ProbeError::Empty);
    }
    same_rows(input.relabel_weak, input.relabel_strong)?;
    same_rows(input.eval_weak, input.eval_strong)?;
    if let (Some(train), Some(relabel)) = (input.weak_train.keys(), input.relabel_weak.keys()) {
        let train: HashSet<_> = train.iter().collect();
        if let Some(k) = relabel.iter().find(|k| train.contains(k)) {
            return Err(ProbeError::Overlap(k.encode()));
        }
    }
    let opt = Lbfgs::default();

    let weak = train_probe_with(input.weak_train, input.weak_train_labels, input.lambda, exec, &opt)?.probe;
    let train_scores = score(&weak, input.weak_train, exec)?;
    let t = calibrate_f1(&train_scores, input.weak_train_labels)?;
    let weak = weak.calibrated(
        t.threshold,
        Calibration {
            mode: CalibrationMode::F1max,
            p: None,
            set: "weak-train".into(),
        },
    );

    let relabel_scores = score(&weak, input.relabel_weak, exec)?;
    let pseudo: Vec<bool> = relabel_scores.iter().map(|&s| s >= weak.threshold).collect();
    let pseudo_positive = pseudo.iter().filter(|&&p| p).count();
    log::info!("weak probe marked {pseudo_positive} of {} relabel rows", pseudo.len());

    let strong = train_probe_with(input.relabel_strong, &pseudo, input.lambda, exec, &opt)?.probe;
    let strong_train_scores = score(&strong, input.relabel_strong, exec)?;
    let t = calibrate_f1(&strong_train_scores, &pseudo)?;
    let strong = strong.calibrated(
        t.threshold,
        Calibration {
            mode: CalibrationMode::F1max,
            p: None,
            set: "relabel".into(),
        },
    );

    let weak_eval = evaluate(&score(&weak, input.eval_weak, exec)?, input.eval_labels, weak.threshold)?;
    let strong_eval = evaluate(&score(&strong, input.eval_strong, exec)?, input.eval_labels, strong.threshold)?;
    Ok(WeakToStrong {
        weak,
        strong,
        weak_eval,
        strong_eval,
        pseudo_positive,
        relabel_rows: pseudo.len(),
    })
}

/// Deterministically splits `0..n` into two index sets, the first holding
/// `round(n * first_share)` rows. Both halves are sorted.
pub fn partition_rows(n: usize, first_share: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&first_share) {
        return Err(ProbeError::Domain {
            name: "share",
            value: first_share,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(derive_seed(seed, "partition"), 0));
    let k = (n as f64 * first_share).round() as usize;
    let mut a = idx[..k].to_vec();
    let mut b = idx[k..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}
