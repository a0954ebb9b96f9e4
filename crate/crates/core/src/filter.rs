//! Document dropping, token loss masking and token removal.
//!
//! A unit (document or token) is filtered when its score is `>= threshold`.

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSlot, Span, TokenizedDocument};
use crate::par::Executor;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("document {doc_id:?} has no token scores")]
    MissingScores { doc_id: String },
    #[error("{scores} document scores for {docs} documents")]
    DocScoreCount { scores: usize, docs: usize },
    #[error("document {doc_id:?}: score {score} is not in [0, 1]")]
    BadScore { doc_id: String, score: f64 },
    #[error("hidden token id {hidden} already occurs in document {doc_id:?} at position {position}")]
    HiddenCollision {
        hidden: u32,
        doc_id: String,
        position: usize,
    },
    #[error("threshold {0} is not a number")]
    Threshold(f64),
    #[error("filtered output does not match the source corpus: {0}")]
    Mismatch(String),
    #[error("ground truth does not match the source corpus: {0}")]
    GroundTruth(String),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Document,
    LossMask,
    Removal,
}

/// One document after token-level filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredDoc {
    pub doc_id: String,
    /// Token ids after substitution.
    pub tokens: Vec<u32>,
    /// `true` where the token contributes to the training loss.
    pub loss_mask: Vec<bool>,
    pub spans: Option<Vec<Span>>,
    pub masked: usize,
    pub substituted: usize,
    pub fully_masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredShard {
    pub docs: Vec<FilteredDoc>,
    /// Training step from which the trainer should honour the masks.
    pub onset_step: Option<u64>,
}

impl FilteredShard {
    /// Shard documents with the label bitmap holding the loss mask.
    pub fn to_tokenized(&self) -> Vec<TokenizedDocument> {
        self.docs
            .iter()
            .map(|d| {
                let mut doc = TokenizedDocument::new(d.doc_id.clone(), d.tokens.clone()).with_labels(d.loss_mask.clone());
                doc.label_slot = LabelSlot::LossMask;
                doc.spans = d.spans.clone();
                doc
            })
            .collect()
    }

    /// Inverse of [`FilteredShard::to_tokenized`]; documents without a loss
    /// mask are rejected.
    pub fn from_tokenized(docs: &[TokenizedDocument], hidden: Option<u32>) -> Result<Self> {
        let docs = docs
            .iter()
            .map(|d| {
                let mask = match (d.label_slot, &d.labels) {
                    (LabelSlot::LossMask, Some(m)) => m.clone(),
                    _ => return Err(FilterError::Mismatch(format!("document {:?} carries no loss mask", d.doc_id))),
                };
                let masked = mask.iter().filter(|&&m| !m).count();
                let substituted = hidden.map_or(0, |h| d.tokens.iter().filter(|&&t| t == h).count());
                Ok(FilteredDoc {
                    doc_id: d.doc_id.clone(),
                    tokens: d.tokens.clone(),
                    fully_masked: !mask.is_empty() && masked == mask.len(),
                    loss_mask: mask,
                    spans: d.spans.clone(),
                    masked,
                    substituted,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FilteredShard { docs, onset_step: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutput {
    Documents {
        retained: Vec<TokenizedDocument>,
        /// Indices of dropped documents in the source corpus.
        dropped: Vec<usize>,
    },
    Tokens {
        mode: FilterMode,
        shard: FilteredShard,
    },
}

impl FilterOutput {
    pub fn mode(&self) -> FilterMode {
        match self {
            FilterOutput::Documents { .. } => FilterMode::Document,
            FilterOutput::Tokens { mode, .. } => *mode,
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_nan() {
        Err(FilterError::Threshold(t))
    } else {
        Ok(())
    }
}

/// Drops every document whose score is `>= threshold`. Survivors are
/// returned unchanged, in source order.
pub fn filter_documents(docs: &[TokenizedDocument], doc_scores: &[f64], threshold: f64) -> Result<FilterOutput> {
    check_threshold(threshold)?;
    if doc_scores.len() != docs.len() {
        return Err(FilterError::DocScoreCount {
            scores: doc_scores.len(),
            docs: docs.len(),
        });
    }
    if let Some(i) = doc_scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(FilterError::BadScore {
            doc_id: docs[i].doc_id.clone(),
            score: doc_scores[i],
        });
    }
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for (i, (doc, &s)) in docs.iter().zip(doc_scores).enumerate() {
        if s >= threshold {
            dropped.push(i);
        } else {
            retained.push(doc.clone());
        }
    }
    Ok(FilterOutput::Documents { retained, dropped })
}

fn token_mask(doc: &TokenizedDocument, threshold: f64) -> Result<Vec<bool>> {
    let scores = doc.scores.as_ref().ok_or_else(|| FilterError::MissingScores {
        doc_id: doc.doc_id.clone(),
    })?;
    if scores.len() != doc.tokens.len() {
        return Err(FilterError::Mismatch(format!(
            "document {:?} has {} scores for {} tokens",
            doc.doc_id,
            scores.len(),
            doc.tokens.len()
        )));
    }
    Ok(scores.iter().map(|&s| f64::from(s) < threshold).collect())
}

fn filtered_doc(doc: &TokenizedDocument, tokens: Vec<u32>, loss_mask: Vec<bool>, substituted: usize) -> FilteredDoc {
    let masked = loss_mask.iter().filter(|&&m| !m).count();
    FilteredDoc {
        doc_id: doc.doc_id.clone(),
        tokens,
        fully_masked: !loss_mask.is_empty() && masked == loss_mask.len(),
        loss_mask,
        spans: doc.spans.clone(),
        masked,
        substituted,
    }
}

/// Zeroes the loss mask where the token score is `>= threshold`; ids stay.
pub fn mask_tokens(docs: &[TokenizedDocument], threshold: f64, exec: &Executor) -> Result<FilterOutput> {
    check_threshold(threshold)?;
    let docs = exec.try_map(docs, |doc| {
        let mask = token_mask(doc, threshold)?;
        Ok(filtered_doc(doc, doc.tokens.clone(), mask, 0))
    })?;
    Ok(FilterOutput::Tokens {
        mode: FilterMode::LossMask,
        shard: FilteredShard { docs, onset_step: None },
    })
}

/// Like [`mask_tokens`], and additionally replaces every filtered token
/// with `hidden`. Documents that end up fully masked are kept.
pub fn remove_tokens(docs: &[TokenizedDocument], threshold: f64, hidden: u32, exec: &Executor) -> Result<FilterOutput> {
    check_threshold(threshold)?;
    let docs = exec.try_map(docs, |doc| {
        if let Some(position) = doc.tokens.iter().position(|&t| t == hidden) {
            return Err(FilterError::HiddenCollision {
                hidden,
                doc_id: doc.doc_id.clone(),
                position,
            });
        }
        let mask = token_mask(doc, threshold)?;
        let tokens: Vec<u32> = doc.tokens.iter().zip(&mask).map(|(&t, &keep)| if keep { t } else { hidden }).collect();
        let substituted = mask.iter().filter(|&&m| !m).count();
        Ok(filtered_doc(doc, tokens, mask, substituted))
    })?;
    let fully = docs.iter().filter(|d| d.fully_masked).count();
    if fully > 0 {
        log::info!("{fully} documents are fully masked and kept");
    }
    Ok(FilterOutput::Tokens {
        mode: FilterMode::Removal,
        shard: FilteredShard { docs, onset_step: None },
    })
}

/// Additive filter statistics. Ground-truth fields stay zero when no
/// ground truth is supplied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub docs_in: u64,
    pub docs_out: u64,
    pub tokens_in: u64,
    /// Tokens that still contribute to the training loss.
    pub tokens_out: u64,
    pub tokens_filtered: u64,
    pub fully_masked_docs: u64,
    pub forget_total: u64,
    pub forget_caught: u64,
    pub retain_total: u64,
    pub retain_filtered: u64,
}

impl FilterCounts {
    pub fn merge(self, o: FilterCounts) -> FilterCounts {
        FilterCounts {
            docs_in: self.docs_in + o.docs_in,
            docs_out: self.docs_out + o.docs_out,
            tokens_in: self.tokens_in + o.tokens_in,
            tokens_out: self.tokens_out + o.tokens_out,
            tokens_filtered: self.tokens_filtered + o.tokens_filtered,
            fully_masked_docs: self.fully_masked_docs + o.fully_masked_docs,
            forget_total: self.forget_total + o.forget_total,
            forget_caught: self.forget_caught + o.forget_caught,
            retain_total: self.retain_total + o.retain_total,
            retain_filtered: self.retain_filtered + o.retain_filtered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub mode: FilterMode,
    pub threshold: Option<f64>,
    pub counts: FilterCounts,
    /// `tokens_filtered / tokens_in`.
    pub fraction_filtered: f64,
    /// Share of ground-truth forget tokens that were filtered.
    pub recall: Option<f64>,
    /// Share of ground-truth retain tokens that were filtered.
    pub collateral: Option<f64>,
    /// Share of filtered tokens that are ground-truth forget.
    pub precision: Option<f64>,
    pub onset_step: Option<u64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Audits one filtering run against its source, and against ground-truth
/// forget labels when given (same documents, same order).
pub fn filter_report(
    source: &[TokenizedDocument],
    output: &FilterOutput,
    ground_truth: Option<&[TokenizedDocument]>,
) -> Result<FilterReport> {
    let truth: Option<Vec<&[bool]>> = match ground_truth {
        None => None,
        Some(gt) => {
            if gt.len() != source.len() {
                return Err(FilterError::GroundTruth(format!("{} documents vs {}", gt.len(), source.len())));
            }
            let mut v = Vec::with_capacity(gt.len());
            for (g, s) in gt.iter().zip(source) {
                let labels = g
                    .forget_labels()
                    .ok_or_else(|| FilterError::GroundTruth(format!("document {:?} has no forget labels", g.doc_id)))?;
                if g.doc_id != s.doc_id || labels.len() != s.tokens.len() {
                    return Err(FilterError::GroundTruth(format!("document {:?} differs", s.doc_id)));
                }
                v.push(labels);
            }
            Some(v)
        }
    };

    // per-document filtered flags, one entry per token
    let per_doc: Vec<(FilterCounts, Vec<bool>)> = match output {
        FilterOutput::Documents { retained, dropped } => {
            if retained.len() + dropped.len() != source.len() {
                return Err(FilterError::Mismatch(format!(
                    "{} retained + {} dropped != {} source documents",
                    retained.len(),
                    dropped.len(),
                    source.len()
                )));
            }
            let mut is_dropped = vec![false; source.len()];
            for &i in dropped {
                *is_dropped.get_mut(i).ok_or_else(|| FilterError::Mismatch(format!("dropped index {i}")))? = true;
            }
            let mut kept = retained.iter();
            source
                .iter()
                .zip(&is_dropped)
                .map(|(s, &d)| {
                    if !d {
                        let k = kept.next().ok_or_else(|| FilterError::Mismatch("too few retained documents".into()))?;
                        if k != s {
                            return Err(FilterError::Mismatch(format!("retained document {:?} was modified", s.doc_id)));
                        }
                    }
                    let n = s.tokens.len() as u64;
                    let counts = FilterCounts {
                        docs_in: 1,
                        docs_out: u64::from(!d),
                        tokens_in: n,
                        tokens_out: if d { 0 } else { n },
                        tokens_filtered: if d { n } else { 0 },
                        ..Default::default()
                    };
                    Ok((counts, vec![d; s.tokens.len()]))
                })
                .collect::<Result<_>>()?
        }
        FilterOutput::Tokens { shard, .. } => {
            if shard.docs.len() != source.len() {
                return Err(FilterError::Mismatch(format!(
                    "{} filtered vs {} source documents",
                    shard.docs.len(),
                    source.len()
                )));
            }
            shard
                .docs
                .iter()
                .zip(source)
                .map(|(f, s)| {
                    if f.doc_id != s.doc_id || f.tokens.len() != s.tokens.len() || f.loss_mask.len() != s.tokens.len() {
                        return Err(FilterError::Mismatch(format!("document {:?} differs", s.doc_id)));
                    }
                    let filtered = f.loss_mask.iter().filter(|&&m| !m).count() as u64;
                    let n = s.tokens.len() as u64;
                    let counts = FilterCounts {
                        docs_in: 1,
                        docs_out: 1,
                        tokens_in: n,
                        tokens_out: n - filtered,
                        tokens_filtered: filtered,
                        fully_masked_docs: u64::from(f.fully_masked),
                        ..Default::default()
                    };
                    Ok((counts, f.loss_mask.iter().map(|&m| !m).collect()))
                })
                .collect::<Result<_>>()?
        }
    };

    let mut total = FilterCounts::default();
    for (i, (mut c, flags)) in per_doc.into_iter().enumerate() {
        if let Some(t) = &truth {
            for (&forget, &hit) in t[i].iter().zip(&flags) {
                if forget {
                    c.forget_total += 1;
                    c.forget_caught += u64::from(hit);
                } else {
                    c.retain_total += 1;
                    c.retain_filtered += u64::from(hit);
                }
            }
        }
        total = total.merge(c);
    }

    let (recall, collateral, precision) = if truth.is_some() {
        (
            Some(ratio(total.forget_caught, total.forget_total)),
            Some(ratio(total.retain_filtered, total.retain_total)),
            Some(ratio(total.forget_caught, total.tokens_filtered)),
        )
    } else {
        (None, None, None)
    };
    Ok(FilterReport {
        mode: output.mode(),
        threshold: None,
        fraction_filtered: ratio(total.tokens_filtered, total.tokens_in),
        counts: total,
        recall,
        collateral,
        precision,
        onset_step: match output {
            FilterOutput::Tokens { shard, .. } => shard.onset_step,
            FilterOutput::Documents { .. } => None,
        },
    })
}
