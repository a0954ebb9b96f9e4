//! Label transfer between two tokenizations of the same bytes.
//!
//! A target token becomes forget as soon as any source forget token shares
//! a byte with it. This over-labels tokens that straddle a forget/retain
//! boundary, which is the intended direction of error.

use std::ops::Range;

use crate::corpus::{check_spans, LabelSlot, Span, TokenizedDocument};
use crate::par::Executor;

#[derive(Debug, thiserror::Error)]
pub enum RemapError {
    #[error("{side} document {doc_id:?} is malformed: {reason}")]
    Malformed {
        side: &'static str,
        doc_id: String,
        reason: String,
    },
    #[error("{labels} source labels for {tokens} source tokens")]
    LabelLength { labels: usize, tokens: usize },
    #[error("document order differs: source {source_id:?} vs target {target_id:?}")]
    Mismatch { source_id: String, target_id: String },
    #[error("{0} source documents but {1} target documents")]
    CorpusLength(usize, usize),
}

pub type Result<T, E = RemapError> = std::result::Result<T, E>;

/// For every target token, the source token indices whose spans intersect
/// it. Sorted disjoint spans make that set a contiguous index range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanAlignment {
    pub source_len: usize,
    pub per_target: Vec<Range<usize>>,
}

impl SpanAlignment {
    pub fn sources(&self, target: usize) -> Range<usize> {
        self.per_target[target].clone()
    }

    pub fn target_len(&self) -> usize {
        self.per_target.len()
    }
}

/// Labels moved onto the target tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub labels: Vec<bool>,
    /// Target tokens that overlap no source token; they default to retain.
    pub uncovered: usize,
}

/// Linear merge of the two span lists.
pub fn align_spans(source: &[Span], target: &[Span]) -> Result<SpanAlignment> {
    let malformed = |side, reason| RemapError::Malformed {
        side,
        doc_id: String::new(),
        reason,
    };
    check_spans(source).map_err(|r| malformed("source", r))?;
    check_spans(target).map_err(|r| malformed("target", r))?;

    let mut per_target = Vec::with_capacity(target.len());
    let mut lo = 0usize;
    for t in target {
        // Source spans ending at or before t.start can never meet a later
        // target span either.
        while lo < source.len() && source[lo].end <= t.start {
            lo += 1;
        }
        let mut first = None;
        let mut last = lo;
        let mut j = lo;
        while j < source.len() && source[j].start < t.end {
            if source[j].intersects(t) {
                first.get_or_insert(j);
                last = j + 1;
            }
            j += 1;
        }
        per_target.push(match first {
            Some(f) => f..last,
            None => lo..lo,
        });
    }
    Ok(SpanAlignment {
        source_len: source.len(),
        per_target,
    })
}

/// Any-overlap rule: forget if any aligned source token is forget.
pub fn transfer_labels(source_labels: &[bool], alignment: &SpanAlignment) -> Result<Transfer> {
    if source_labels.len() != alignment.source_len {
        return Err(RemapError::LabelLength {
            labels: source_labels.len(),
            tokens: alignment.source_len,
        });
    }
    let mut uncovered = 0;
    let labels = alignment
        .per_target
        .iter()
        .map(|r| {
            if r.is_empty() {
                uncovered += 1;
                false
            } else {
                source_labels[r.clone()].iter().any(|&l| l)
            }
        })
        .collect();
    if uncovered > 0 {
        log::warn!("{uncovered} target tokens overlap no source token; labeled retain");
    }
    Ok(Transfer { labels, uncovered })
}

/// Copies the source document's forget labels onto `target`.
pub fn remap_document(source: &TokenizedDocument, target: &TokenizedDocument) -> Result<(TokenizedDocument, usize)> {
    let err = |side: &'static str, doc: &TokenizedDocument, reason: String| RemapError::Malformed {
        side,
        doc_id: doc.doc_id.clone(),
        reason,
    };
    let src_spans = source.spans.as_deref().ok_or_else(|| err("source", source, "no byte spans".into()))?;
    let tgt_spans = target.spans.as_deref().ok_or_else(|| err("target", target, "no byte spans".into()))?;
    let labels = source
        .forget_labels()
        .ok_or_else(|| err("source", source, "no forget labels".into()))?;
    let alignment = align_spans(src_spans, tgt_spans).map_err(|e| match e {
        RemapError::Malformed { side, reason, .. } => err(side, if side == "source" { source } else { target }, reason),
        other => other,
    })?;
    let t = transfer_labels(labels, &alignment)?;
    let mut out = target.clone();
    out.labels = Some(t.labels);
    out.label_slot = LabelSlot::Forget;
    Ok((out, t.uncovered))
}

/// Remaps a whole corpus. Both sides must list the same documents in the
/// same order. Returns the relabeled target corpus and the total number of
/// uncovered target tokens.
pub fn remap_corpus(
    source: &[TokenizedDocument],
    target: &[TokenizedDocument],
    exec: &Executor,
) -> Result<(Vec<TokenizedDocument>, usize)> {
    if source.len() != target.len() {
        return Err(RemapError::CorpusLength(source.len(), target.len()));
    }
    if let Some((s, t)) = source.iter().zip(target).find(|(s, t)| s.doc_id != t.doc_id) {
        return Err(RemapError::Mismatch {
            source_id: s.doc_id.clone(),
            target_id: t.doc_id.clone(),
        });
    }
    let pairs: Vec<(&TokenizedDocument, &TokenizedDocument)> = source.iter().zip(target).collect();
    let results = exec.try_map(&pairs, |(s, t)| remap_document(s, t))?;
    let uncovered = results.iter().map(|(_, u)| u).sum();
    Ok((results.into_iter().map(|(d, _)| d).collect(), uncovered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spans(bounds: &[(u32, u32)]) -> Vec<Span> {
        bounds.iter().map(|&(a, b)| Span::new(a, b)).collect()
    }

    fn brute_force(source: &[Span], target: &[Span]) -> Vec<Vec<usize>> {
        target
            .iter()
            .map(|t| (0..source.len()).filter(|&i| source[i].intersects(t)).collect())
            .collect()
    }

    #[test]
    fn identical_tokenizations_align_to_self() {
        let s = spans(&[(0, 2), (2, 5), (5, 6)]);
        let a = align_spans(&s, &s).unwrap();
        assert_eq!(a.per_target, vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn worked_alignment_and_transfer() {
        let src = spans(&[(0, 5), (5, 9)]);
        let tgt = spans(&[(0, 3), (3, 7), (7, 9)]);
        let a = align_spans(&src, &tgt).unwrap();
        assert_eq!(a.per_target, vec![0..1, 0..2, 1..2]);
        let t = transfer_labels(&[true, false], &a).unwrap();
        assert_eq!(t.labels, vec![true, true, false]);
        assert_eq!(t.uncovered, 0);
    }

    #[test]
    fn uncovered_target_token_defaults_to_retain() {
        let src = spans(&[(0, 3), (6, 9)]);
        let tgt = spans(&[(0, 3), (3, 6), (6, 9)]);
        let a = align_spans(&src, &tgt).unwrap();
        assert!(a.per_target[1].is_empty());
        let t = transfer_labels(&[true, true], &a).unwrap();
        assert_eq!(t.labels, vec![true, false, true]);
        assert_eq!(t.uncovered, 1);
    }

    #[test]
    fn all_retain_stays_retain() {
        let src = spans(&[(0, 4), (4, 8)]);
        let tgt = spans(&[(0, 1), (1, 6), (6, 8)]);
        let a = align_spans(&src, &tgt).unwrap();
        assert_eq!(transfer_labels(&[false, false], &a).unwrap().labels, vec![false; 3]);
    }

    #[test]
    fn malformed_spans_rejected() {
        let bad = spans(&[(3, 5), (0, 2)]);
        let ok = spans(&[(0, 5)]);
        assert!(matches!(align_spans(&bad, &ok), Err(RemapError::Malformed { side: "source", .. })));
        assert!(matches!(align_spans(&ok, &spans(&[(0, 3), (2, 5)])), Err(RemapError::Malformed { side: "target", .. })));
    }

    #[test]
    fn label_length_checked() {
        let a = align_spans(&spans(&[(0, 1)]), &spans(&[(0, 1)])).unwrap();
        assert!(matches!(transfer_labels(&[true, false], &a), Err(RemapError::LabelLength { .. })));
    }

    #[test]
    fn corpus_requires_matching_ids() {
        let s = vec![TokenizedDocument::new("a", vec![1]).with_spans(spans(&[(0, 1)])).with_labels(vec![true])];
        let t = vec![TokenizedDocument::new("b", vec![1]).with_spans(spans(&[(0, 1)]))];
        assert!(matches!(remap_corpus(&s, &t, &Executor::sequential()), Err(RemapError::Mismatch { .. })));
    }

    fn partition(len: u32, cuts: &std::collections::BTreeSet<u32>, gaps: u64) -> Vec<Span> {
        let mut bounds: Vec<u32> = vec![0];
        bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < len));
        bounds.push(len);
        bounds
            .windows(2)
            .enumerate()
            .filter(|(i, _)| gaps >> (i % 64) & 1 == 0)
            .map(|(_, w)| Span::new(w[0], w[1]))
            .collect()
    }

    proptest! {
        #[test]
        fn linear_merge_matches_brute_force(
            len in 1u32..60,
            a in proptest::collection::btree_set(0u32..60, 0..20),
            b in proptest::collection::btree_set(0u32..60, 0..20),
            ga in any::<u64>(), gb in any::<u64>(),
        ) {
            let src = partition(len, &a, ga & 0x5555);
            let tgt = partition(len, &b, gb & 0x1111);
            let al = align_spans(&src, &tgt).unwrap();
            let oracle = brute_force(&src, &tgt);
            let got: Vec<Vec<usize>> = al.per_target.iter().map(|r| r.clone().collect()).collect();
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn adding_a_forget_label_never_removes_one(
            len in 1u32..50,
            a in proptest::collection::btree_set(0u32..50, 0..15),
            b in proptest::collection::btree_set(0u32..50, 0..15),
            bits in any::<u64>(), extra in 0usize..16,
        ) {
            let src = partition(len, &a, 0);
            let tgt = partition(len, &b, 0);
            let al = align_spans(&src, &tgt).unwrap();
            let labels: Vec<bool> = (0..src.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
            let mut more = labels.clone();
            more[extra % src.len()] = true;
            let before = transfer_labels(&labels, &al).unwrap().labels;
            let after = transfer_labels(&more, &al).unwrap().labels;
            for (x, y) in before.iter().zip(&after) {
                prop_assert!(!x || *y);
            }
        }
    }
}
