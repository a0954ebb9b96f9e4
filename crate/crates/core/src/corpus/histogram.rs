use serde::{Deserialize, Serialize};

use super::{CorpusError, Result, TokenizedDocument};

/// Per-document forget-token fraction histogram.
///
/// Bucket `i` covers `[edges[i], edges[i + 1])`; the last bucket is closed
/// on the right. Documents without tokens have no fraction and are counted
/// in `empty_docs` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub empty_docs: u64,
    /// Non-empty documents with no forget token at all.
    pub zero_forget_docs: u64,
}

impl DocHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.empty_docs
    }

    /// Share of all documents that contain no forget token (empty ones
    /// included).
    pub fn zero_forget_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            (self.zero_forget_docs + self.empty_docs) as f64 / total as f64
        }
    }

    fn bucket(&self, fraction: f64) -> usize {
        let k = self.counts.len();
        let idx = self.edges.partition_point(|&e| e <= fraction);
        idx.saturating_sub(1).min(k - 1)
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(CorpusError::Edges("need at least two edges".into()));
    }
    if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(CorpusError::Edges("edges must start at 0 and end at 1".into()));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CorpusError::Edges("edges must be strictly increasing".into()));
    }
    Ok(())
}

pub fn doc_forget_histogram(docs: &[TokenizedDocument], edges: &[f64]) -> Result<DocHistogram> {
    check_edges(edges)?;
    let mut hist = DocHistogram {
        edges: edges.to_vec(),
        counts: vec![0; edges.len() - 1],
        empty_docs: 0,
        zero_forget_docs: 0,
    };
    for doc in docs {
        let labels = doc.forget_labels().ok_or_else(|| CorpusError::MissingLabels {
            doc_id: doc.doc_id.clone(),
        })?;
        if labels.is_empty() {
            hist.empty_docs += 1;
            continue;
        }
        let forget = labels.iter().filter(|&&l| l).count();
        if forget == 0 {
            hist.zero_forget_docs += 1;
        }
        let b = hist.bucket(forget as f64 / labels.len() as f64);
        hist.counts[b] += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, labels: &[bool]) -> TokenizedDocument {
        TokenizedDocument::new(id, vec![0; labels.len()]).with_labels(labels.to_vec())
    }

    #[test]
    fn all_retain_lands_in_zero_bucket() {
        let docs = vec![doc("a", &[false; 4]), doc("b", &[false; 9])];
        let h = doc_forget_histogram(&docs, &[0.0, 0.1, 1.0]).unwrap();
        assert_eq!(h.counts, vec![2, 0]);
        assert_eq!(h.zero_forget_share(), 1.0);
    }

    #[test]
    fn fractions_zero_half_one() {
        let docs = vec![
            doc("a", &[false, false]),
            doc("b", &[true, false]),
            doc("c", &[true, true]),
        ];
        let h = doc_forget_histogram(&docs, &[0.0, 0.25, 0.75, 1.0]).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1]);
    }

    #[test]
    fn empty_documents_go_to_degenerate_bucket() {
        let docs = vec![doc("a", &[]), doc("b", &[true])];
        let h = doc_forget_histogram(&docs, &[0.0, 1.0]).unwrap();
        assert_eq!(h.empty_docs, 1);
        assert_eq!(h.counts, vec![1]);
        assert_eq!(h.total(), 2);
    }

    #[test]
    fn missing_labels_is_an_error() {
        let docs = vec![TokenizedDocument::new("a", vec![1])];
        assert!(matches!(
            doc_forget_histogram(&docs, &[0.0, 1.0]),
            Err(CorpusError::MissingLabels { .. })
        ));
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(doc_forget_histogram(&[], &[0.0]).is_err());
        assert!(doc_forget_histogram(&[], &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(doc_forget_histogram(&[], &[0.1, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn counts_are_conserved(
            docs in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 0..20), 0..50),
            inner in proptest::collection::btree_set(1u32..99, 0..6),
        ) {
            let docs: Vec<_> = docs.iter().enumerate().map(|(i, l)| doc(&i.to_string(), l)).collect();
            let mut edges = vec![0.0];
            edges.extend(inner.iter().map(|&x| f64::from(x) / 100.0));
            edges.push(1.0);
            let h = doc_forget_histogram(&docs, &edges).unwrap();
            prop_assert_eq!(h.total(), docs.len() as u64);
        }
    }
}
