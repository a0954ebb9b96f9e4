//! Tokenized documents and their on-disk forms.

mod bpe;
mod histogram;
mod shard;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bpe::{MergeTable, MergeTableFile, PairRef};
pub use histogram::{doc_forget_histogram, DocHistogram};
pub use shard::{decode_shard, encode_shard, read_shard, write_shard, write_shard_to, SHARD_MAGIC, SHARD_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid raw record: {source}")]
    RawRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("empty document id at line {0}")]
    EmptyId(usize),
    #[error("invalid merge table: {0}")]
    MergeTable(String),
    #[error("byte 0x{byte:02x} at offset {offset} is not in the vocabulary")]
    Unencodable { offset: usize, byte: u8 },
    #[error("document {doc_id:?}: {reason}")]
    Malformed { doc_id: String, reason: String },
    #[error("bad shard magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u16),
    #[error("shard truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after shard checksum")]
    TrailingBytes(usize),
    #[error("shard checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("document {doc_id:?} carries no labels")]
    MissingLabels { doc_id: String },
    #[error("invalid histogram edges: {0}")]
    Edges(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Half-open byte interval `[start, end)` into a document's source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: u32,
    pub end: u32,
}

impl Span {
    pub fn new(start: u32, end: u32) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True when the two intervals share at least one byte.
    pub fn intersects(&self, other: &Span) -> bool {
        self.start.max(other.start) < self.end.min(other.end)
    }
}

/// A raw corpus record as it appears in newline-delimited JSON input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub text: String,
}

/// Reads a JSONL corpus, checking that ids are non-empty and unique.
pub fn read_raw_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = std::fs::File::open(path)?;
    parse_raw_jsonl(std::io::BufReader::new(file))
}

pub fn parse_raw_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(&line).map_err(|source| CorpusError::RawRecord {
            line: idx + 1,
            source,
        })?;
        if doc.doc_id.is_empty() {
            return Err(CorpusError::EmptyId(idx + 1));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_raw_jsonl(path: &Path, docs: &[RawDocument]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut out, doc).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// What the per-token bitmap of a document means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSlot {
    /// `true` marks a forget token.
    #[default]
    Forget,
    /// `true` marks a token that contributes to the training loss.
    LossMask,
}

/// A document's tokens plus whatever per-token annotations earlier stages
/// attached.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub spans: Option<Vec<Span>>,
    pub labels: Option<Vec<bool>>,
    pub scores: Option<Vec<f32>>,
    pub label_slot: LabelSlot,
}

impl TokenizedDocument {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        TokenizedDocument {
            doc_id: doc_id.into(),
            tokens,
            ..Default::default()
        }
    }

    pub fn with_spans(mut self, spans: Vec<Span>) -> Self {
        self.spans = Some(spans);
        self
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_scores(mut self, scores: Vec<f32>) -> Self {
        self.scores = Some(scores);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Forget labels, or `None` when the document has no labels or its
    /// bitmap is a loss mask.
    pub fn forget_labels(&self) -> Option<&[bool]> {
        match self.label_slot {
            LabelSlot::Forget => self.labels.as_deref(),
            LabelSlot::LossMask => None,
        }
    }

    pub fn spans_or_err(&self) -> Result<&[Span]> {
        self.spans.as_deref().ok_or_else(|| self.malformed("document has no byte spans"))
    }

    pub(crate) fn malformed(&self, reason: impl Into<String>) -> CorpusError {
        CorpusError::Malformed {
            doc_id: self.doc_id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks the length and ordering invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if let Some(spans) = &self.spans {
            if spans.len() != n {
                return Err(self.malformed(format!("{} spans for {} tokens", spans.len(), n)));
            }
            check_spans(spans).map_err(|reason| self.malformed(reason))?;
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(self.malformed(format!("{} labels for {} tokens", labels.len(), n)));
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != n {
                return Err(self.malformed(format!("{} scores for {} tokens", scores.len(), n)));
            }
            if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
                return Err(self.malformed(format!("score {} at token {i} outside [0, 1]", scores[i])));
            }
        }
        Ok(())
    }

    /// Concatenated source bytes covered by the spans.
    pub fn reconstruct(&self, text: &[u8]) -> Option<Vec<u8>> {
        let spans = self.spans.as_ref()?;
        let mut out = Vec::with_capacity(text.len());
        for s in spans {
            out.extend_from_slice(text.get(s.start as usize..s.end as usize)?);
        }
        Some(out)
    }
}

/// Spans must be well-formed intervals, sorted and pairwise disjoint.
pub(crate) fn check_spans(spans: &[Span]) -> std::result::Result<(), String> {
    let mut prev_end = 0u32;
    for (i, s) in spans.iter().enumerate() {
        if s.start > s.end {
            return Err(format!("span {i} has start {} > end {}", s.start, s.end));
        }
        if s.start < prev_end {
            return Err(format!("span {i} starts at {} before previous end {prev_end}", s.start));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Fails on duplicate ids.
pub fn check_unique_ids(docs: &[TokenizedDocument]) -> Result<()> {
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(CorpusError::DuplicateId(d.doc_id.clone()));
        }
    }
    Ok(())
}
