//! Ground-truth token labels from sparse-autoencoder latent activations.
//!
//! A token is *seeded* as forget when at least `m_min` forget-domain latents
//! fire at `mean + k_sd * sd` or more. The forget mask then grows into
//! neighbouring tokens that carry any positive forget-latent activation,
//! repeatedly, until nothing changes. The result is the least fixed point of
//! that growth rule and does not depend on the order tokens are visited.
//!
//! The module also propagates document- or sentence-level labels down to
//! tokens and injects seeded label noise.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Span, TokenizedDocument};
use crate::par::Executor;
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("conflicting activations for doc {doc_id:?} token {token} latent {latent}: {first} vs {second}")]
    ConflictingRecord {
        doc_id: String,
        token: u32,
        latent: u32,
        first: f64,
        second: f64,
    },
    #[error("doc {doc_id:?}: token index {token} out of range for {len} tokens")]
    TokenOutOfRange { doc_id: String, token: u32, len: usize },
    #[error("activation for unknown document {0:?}")]
    UnknownDocument(String),
    #[error("non-finite activation {act} for latent {latent}")]
    NonFinite { latent: u32, act: f64 },
    #[error("latent {latent}: {count} records exceed the declared total of {total} tokens")]
    TotalTooSmall { latent: u32, count: u64, total: u64 },
    #[error("invalid labeling parameters: {0}")]
    Params(String),
    #[error("seed mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("invalid sentence units: {0}")]
    Units(String),
    #[error("token {token} (span start {start}) is outside every labeled unit")]
    UncoveredToken { token: usize, start: u32 },
    #[error("document {0:?} has no byte spans")]
    MissingSpans(String),
    #[error("{name} = {value} is outside [0, 1]")]
    Domain { name: &'static str, value: f64 },
    #[error("{acts} activation groups for {docs} documents")]
    Misaligned { acts: usize, docs: usize },
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

/// One sparse activation: latent `latent` fired with value `act` on token
/// `token` of document `doc_id`. Zero activations are never listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub doc_id: String,
    #[serde(rename = "token")]
    pub token_index: u32,
    #[serde(rename = "latent")]
    pub latent_id: u32,
    #[serde(rename = "act")]
    pub activation: f64,
}

pub fn read_activations_jsonl(path: &Path) -> Result<Vec<ActivationRecord>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ActivationRecord = serde_json::from_str(&line).map_err(|e| LabelError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_activations_jsonl(path: &Path, records: &[ActivationRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reference statistics for one forget-domain latent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentStat {
    pub mean: f64,
    pub sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desc: Option<String>,
    /// Set when no activation was observed while computing statistics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub absent: bool,
}

/// The forget-domain latents with their activation statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentSet {
    pub latents: BTreeMap<u32, LatentStat>,
    /// True when unlisted tokens were counted as zero activations.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_filled: bool,
}

impl LatentSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: LatentSet = serde_json::from_str(&text).map_err(|e| LabelError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        for (&id, s) in &set.latents {
            if !(s.sd >= 0.0) || !s.mean.is_finite() || !s.sd.is_finite() {
                return Err(LabelError::Parse {
                    line: 0,
                    message: format!("latent {id}: invalid mean/sd {}/{}", s.mean, s.sd),
                });
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Computes population mean and SD per requested latent.
///
/// With `total_tokens = Some(n)` every latent is treated as observed on `n`
/// tokens, the unlisted ones at activation 0. Otherwise statistics cover
/// only the listed records. Latents without any record get mean 0, SD 0 and
/// the `absent` flag.
pub fn latent_stats<'a, I>(records: I, latent_ids: &[u32], total_tokens: Option<u64>) -> Result<LatentSet>
where
    I: IntoIterator<Item = &'a ActivationRecord>,
{
    let wanted: std::collections::HashSet<u32> = latent_ids.iter().copied().collect();
    let mut seen: HashMap<(&'a str, u32, u32), f64> = HashMap::new();
    let mut values: BTreeMap<u32, Vec<f64>> = latent_ids.iter().map(|&id| (id, Vec::new())).collect();

    for rec in records {
        if !wanted.contains(&rec.latent_id) {
            continue;
        }
        if !rec.activation.is_finite() {
            return Err(LabelError::NonFinite {
                latent: rec.latent_id,
                act: rec.activation,
            });
        }
        match seen.entry((rec.doc_id.as_str(), rec.token_index, rec.latent_id)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                if *e.get() != rec.activation {
                    return Err(LabelError::ConflictingRecord {
                        doc_id: rec.doc_id.clone(),
                        token: rec.token_index,
                        latent: rec.latent_id,
                        first: *e.get(),
                        second: rec.activation,
                    });
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(rec.activation);
                values.get_mut(&rec.latent_id).unwrap().push(rec.activation);
            }
        }
    }

    let mut latents = BTreeMap::new();
    for (id, vals) in values {
        if vals.is_empty() {
            latents.insert(
                id,
                LatentStat {
                    absent: true,
                    ..Default::default()
                },
            );
            continue;
        }
        let listed = vals.len() as u64;
        let n = match total_tokens {
            Some(total) if total < listed => {
                return Err(LabelError::TotalTooSmall {
                    latent: id,
                    count: listed,
                    total,
                })
            }
            Some(total) => total,
            None => listed,
        };
        let nf = n as f64;
        let mean = vals.iter().sum::<f64>() / nf;
        let zeros = (n - listed) as f64;
        let ss = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() + zeros * mean * mean;
        latents.insert(
            id,
            LatentStat {
                mean,
                sd: (ss / nf).sqrt(),
                desc: None,
                absent: false,
            },
        );
    }
    Ok(LatentSet {
        latents,
        zero_filled: total_tokens.is_some(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingParams {
    /// SD multiplier for the seed rule.
    pub k_sd: f64,
    /// Minimum number of strongly activated latents for a seed.
    pub m_min: usize,
    /// Expansion counts an activation strictly above this value as positive.
    pub expansion_threshold: f64,
}

impl Default for LabelingParams {
    fn default() -> Self {
        LabelingParams {
            k_sd: 4.0,
            m_min: 2,
            expansion_threshold: 0.0,
        }
    }
}

impl LabelingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_sd > 0.0 && self.k_sd.is_finite()) {
            return Err(LabelError::Params(format!("k_sd must be positive, got {}", self.k_sd)));
        }
        if self.m_min == 0 {
            return Err(LabelError::Params("m_min must be at least 1".into()));
        }
        if !self.expansion_threshold.is_finite() {
            return Err(LabelError::Params("expansion_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Sparse per-token activations of one document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocActivations {
    tokens: Vec<Vec<(u32, f64)>>,
}

impl DocActivations {
    pub fn new(token_count: usize) -> Self {
        DocActivations {
            tokens: vec![Vec::new(); token_count],
        }
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Adds one activation. Repeating an identical record is a no-op;
    /// repeating it with a different value is an error.
    pub fn push(&mut self, doc_id: &str, token: u32, latent: u32, act: f64) -> Result<()> {
        if !act.is_finite() {
            return Err(LabelError::NonFinite { latent, act });
        }
        let len = self.tokens.len();
        let slot = self
            .tokens
            .get_mut(token as usize)
            .ok_or_else(|| LabelError::TokenOutOfRange {
                doc_id: doc_id.to_string(),
                token,
                len,
            })?;
        if let Some(&(_, prev)) = slot.iter().find(|(l, _)| *l == latent) {
            if prev != act {
                return Err(LabelError::ConflictingRecord {
                    doc_id: doc_id.to_string(),
                    token,
                    latent,
                    first: prev,
                    second: act,
                });
            }
            return Ok(());
        }
        slot.push((latent, act));
        Ok(())
    }

    pub fn token(&self, t: usize) -> &[(u32, f64)] {
        &self.tokens[t]
    }
}

/// Groups records by document, aligned with `docs`.
pub fn group_activations(docs: &[TokenizedDocument], records: &[ActivationRecord]) -> Result<Vec<DocActivations>> {
    let index: HashMap<&str, usize> = docs.iter().enumerate().map(|(i, d)| (d.doc_id.as_str(), i)).collect();
    let mut out: Vec<DocActivations> = docs.iter().map(|d| DocActivations::new(d.len())).collect();
    for r in records {
        let &i = index
            .get(r.doc_id.as_str())
            .ok_or_else(|| LabelError::UnknownDocument(r.doc_id.clone()))?;
        out[i].push(&r.doc_id, r.token_index, r.latent_id, r.activation)?;
    }
    Ok(out)
}

/// Seed rule: enough forget latents at or above `mean + k_sd * sd`.
pub fn seed_labels(acts: &DocActivations, latents: &LatentSet, params: &LabelingParams) -> Result<Vec<bool>> {
    params.validate()?;
    let cutoffs: HashMap<u32, f64> = latents
        .latents
        .iter()
        .map(|(&id, s)| (id, s.mean + params.k_sd * s.sd))
        .collect();
    Ok(acts
        .tokens
        .iter()
        .map(|tok| {
            tok.iter()
                .filter(|(l, a)| cutoffs.get(l).is_some_and(|&c| *a >= c))
                .count()
                >= params.m_min
        })
        .collect())
}

/// Tokens with at least one forget-latent activation above the expansion
/// threshold.
pub fn positive_tokens(acts: &DocActivations, latents: &LatentSet, params: &LabelingParams) -> Vec<bool> {
    acts.tokens
        .iter()
        .map(|tok| {
            tok.iter()
                .any(|(l, a)| *a > params.expansion_threshold && latents.latents.contains_key(l))
        })
        .collect()
}

/// Visiting schedule for the expansion fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepOrder {
    /// Repeated left-to-right in-place passes.
    Forward,
    /// Repeated right-to-left in-place passes.
    Backward,
    /// Queue seeded with the marked tokens; each mark enqueues its
    /// neighbours.
    #[default]
    Worklist,
}

pub fn expand_labels(
    seed: &[bool],
    acts: &DocActivations,
    latents: &LatentSet,
    params: &LabelingParams,
) -> Result<Vec<bool>> {
    expand_labels_with(seed, acts, latents, params, SweepOrder::Worklist)
}

/// Grows `seed` to the least mask closed under "positive and next to a
/// marked token".
pub fn expand_labels_with(
    seed: &[bool],
    acts: &DocActivations,
    latents: &LatentSet,
    params: &LabelingParams,
    order: SweepOrder,
) -> Result<Vec<bool>> {
    if seed.len() != acts.token_count() {
        return Err(LabelError::MaskLength {
            mask: seed.len(),
            tokens: acts.token_count(),
        });
    }
    let positive = positive_tokens(acts, latents, params);
    Ok(grow(seed, &positive, order))
}

fn grow(seed: &[bool], positive: &[bool], order: SweepOrder) -> Vec<bool> {
    let n = seed.len();
    let mut mask = seed.to_vec();
    let joins = |mask: &[bool], t: usize| -> bool {
        positive[t] && ((t > 0 && mask[t - 1]) || (t + 1 < n && mask[t + 1]))
    };
    match order {
        SweepOrder::Forward | SweepOrder::Backward => loop {
            let mut changed = false;
            for step in 0..n {
                let t = if order == SweepOrder::Forward { step } else { n - 1 - step };
                if !mask[t] && joins(&mask, t) {
                    mask[t] = true;
                    changed = true;
                }
            }
            if !changed {
                break mask;
            }
        },
        SweepOrder::Worklist => {
            let mut queue: VecDeque<usize> = (0..n).filter(|&t| mask[t]).collect();
            while let Some(t) = queue.pop_front() {
                for nb in [t.wrapping_sub(1), t + 1] {
                    if nb < n && !mask[nb] && positive[nb] {
                        mask[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
            mask
        }
    }
}

/// Seed rule followed by expansion for one document.
pub fn label_document(acts: &DocActivations, latents: &LatentSet, params: &LabelingParams) -> Result<Vec<bool>> {
    let seed = seed_labels(acts, latents, params)?;
    expand_labels(&seed, acts, latents, params)
}

/// Labels every document; `acts` must be aligned with `docs`.
pub fn label_corpus(
    docs: &[TokenizedDocument],
    acts: &[DocActivations],
    latents: &LatentSet,
    params: &LabelingParams,
    exec: &Executor,
) -> Result<Vec<TokenizedDocument>> {
    params.validate()?;
    if docs.len() != acts.len() {
        return Err(LabelError::Misaligned {
            acts: acts.len(),
            docs: docs.len(),
        });
    }
    let labels = exec.map_indexed(acts, |_, a| label_document(a, latents, params));
    docs.iter()
        .zip(labels)
        .map(|(d, l)| {
            let mut doc = d.clone();
            doc.labels = Some(l?);
            doc.label_slot = crate::corpus::LabelSlot::Forget;
            Ok(doc)
        })
        .collect()
}

/// A labeled byte range of a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceLabel {
    pub start: u32,
    pub end: u32,
    pub forget: bool,
}

/// Coarse labels for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseLabels {
    Document(bool),
    Sentences(Vec<SentenceLabel>),
}

/// One line of a coarse-label JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseRecord {
    pub doc_id: String,
    pub unit: CoarseLabels,
}

/// Each token inherits the label of the unit containing its first byte.
pub fn propagate_coarse(spans: &[Span], units: &CoarseLabels) -> Result<Vec<bool>> {
    match units {
        CoarseLabels::Document(label) => Ok(vec![*label; spans.len()]),
        CoarseLabels::Sentences(sentences) => {
            for (i, w) in sentences.windows(2).enumerate() {
                if w[0].end != w[1].start {
                    return Err(LabelError::Units(format!(
                        "unit {} ends at {} but unit {} starts at {}",
                        i,
                        w[0].end,
                        i + 1,
                        w[1].start
                    )));
                }
            }
            if let Some(u) = sentences.iter().find(|u| u.start > u.end) {
                return Err(LabelError::Units(format!("unit [{}, {}) is reversed", u.start, u.end)));
            }
            spans
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let idx = sentences.partition_point(|u| u.end <= s.start);
                    match sentences.get(idx) {
                        Some(u) if u.start <= s.start && s.start < u.end => Ok(u.forget),
                        _ => Err(LabelError::UncoveredToken { token: t, start: s.start }),
                    }
                })
                .collect()
        }
    }
}

/// Label flip rate plus the seed of the flip generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub flip_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(LabelError::Domain {
                name: "flip_rate",
                value: self.flip_rate,
            });
        }
        Ok(())
    }
}

/// Flips each label independently with probability `flip_rate`. Draws come
/// from the substream keyed by `stream_key` (normally the document id), so
/// the result does not depend on which documents are processed alongside.
pub fn perturb_labels(labels: &[bool], spec: &NoiseSpec, stream_key: &str) -> Result<Vec<bool>> {
    spec.validate()?;
    let mut rng = rng::keyed_substream(rng::derive_seed(spec.seed, "label-noise"), stream_key);
    Ok(labels.iter().map(|&l| l ^ rng.random_bool(spec.flip_rate)).collect())
}

/// Applies [`perturb_labels`] to every labeled document.
pub fn perturb_corpus(docs: &[TokenizedDocument], spec: &NoiseSpec, exec: &Executor) -> Result<Vec<TokenizedDocument>> {
    spec.validate()?;
    exec.try_map(docs, |d| {
        let mut out = d.clone();
        if let Some(labels) = d.forget_labels() {
            out.labels = Some(perturb_labels(labels, spec, &d.doc_id)?);
        }
        Ok(out)
    })
}

/// Error rate against ground truth of a classifier with accuracy `a` whose
/// labels are then flipped at rate `r`: `1 - a(1 - r) - r(1 - a)`.
///
/// Evaluated as `(1 - a)(1 - r) + a r`, the same polynomial, which is exact
/// in floating point at `r = 0`, `r = 1` and `r = 1/2`.
pub fn expected_error_rate(accuracy: f64, flip_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(LabelError::Domain {
            name: "accuracy",
            value: accuracy,
        });
    }
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(LabelError::Domain {
            name: "flip_rate",
            value: flip_rate,
        });
    }
    Ok((1.0 - accuracy) * (1.0 - flip_rate) + accuracy * flip_rate)
}
