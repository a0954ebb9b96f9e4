//! Linear probes over precomputed per-token (or per-document) features.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::par::Executor;

pub mod lbfgs;
pub mod metrics;
pub mod weak;

pub use lbfgs::{Lbfgs, Minimum};
pub use metrics::{
    aggregate_doc_score, auroc, calibrate_f1, calibrate_fraction, evaluate, DocAggregate, EvalReport,
    F1Threshold, FractionThreshold,
};
pub use weak::{partition_rows, weak_to_strong, WeakToStrong, WeakToStrongInput};

pub const FEATURE_MAGIC: &[u8; 4] = b"TKFT";
pub const DEFAULT_LAMBDA: f64 = 1e-4;
const CHUNK_ROWS: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("feature file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("feature file: {0}")]
    Format(String),
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("row {row} has a non-finite value")]
    NonFinite { row: usize },
    #[error("score at row {0} is not finite")]
    NonFiniteScore(usize),
    #[error("duplicate row key {0:?}")]
    DuplicateKey(String),
    #[error("expected {expected} {what}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("probe has dimension {expected} but features have {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty input")]
    Empty,
    #[error("no positive labels")]
    NoPositives,
    #[error("all labels are identical and lambda is 0: the objective has no minimum")]
    Unbounded,
    #[error("{name} = {value} is out of range")]
    Domain { name: &'static str, value: f64 },
    #[error("weak-train and relabel sets share row {0:?}")]
    Overlap(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

/// Identifies a feature row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKey {
    Token { doc_id: String, index: u32 },
    Document { doc_id: String },
}

impl RowKey {
    pub fn doc_id(&self) -> &str {
        match self {
            RowKey::Token { doc_id, .. } | RowKey::Document { doc_id } => doc_id,
        }
    }

    /// On-disk form: `doc_id\tindex` for token rows, `doc_id` for documents.
    pub fn encode(&self) -> String {
        match self {
            RowKey::Token { doc_id, index } => format!("{doc_id}\t{index}"),
            RowKey::Document { doc_id } => doc_id.clone(),
        }
    }

    pub fn decode(s: &str) -> RowKey {
        if let Some((doc, idx)) = s.rsplit_once('\t') {
            if let Ok(index) = idx.parse() {
                return RowKey::Token {
                    doc_id: doc.to_string(),
                    index,
                };
            }
        }
        RowKey::Document { doc_id: s.to_string() }
    }
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
    keys: Option<Vec<RowKey>>,
    /// Rows are two representation vectors laid side by side.
    pub concatenated: bool,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>, keys: Option<Vec<RowKey>>) -> Result<Self> {
        if dim == 0 {
            return Err(ProbeError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ProbeError::LengthMismatch {
                what: "values (multiple of dim)",
                expected: data.len().div_ceil(dim) * dim,
                found: data.len(),
            });
        }
        let rows = data.len() / dim;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite { row: i / dim });
        }
        if let Some(k) = &keys {
            if k.len() != rows {
                return Err(ProbeError::LengthMismatch {
                    what: "row keys",
                    expected: rows,
                    found: k.len(),
                });
            }
            let mut seen = HashSet::with_capacity(k.len());
            for key in k {
                if !seen.insert(key) {
                    return Err(ProbeError::DuplicateKey(key.encode()));
                }
            }
        }
        Ok(FeatureMatrix {
            dim,
            data,
            keys,
            concatenated: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], keys: Option<Vec<RowKey>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(ProbeError::LengthMismatch {
                what: "row values",
                expected: dim,
                found: r.len(),
            });
        }
        Self::new(dim, rows.concat(), keys)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> Option<&[RowKey]> {
        self.keys.as_deref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            dim: self.dim,
            data,
            keys: self.keys.as_ref().map(|k| indices.iter().map(|&i| k[i].clone()).collect()),
            concatenated: self.concatenated,
        }
    }

    /// Places `other`'s columns after `self`'s. Keys, when both sides have
    /// them, must agree row by row.
    pub fn concat_columns(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.rows() != other.rows() {
            return Err(ProbeError::LengthMismatch {
                what: "rows",
                expected: self.rows(),
                found: other.rows(),
            });
        }
        if let (Some(a), Some(b)) = (&self.keys, &other.keys) {
            if let Some(i) = (0..a.len()).find(|&i| a[i] != b[i]) {
                return Err(ProbeError::Format(format!(
                    "row {i} keys differ: {:?} vs {:?}",
                    a[i].encode(),
                    b[i].encode()
                )));
            }
        }
        let dim = self.dim + other.dim;
        let mut data = Vec::with_capacity(self.rows() * dim);
        for i in 0..self.rows() {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(FeatureMatrix {
            dim,
            data,
            keys: self.keys.clone().or_else(|| other.keys.clone()),
            concatenated: true,
        })
    }

    /// Writes the binary feature format. Values are stored as f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = u32::try_from(self.dim).map_err(|_| ProbeError::Format("dimension exceeds u32".into()))?;
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.dim * 4 + 64);
        for i in 0..self.rows() {
            buf.clear();
            let key = self.keys.as_ref().map(|k| k[i].encode()).unwrap_or_default();
            let len = u16::try_from(key.len()).map_err(|_| ProbeError::Format(format!("row key too long: {key:?}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            for &v in self.row(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads the binary feature format. A file whose every key is empty is
    /// the dense variant and yields no keys.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
            r.read_exact(buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => ProbeError::Truncated(what),
                _ => ProbeError::Io(e),
            })
        }
        let mut head = [0u8; 16];
        fill(&mut r, &mut head, "header")?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(ProbeError::BadMagic);
        }
        let dim = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(head[8..16].try_into().unwrap());
        if dim == 0 {
            return Err(ProbeError::ZeroDim);
        }
        let rows = usize::try_from(rows).map_err(|_| ProbeError::Format("row count too large".into()))?;

        let mut data = Vec::with_capacity(rows.min(1 << 20) * dim);
        let mut keys = Vec::with_capacity(rows.min(1 << 20));
        let mut row_buf = vec![0u8; dim * 4];
        let mut keyed = None;
        for _ in 0..rows {
            let mut len = [0u8; 2];
            fill(&mut r, &mut len, "row key length")?;
            let len = u16::from_le_bytes(len) as usize;
            let mut key = vec![0u8; len];
            fill(&mut r, &mut key, "row key")?;
            match keyed {
                None => keyed = Some(len > 0),
                Some(k) if k != (len > 0) => {
                    return Err(ProbeError::Format("mix of keyed and unkeyed rows".into()));
                }
                _ => {}
            }
            if len > 0 {
                let key = String::from_utf8(key).map_err(|_| ProbeError::Format("row key is not UTF-8".into()))?;
                keys.push(RowKey::decode(&key));
            }
            fill(&mut r, &mut row_buf, "row values")?;
            data.extend(row_buf.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ProbeError::Format("trailing bytes after last row".into()));
        }
        FeatureMatrix::new(dim, data, if keyed == Some(true) { Some(keys) } else { None })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss plus `(lambda / 2) * |w|^2` (bias unregularised).
///
/// `params` is `[w_0, .., w_{d-1}, bias]`; the gradient is written into
/// `grad`. Rows are summed in fixed-size chunks that are reduced in order,
/// so the result does not depend on the executor.
pub fn logistic_objective(
    features: &FeatureMatrix,
    labels: &[bool],
    lambda: f64,
    params: &[f64],
    grad: &mut [f64],
    exec: &Executor,
) -> f64 {
    let d = features.dim();
    let n = features.rows();
    let (w, b) = (&params[..d], params[d]);
    let chunks = n.div_ceil(CHUNK_ROWS);
    let partials = exec.map_range(chunks, |c| {
        let mut g = vec![0.0; d + 1];
        let mut loss = 0.0;
        for i in c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n) {
            let x = features.row(i);
            let z = b + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let y = if labels[i] { 1.0 } else { 0.0 };
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        (loss, g)
    });
    grad.iter_mut().for_each(|v| *v = 0.0);
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grad.iter_mut().for_each(|v| *v *= inv);
    let mut reg = 0.0;
    for j in 0..d {
        reg += w[j] * w[j];
        grad[j] += lambda * w[j];
    }
    loss + 0.5 * lambda * reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    F1max,
    Fraction,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mode: CalibrationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Identifier of the data the threshold was chosen on.
    #[serde(default)]
    pub set: String,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            mode: CalibrationMode::None,
            p: None,
            set: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeFile", into = "ProbeFile")]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub calibration: Calibration,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    dim: usize,
    weights: Vec<f64>,
    bias: f64,
    lambda: f64,
    threshold: f64,
    #[serde(default)]
    calibration: Calibration,
}

impl TryFrom<ProbeFile> for Probe {
    type Error = ProbeError;

    fn try_from(f: ProbeFile) -> Result<Self> {
        if f.dim != f.weights.len() {
            return Err(ProbeError::InvalidProbe(format!(
                "dim {} but {} weights",
                f.dim,
                f.weights.len()
            )));
        }
        let p = Probe {
            weights: f.weights,
            bias: f.bias,
            lambda: f.lambda,
            threshold: f.threshold,
            calibration: f.calibration,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<Probe> for ProbeFile {
    fn from(p: Probe) -> Self {
        ProbeFile {
            dim: p.weights.len(),
            weights: p.weights,
            bias: p.bias,
            lambda: p.lambda,
            threshold: p.threshold,
            calibration: p.calibration,
        }
    }
}

/// Largest threshold calibration can produce: one step above 1, used when
/// scores are tied at 1 and nothing may be filtered.
pub const MAX_THRESHOLD: f64 = 1.0000000000000002;

impl Probe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(ProbeError::InvalidProbe("no weights".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(ProbeError::InvalidProbe("non-finite parameter".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ProbeError::InvalidProbe(format!("lambda {}", self.lambda)));
        }
        if !(0.0..=MAX_THRESHOLD).contains(&self.threshold) {
            return Err(ProbeError::InvalidProbe(format!("threshold {}", self.threshold)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn affine(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Sets a threshold and records how it was chosen.
    pub fn calibrated(mut self, threshold: f64, calibration: Calibration) -> Self {
        self.threshold = threshold;
        self.calibration = calibration;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub converged: bool,
    pub grad_max_norm: f64,
    pub objective: f64,
    /// Labels were single-class; the probe is a constant predictor.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub probe: Probe,
    pub fit: FitSummary,
}

pub fn train_probe(features: &FeatureMatrix, labels: &[bool], lambda: f64) -> Result<TrainedProbe> {
    train_probe_with(features, labels, lambda, &Executor::sequential(), &Lbfgs::default())
}

/// Fits weights and bias from zero. The threshold starts at 0.5 with no
/// calibration recorded.
pub fn train_probe_with(
    features: &FeatureMatrix,
    labels: &[bool],
    lambda: f64,
    exec: &Executor,
    optimizer: &Lbfgs,
) -> Result<TrainedProbe> {
    let n = features.rows();
    if n == 0 {
        return Err(ProbeError::Empty);
    }
    if labels.len() != n {
        return Err(ProbeError::LengthMismatch {
            what: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ProbeError::Domain { name: "lambda", value: lambda });
    }
    let d = features.dim();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        if lambda == 0.0 {
            return Err(ProbeError::Unbounded);
        }
        // The bias alone would run off to infinity; use the smoothed base rate.
        let rate = (positives as f64 + 1.0) / (n as f64 + 2.0);
        let mut params = vec![0.0; d + 1];
        params[d] = (rate / (1.0 - rate)).ln();
        let mut grad = vec![0.0; d + 1];
        let objective = logistic_objective(features, labels, lambda, &params, &mut grad, exec);
        log::warn!("all {n} labels are {}; returning a constant probe", positives == n);
        return Ok(TrainedProbe {
            probe: Probe {
                weights: vec![0.0; d],
                bias: params[d],
                lambda,
                threshold: 0.5,
                calibration: Calibration::default(),
            },
            fit: FitSummary {
                iterations: 0,
                converged: false,
                grad_max_norm: grad.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                objective,
                degenerate: true,
            },
        });
    }

    let m = optimizer.minimize(
        |p, g| logistic_objective(features, labels, lambda, p, g, exec),
        vec![0.0; d + 1],
    );
    if !m.converged {
        log::warn!(
            "probe did not converge after {} iterations (gradient max-norm {:e})",
            m.iterations,
            m.grad_max_norm
        );
    }
    let mut weights = m.x;
    let bias = weights.pop().unwrap_or(0.0);
    Ok(TrainedProbe {
        probe: Probe {
            weights,
            bias,
            lambda,
            threshold: 0.5,
            calibration: Calibration::default(),
        },
        fit: FitSummary {
            iterations: m.iterations,
            converged: m.converged,
            grad_max_norm: m.grad_max_norm,
            objective: m.value,
            degenerate: false,
        },
    })
}

/// Probability of the forget class for every row.
pub fn score(probe: &Probe, features: &FeatureMatrix, exec: &Executor) -> Result<Vec<f64>> {
    if probe.dim() != features.dim() {
        return Err(ProbeError::DimMismatch {
            expected: probe.dim(),
            found: features.dim(),
        });
    }
    Ok(exec.map_range(features.rows(), |i| sigmoid(probe.affine(features.row(i)))))
}
