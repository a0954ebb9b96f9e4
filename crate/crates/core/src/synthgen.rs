//! Planted-ground-truth generators: corpora with known forget spans,
//! activations consistent with them, class-separated features and exact
//! power-law scaling series.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSlot, RawDocument, Span, TokenizedDocument};
use crate::labeler::{ActivationRecord, LatentSet, LatentStat};
use crate::par::Executor;
use crate::probe::{FeatureMatrix, ProbeError, RowKey};
use crate::rng::{derive_seed, substream};
use crate::scaling::{ScalingError, ScalingPoint, ScalingSeries};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Features(#[from] ProbeError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Retain ids are `0..retain_vocab`.
    pub retain_vocab: u32,
    /// Forget ids are `retain_vocab..retain_vocab + forget_vocab`.
    pub forget_vocab: u32,
    pub docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance, at each position, that a forget span starts there.
    pub span_rate: f64,
    pub span_min: usize,
    pub span_max: usize,
    /// Gaussian noise added to planted activations.
    pub noise_sd: f64,
    pub feature_dim: usize,
    /// Distance between the two class means in feature space.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            retain_vocab: 1000,
            forget_vocab: 200,
            docs: 100,
            min_len: 20,
            max_len: 80,
            span_rate: 0.05,
            span_min: 2,
            span_max: 8,
            noise_sd: 0.0,
            feature_dim: 8,
            margin: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SynthError::Config(m.into()));
        if self.retain_vocab == 0 || self.forget_vocab == 0 {
            return fail("vocabularies must be non-empty");
        }
        if self.retain_vocab.checked_add(self.forget_vocab).is_none_or(|v| v == u32::MAX) {
            return fail("vocabulary ids overflow u32");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return fail("need 1 <= span_min <= span_max");
        }
        if !(0.0..=1.0).contains(&self.span_rate) {
            return fail("span_rate must lie in [0, 1]");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return fail("noise_sd must be a non-negative number");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return fail("margin must be a non-negative number");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        Ok(())
    }

    /// The reserved id for removal filtering, one past the forget ids.
    pub fn hidden_id(&self) -> u32 {
        self.retain_vocab + self.forget_vocab
    }

    pub fn is_forget_id(&self, id: u32) -> bool {
        id >= self.retain_vocab && id < self.hidden_id()
    }

    /// Expected forget-token share of a generated corpus: expected forget
    /// tokens over expected tokens, from the exact per-length expectation.
    pub fn expected_forget_fraction(&self) -> f64 {
        let rho = self.span_rate;
        let spans = (self.span_max - self.span_min + 1) as f64;
        let mut f = vec![0.0f64; self.max_len + 1];
        for n in 1..=self.max_len {
            let mut after_span = 0.0;
            for l in self.span_min..=self.span_max {
                let m = l.min(n);
                after_span += (m as f64 + f[n - m]) / spans;
            }
            f[n] = (1.0 - rho) * f[n - 1] + rho * after_span;
        }
        let lens = self.min_len..=self.max_len;
        let forget: f64 = lens.clone().map(|n| f[n]).sum();
        let tokens: f64 = lens.map(|n| n as f64).sum();
        forget / tokens
    }

    /// Copy with `span_rate` chosen so the expected forget share equals
    /// `target`.
    pub fn with_target_forget_fraction(&self, target: f64) -> Result<SynthConfig> {
        let mut c = self.clone();
        c.span_rate = 1.0;
        if !(0.0..=c.expected_forget_fraction()).contains(&target) {
            return Err(SynthError::Config(format!("forget fraction {target} is not reachable")));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            c.span_rate = mid;
            if c.expected_forget_fraction() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        c.span_rate = 0.5 * (lo + hi);
        Ok(c)
    }
}

/// A generated corpus: raw text and its tokenization with planted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub raw: Vec<RawDocument>,
    /// Tokens with byte spans into `raw` and the planted forget labels.
    pub docs: Vec<TokenizedDocument>,
}

impl SynthCorpus {
    pub fn forget_fraction(&self) -> f64 {
        let (mut f, mut n) = (0usize, 0usize);
        for d in &self.docs {
            let l = d.forget_labels().unwrap_or(&[]);
            f += l.iter().filter(|&&x| x).count();
            n += l.len();
        }
        if n == 0 {
            0.0
        } else {
            f as f64 / n as f64
        }
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.len()).sum()
    }
}

pub fn doc_id(i: usize) -> String {
    format!("doc-{i:06}")
}

fn render(id: u32, forget: bool, text: &mut String) -> Span {
    let start = text.len() as u32;
    text.push(if forget { 'f' } else { 'r' });
    text.push_str(&id.to_string());
    text.push(' ');
    Span::new(start, text.len() as u32)
}

/// Every document draws from its own random stream, so document `i` is the
/// same whatever `docs` is and however the work is split.
pub fn gen_corpus(config: &SynthConfig, exec: &Executor) -> Result<SynthCorpus> {
    config.validate()?;
    let seed = derive_seed(config.seed, "corpus");
    let pairs = exec.map_range(config.docs, |i| {
        let mut rng = substream(seed, i as u64);
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut tokens = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        while tokens.len() < len {
            if rng.random_bool(config.span_rate) {
                let l = rng.random_range(config.span_min..=config.span_max).min(len - tokens.len());
                for _ in 0..l {
                    tokens.push(config.retain_vocab + rng.random_range(0..config.forget_vocab));
                    labels.push(true);
                }
            } else {
                tokens.push(rng.random_range(0..config.retain_vocab));
                labels.push(false);
            }
        }
        let mut text = String::new();
        let spans = tokens
            .iter()
            .zip(&labels)
            .map(|(&t, &f)| render(if f { t - config.retain_vocab } else { t }, f, &mut text))
            .collect();
        let id = doc_id(i);
        let doc = TokenizedDocument::new(id.clone(), tokens).with_spans(spans).with_labels(labels);
        (RawDocument { doc_id: id, text }, doc)
    });
    let (raw, docs) = pairs.into_iter().unzip();
    Ok(SynthCorpus { raw, docs })
}

/// Activation values planted by [`gen_activations`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationPlan {
    pub latents: u32,
    /// Latents fired strongly on each span's seed token.
    pub m_min: usize,
    /// Seed activation; must clear `mean + k_sd * sd` of the stated stats
    /// (mean 0, SD 1).
    pub strong: f64,
    /// Activation of the other span tokens.
    pub weak: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ActivationPlan {
    fn default() -> Self {
        ActivationPlan {
            latents: 4,
            m_min: 2,
            strong: 6.0,
            weak: 0.5,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

fn noisy<R: Rng>(rng: &mut R, value: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return value;
    }
    let e: f64 = StandardNormal.sample(rng);
    (value + sd * e).max(0.0)
}

/// Activations under which the seed-and-expand labeler recovers the
/// planted labels exactly when `noise_sd` is 0.
///
/// Every maximal forget run gets one seed token, chosen uniformly, that
/// fires `m_min` distinct latents at `strong`; the rest of the run fires one
/// latent at `weak`. With noise, those values get Gaussian noise (clamped at
/// 0) and every retain token fires one latent at `max(0, noise)`. Records
/// with activation 0 are omitted. The returned statistics are mean 0, SD 1
/// for every latent.
pub fn gen_activations(
    docs: &[TokenizedDocument],
    plan: &ActivationPlan,
    exec: &Executor,
) -> Result<(Vec<ActivationRecord>, LatentSet)> {
    if !(plan.noise_sd >= 0.0 && plan.noise_sd.is_finite()) {
        return Err(SynthError::Config("noise_sd must be a non-negative number".into()));
    }
    if plan.latents > 0 && plan.m_min > plan.latents as usize {
        return Err(SynthError::Config(format!(
            "m_min {} exceeds the {} latents",
            plan.m_min, plan.latents
        )));
    }
    let latents = LatentSet {
        latents: (0..plan.latents)
            .map(|id| {
                (
                    id,
                    LatentStat {
                        mean: 0.0,
                        sd: 1.0,
                        desc: Some(format!("synthetic forget latent {id}")),
                        absent: false,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>(),
        zero_filled: false,
    };
    if plan.latents == 0 {
        return Ok((Vec::new(), latents));
    }
    let seed = derive_seed(plan.seed, "activations");
    let per_doc = exec.map_indexed(docs, |i, doc| {
        let mut rng = substream(seed, i as u64);
        let labels = doc.forget_labels().unwrap_or(&[]);
        let mut out = Vec::new();
        let mut emit = |t: usize, latent: u32, act: f64| {
            if act > 0.0 {
                out.push(ActivationRecord {
                    doc_id: doc.doc_id.clone(),
                    token_index: t as u32,
                    latent_id: latent,
                    activation: act,
                });
            }
        };
        let mut t = 0;
        while t < labels.len() {
            if !labels[t] {
                if plan.noise_sd > 0.0 {
                    let latent = rng.random_range(0..plan.latents);
                    let e: f64 = StandardNormal.sample(&mut rng);
                    emit(t, latent, (plan.noise_sd * e).max(0.0));
                }
                t += 1;
                continue;
            }
            let end = t + labels[t..].iter().take_while(|&&l| l).count();
            let seed_at = rng.random_range(t..end);
            for u in t..end {
                if u == seed_at {
                    let mut chosen: Vec<usize> = sample(&mut rng, plan.latents as usize, plan.m_min).into_vec();
                    chosen.sort_unstable();
                    for l in chosen {
                        let v = noisy(&mut rng, plan.strong, plan.noise_sd);
                        emit(u, l as u32, v);
                    }
                } else {
                    let latent = rng.random_range(0..plan.latents);
                    let v = noisy(&mut rng, plan.weak, plan.noise_sd);
                    emit(u, latent, v);
                }
            }
            t = end;
        }
        out
    });
    Ok((per_doc.into_iter().flatten().collect(), latents))
}

fn unit_direction(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(derive_seed(seed, "direction"), 0);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rows `±(margin / 2) u + N(0, I)` for a random unit vector `u`, the sign
/// following the label. Row `i` uses its own random stream.
pub fn gen_features(
    labels: &[bool],
    keys: Option<Vec<RowKey>>,
    dim: usize,
    margin: f64,
    seed: u64,
    exec: &Executor,
) -> Result<FeatureMatrix> {
    if dim == 0 {
        return Err(SynthError::Config("feature dimension must be positive".into()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(SynthError::Config("margin must be a non-negative number".into()));
    }
    let u = unit_direction(dim, seed);
    let row_seed = derive_seed(seed, "features");
    let rows = exec.map_indexed(labels, |i, &y| {
        let mut rng = substream(row_seed, i as u64);
        let shift = if y { margin / 2.0 } else { -margin / 2.0 };
        u.iter()
            .map(|&ui| {
                let e: f64 = StandardNormal.sample(&mut rng);
                shift * ui + e
            })
            .collect::<Vec<f64>>()
    });
    Ok(FeatureMatrix::new(dim, rows.concat(), keys)?)
}

/// Token-level features for a labeled corpus, keyed by `(doc_id, index)`,
/// with the flattened planted labels.
pub fn gen_token_features(
    docs: &[TokenizedDocument],
    dim: usize,
    margin: f64,
    seed: u64,
    exec: &Executor,
) -> Result<(FeatureMatrix, Vec<bool>)> {
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for d in docs {
        let l = d
            .forget_labels()
            .ok_or_else(|| SynthError::Config(format!("document {:?} has no labels", d.doc_id)))?;
        labels.extend_from_slice(l);
        keys.extend((0..l.len() as u32).map(|index| RowKey::Token {
            doc_id: d.doc_id.clone(),
            index,
        }));
    }
    let m = gen_features(&labels, Some(keys), dim, margin, seed, exec)?;
    Ok((m, labels))
}

/// `L_i = a * C_i^-alpha * exp(e_i)` with `e_i ~ N(0, noise_sd)`.
pub fn gen_scaling_series(
    label: &str,
    a: f64,
    alpha: f64,
    budgets: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<ScalingSeries> {
    if !(a > 0.0 && alpha > 0.0 && noise_sd >= 0.0) {
        return Err(SynthError::Config("need a > 0, alpha > 0 and noise_sd >= 0".into()));
    }
    let mut rng = substream(derive_seed(seed, "scaling"), 0);
    let points = budgets
        .iter()
        .map(|&c| {
            let e: f64 = if noise_sd > 0.0 {
                noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            ScalingPoint {
                compute: c,
                loss: a * c.powf(-alpha) * e.exp(),
            }
        })
        .collect();
    Ok(ScalingSeries::new(label, points)?)
}

/// Replaces planted labels with `labels`, keeping everything else.
pub fn relabel(docs: &[TokenizedDocument], labels: Vec<Vec<bool>>) -> Vec<TokenizedDocument> {
    docs.iter()
        .zip(labels)
        .map(|(d, l)| {
            let mut out = d.clone();
            out.labels = Some(l);
            out.label_slot = LabelSlot::Forget;
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::{group_activations, label_corpus, LabelingParams};

    fn small(rate: f64) -> SynthConfig {
        SynthConfig {
            docs: 50,
            span_rate: rate,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rate_is_all_retain() {
        let c = gen_corpus(&small(0.0), &Executor::sequential()).unwrap();
        assert_eq!(c.forget_fraction(), 0.0);
        assert_eq!(small(0.0).expected_forget_fraction(), 0.0);
    }

    #[test]
    fn full_rate_with_long_spans_is_all_forget() {
        let cfg = SynthConfig {
            span_rate: 1.0,
            span_min: 80,
            span_max: 80,
            ..small(1.0)
        };
        let c = gen_corpus(&cfg, &Executor::sequential()).unwrap();
        assert_eq!(c.forget_fraction(), 1.0);
        assert_eq!(cfg.expected_forget_fraction(), 1.0);
        assert!(c.docs.iter().flat_map(|d| &d.tokens).all(|&t| cfg.is_forget_id(t)));
    }

    #[test]
    fn text_and_spans_agree() {
        let c = gen_corpus(&small(0.1), &Executor::sequential()).unwrap();
        for (raw, doc) in c.raw.iter().zip(&c.docs) {
            doc.validate().unwrap();
            let spans = doc.spans.as_ref().unwrap();
            assert_eq!(spans.last().unwrap().end as usize, raw.text.len());
            for ((s, &t), &f) in spans.iter().zip(&doc.tokens).zip(doc.forget_labels().unwrap()) {
                let piece = &raw.text[s.start as usize..s.end as usize];
                let id = if f { t - 1000 } else { t };
                assert_eq!(piece, format!("{}{id} ", if f { 'f' } else { 'r' }));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_worker_independent() {
        let cfg = small(0.1);
        let a = gen_corpus(&cfg, &Executor::sequential()).unwrap();
        let b = gen_corpus(&cfg, &Executor::new(4)).unwrap();
        assert_eq!(a, b);
        let (ra, _) = gen_activations(&a.docs, &ActivationPlan::default(), &Executor::sequential()).unwrap();
        let (rb, _) = gen_activations(&b.docs, &ActivationPlan::default(), &Executor::new(3)).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn target_fraction_is_hit() {
        let cfg = small(0.0).with_target_forget_fraction(0.2).unwrap();
        assert!((cfg.expected_forget_fraction() - 0.2).abs() < 1e-12);
        assert!(small(0.0).with_target_forget_fraction(1.5).is_err());
    }

    #[test]
    fn noiseless_activations_recover_planted_labels() {
        let c = gen_corpus(&small(0.08), &Executor::sequential()).unwrap();
        let (recs, latents) = gen_activations(&c.docs, &ActivationPlan::default(), &Executor::sequential()).unwrap();
        let acts = group_activations(&c.docs, &recs).unwrap();
        let labeled = label_corpus(&c.docs, &acts, &latents, &LabelingParams::default(), &Executor::sequential()).unwrap();
        for (a, b) in labeled.iter().zip(&c.docs) {
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn no_latents_means_no_labels() {
        let c = gen_corpus(&small(0.2), &Executor::sequential()).unwrap();
        let plan = ActivationPlan {
            latents: 0,
            ..Default::default()
        };
        let (recs, latents) = gen_activations(&c.docs, &plan, &Executor::sequential()).unwrap();
        assert!(recs.is_empty());
        let acts = group_activations(&c.docs, &recs).unwrap();
        let labeled = label_corpus(&c.docs, &acts, &latents, &LabelingParams::default(), &Executor::sequential()).unwrap();
        assert!(labeled.iter().all(|d| d.forget_labels().unwrap().iter().all(|&l| !l)));
    }

    #[test]
    fn features_follow_labels() {
        let labels: Vec<bool> = (0..400).map(|i| i % 3 == 0).collect();
        let m = gen_features(&labels, None, 1, 6.0, 2, &Executor::sequential()).unwrap();
        let mean = |cls: bool| {
            let v: Vec<f64> = (0..400).filter(|&i| labels[i] == cls).map(|i| m.row(i)[0]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        // in one dimension u is +1 or -1
        assert!(((mean(true) - mean(false)).abs() - 6.0).abs() < 0.5);
    }

    #[test]
    fn exact_scaling_series() {
        let s = gen_scaling_series("b", 1.0, 0.1, &[1e10, 1e12], 0.0, 0).unwrap();
        assert_eq!(s.points[1].loss, 1e12f64.powf(-0.1));
    }

    #[test]
    fn bad_configs_rejected() {
        for bad in [
            SynthConfig { min_len: 0, ..Default::default() },
            SynthConfig { span_min: 9, span_max: 3, ..Default::default() },
            SynthConfig { span_rate: 1.5, ..Default::default() },
            SynthConfig { forget_vocab: 0, ..Default::default() },
            SynthConfig { margin: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
