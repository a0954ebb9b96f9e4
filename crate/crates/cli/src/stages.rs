//! Stage bodies. Each reads its inputs, runs the library, writes its
//! artifacts and a manifest next to the primary output.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use tokensieve::corpus::{
    check_unique_ids, doc_forget_histogram, read_raw_jsonl, read_shard, write_raw_jsonl, write_shard, SHARD_MAGIC,
};
use tokensieve::filter::{filter_documents, filter_report, mask_tokens, remove_tokens, FilterOutput};
use tokensieve::labeler::{
    group_activations, label_corpus, latent_stats, perturb_corpus, propagate_coarse, read_activations_jsonl,
    write_activations_jsonl, CoarseRecord, LabelingParams, LatentSet, NoiseSpec,
};
use tokensieve::probe::{
    aggregate_doc_score, calibrate_f1, calibrate_fraction, evaluate, partition_rows, score as score_rows,
    train_probe_with, weak_to_strong, Calibration, CalibrationMode, DocAggregate, FeatureMatrix, Lbfgs, Probe,
    RowKey, WeakToStrongInput, DEFAULT_LAMBDA,
};
use tokensieve::remap::remap_corpus;
use tokensieve::rng::derive_seed;
use tokensieve::scaling::{
    find_series, frontier_auc, read_frontier_csv, read_series_csv, slowdown, write_series_csv, write_slowdown_csv,
};
use tokensieve::synthgen::{gen_activations, gen_corpus, gen_scaling_series, gen_token_features, ActivationPlan, SynthConfig};
use tokensieve::{Executor, MergeTable, TokenizedDocument};

use crate::manifest::Manifest;
use crate::{
    optional, output, require, Aggregate, CalibrateArgs, Common, Failure, FilterArgs, Format, LabelArgs, Mode,
    NoiseArgs, RemapArgs, ScalingArgs, ScoreArgs, StatsArgs, StatsKind, SynthArgs, TokenizeArgs, TrainProbeArgs,
    WeakToStrongArgs,
};

const DEFAULT_EDGES: [f64; 7] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0];

fn executor(common: &Common) -> Executor {
    Executor::new(common.jobs.unwrap_or(0))
}

fn seed(common: &Common) -> u64 {
    common.seed.unwrap_or(0)
}

fn stage(name: &'static str, body: impl FnOnce() -> Result<()>) -> Result<(), Failure> {
    body().map_err(|e| Failure::Stage(name, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn basename(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn token_total(docs: &[TokenizedDocument]) -> usize {
    docs.iter().map(TokenizedDocument::len).sum()
}

fn forget_total(docs: &[TokenizedDocument]) -> usize {
    docs.iter()
        .filter_map(|d| d.forget_labels())
        .map(|l| l.iter().filter(|&&b| b).count())
        .sum()
}

fn labels_of(d: &TokenizedDocument) -> Result<&[bool]> {
    d.forget_labels()
        .ok_or_else(|| anyhow!("document {:?} has no forget labels", d.doc_id))
}

/// One line of a document-score JSONL file.
#[derive(Debug, Serialize, Deserialize)]
struct DocScore {
    doc_id: String,
    score: f64,
}

fn write_doc_scores(path: &Path, scores: &[DocScore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_doc_scores(path: &Path) -> Result<Vec<DocScore>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?);
    }
    Ok(out)
}

/// Document scores in shard order.
fn doc_scores_for(docs: &[TokenizedDocument], scores: &[DocScore]) -> Result<Vec<f64>> {
    let mut by_id = HashMap::with_capacity(scores.len());
    for s in scores {
        if by_id.insert(s.doc_id.as_str(), s.score).is_some() {
            bail!("duplicate document score for {:?}", s.doc_id);
        }
    }
    docs.iter()
        .map(|d| {
            by_id
                .get(d.doc_id.as_str())
                .copied()
                .ok_or_else(|| anyhow!("no score for document {:?}", d.doc_id))
        })
        .collect()
}

fn is_shard(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let n = f.read(&mut head)?;
    Ok(n == 4 && head[..] == SHARD_MAGIC[..])
}

/// Where a feature row points in a shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Token(usize, usize),
    Doc(usize),
}

/// Matches feature rows to shard positions. Keyed rows are looked up by key;
/// unkeyed rows are taken as every token in order, or else one per document.
fn align_rows(features: &FeatureMatrix, docs: &[TokenizedDocument]) -> Result<Vec<Target>> {
    match features.keys() {
        Some(keys) => {
            let index: HashMap<&str, usize> = docs.iter().enumerate().map(|(i, d)| (d.doc_id.as_str(), i)).collect();
            keys.iter()
                .map(|k| {
                    let &d = index
                        .get(k.doc_id())
                        .ok_or_else(|| anyhow!("feature row for unknown document {:?}", k.doc_id()))?;
                    match k {
                        RowKey::Document { .. } => Ok(Target::Doc(d)),
                        RowKey::Token { index, .. } => {
                            let t = *index as usize;
                            if t >= docs[d].len() {
                                bail!("feature row {} is past the end of document {:?}", t, k.doc_id());
                            }
                            Ok(Target::Token(d, t))
                        }
                    }
                })
                .collect()
        }
        None => {
            let rows = features.rows();
            if rows == token_total(docs) {
                Ok(docs
                    .iter()
                    .enumerate()
                    .flat_map(|(d, doc)| (0..doc.len()).map(move |t| Target::Token(d, t)))
                    .collect())
            } else if rows == docs.len() {
                Ok((0..rows).map(Target::Doc).collect())
            } else {
                bail!(
                    "{} unkeyed feature rows match neither {} tokens nor {} documents",
                    rows,
                    token_total(docs),
                    docs.len()
                )
            }
        }
    }
}

/// Forget label of each row; a document is forget when any token is.
fn row_labels(targets: &[Target], docs: &[TokenizedDocument]) -> Result<Vec<bool>> {
    targets
        .iter()
        .map(|&t| match t {
            Target::Token(d, i) => Ok(labels_of(&docs[d])?[i]),
            Target::Doc(d) => Ok(labels_of(&docs[d])?.iter().any(|&b| b)),
        })
        .collect()
}

pub fn tokenize(a: &TokenizeArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let merges = require(a.merges.as_ref(), "merges")?;
    let out = output(&a.common)?;
    let exec = executor(&a.common);
    stage("tokenize", || {
        let table = MergeTable::load(merges)?;
        let raw = read_raw_jsonl(input)?;
        let docs = exec.try_map(&raw, |d| table.encode(&d.doc_id, &d.text))?;
        write_shard(out, &docs)?;
        let mut m = Manifest::new("tokenize");
        m.input("raw", input)?.input("merges", merges)?;
        m.output("shard", out)?;
        m.summary("documents", docs.len()).summary("tokens", token_total(&docs));
        m.write(out)?;
        Ok(())
    })
}

pub fn label(a: &LabelArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let out = output(&a.common)?;
    let exec = executor(&a.common);
    if let Some(coarse) = a.coarse.as_ref() {
        let coarse = require(Some(coarse), "coarse")?;
        return stage("label", || {
            let docs = read_shard(input)?;
            let r = BufReader::new(File::open(coarse)?);
            let mut units = HashMap::new();
            for (n, line) in r.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CoarseRecord =
                    serde_json::from_str(&line).with_context(|| format!("{} line {}", coarse.display(), n + 1))?;
                if units.insert(rec.doc_id.clone(), rec.unit).is_some() {
                    bail!("duplicate coarse label for {:?}", rec.doc_id);
                }
            }
            let labeled = exec.try_map(&docs, |d| -> Result<TokenizedDocument> {
                let unit = units
                    .get(&d.doc_id)
                    .ok_or_else(|| anyhow!("no coarse label for document {:?}", d.doc_id))?;
                let mut doc = d.clone();
                doc.labels = Some(propagate_coarse(d.spans_or_err()?, unit)?);
                doc.label_slot = Default::default();
                Ok(doc)
            })?;
            write_shard(out, &labeled)?;
            let mut m = Manifest::new("label");
            m.param("source", "coarse");
            m.input("shard", input)?.input("coarse", coarse)?;
            m.output("shard", out)?;
            m.summary("tokens", token_total(&labeled))
                .summary("forget_tokens", forget_total(&labeled));
            m.write(out)?;
            Ok(())
        });
    }
    let activations = require(a.activations.as_ref(), "activations")?;
    let latents = require(a.latents.as_ref(), "latents")?;
    let defaults = LabelingParams::default();
    let params = LabelingParams {
        k_sd: a.k_sd.unwrap_or(defaults.k_sd),
        m_min: a.m_min.unwrap_or(defaults.m_min),
        expansion_threshold: a.expansion_threshold.unwrap_or(defaults.expansion_threshold),
    };
    stage("label", || {
        let docs = read_shard(input)?;
        let records = read_activations_jsonl(activations)?;
        let set = LatentSet::load(latents)?;
        let acts = group_activations(&docs, &records)?;
        let labeled = label_corpus(&docs, &acts, &set, &params, &exec)?;
        write_shard(out, &labeled)?;
        let mut m = Manifest::new("label");
        m.param("source", "activations").param("labeling", params);
        m.input("shard", input)?
            .input("activations", activations)?
            .input("latents", latents)?;
        m.output("shard", out)?;
        m.summary("tokens", token_total(&labeled))
            .summary("forget_tokens", forget_total(&labeled));
        m.write(out)?;
        Ok(())
    })
}

pub fn remap(a: &RemapArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let target = require(a.target.as_ref(), "target")?;
    let out = output(&a.common)?;
    let exec = executor(&a.common);
    stage("remap", || {
        let source = read_shard(input)?;
        let dest = read_shard(target)?;
        let (remapped, uncovered) = remap_corpus(&source, &dest, &exec)?;
        write_shard(out, &remapped)?;
        let mut m = Manifest::new("remap");
        m.input("source", input)?.input("target", target)?;
        m.output("shard", out)?;
        m.summary("tokens", token_total(&remapped))
            .summary("forget_tokens", forget_total(&remapped))
            .summary("uncovered_tokens", uncovered);
        m.write(out)?;
        Ok(())
    })
}

pub fn train_probe(a: &TrainProbeArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let labels = require(a.labels.as_ref(), "labels")?;
    let out = output(&a.common)?;
    let exec = executor(&a.common);
    let lambda = a.lambda.unwrap_or(DEFAULT_LAMBDA);
    let sample = a.sample.unwrap_or(1.0);
    if !(sample > 0.0 && sample <= 1.0) {
        return Err(Failure::Usage(format!("--sample must be in (0, 1], got {sample}")));
    }
    let seed = seed(&a.common);
    stage("train-probe", || {
        let features = FeatureMatrix::load(input)?;
        let docs = read_shard(labels)?;
        let targets = align_rows(&features, &docs)?;
        let y = row_labels(&targets, &docs)?;
        let (x, y) = if sample < 1.0 {
            let (rows, _) = partition_rows(features.rows(), sample, seed)?;
            let ys: Vec<bool> = rows.iter().map(|&i| y[i]).collect();
            (features.select(&rows), ys)
        } else {
            (features, y)
        };
        let trained = train_probe_with(&x, &y, lambda, &exec, &Lbfgs::default())?;
        if !trained.fit.converged {
            log::warn!(
                "L-BFGS stopped after {} iterations with gradient max-norm {:e}",
                trained.fit.iterations,
                trained.fit.grad_max_norm
            );
        }
        trained.probe.save(out)?;
        let mut m = Manifest::new("train-probe");
        m.param("lambda", lambda).param("sample", sample).param("seed", seed);
        m.input("features", input)?.input("labels", labels)?;
        m.output("probe", out)?;
        m.summary("rows", x.rows())
            .summary("positives", y.iter().filter(|&&b| b).count())
            .summary("fit", trained.fit);
        m.write(out)?;
        Ok(())
    })
}

pub fn score(a: &ScoreArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let probe_path = require(a.probe.as_ref(), "probe")?;
    let shard = require(a.shard.as_ref(), "shard")?;
    let out = output(&a.common)?;
    let exec = executor(&a.common);
    stage("score", || {
        let probe = Probe::load(probe_path)?;
        let features = FeatureMatrix::load(input)?;
        let docs = read_shard(shard)?;
        let targets = align_rows(&features, &docs)?;
        let scores = score_rows(&probe, &features, &exec)?;
        let doc_level = targets.iter().any(|t| matches!(t, Target::Doc(_)));
        let mut m = Manifest::new("score");
        m.param("aggregate", a.aggregate);
        m.input("features", input)?.input("probe", probe_path)?.input("shard", shard)?;
        if doc_level || a.aggregate.is_some() {
            let mut per_doc: Vec<Vec<f64>> = vec![Vec::new(); docs.len()];
            for (t, s) in targets.iter().zip(&scores) {
                match *t {
                    Target::Doc(d) | Target::Token(d, _) => per_doc[d].push(*s),
                }
            }
            if doc_level && targets.iter().any(|t| matches!(t, Target::Token(..))) {
                bail!("feature file mixes token and document rows");
            }
            let method = match a.aggregate.unwrap_or(Aggregate::Max) {
                Aggregate::Max => DocAggregate::Max,
                Aggregate::Mean => DocAggregate::Mean,
                Aggregate::FractionAbove => DocAggregate::FractionAbove {
                    threshold: probe.threshold,
                },
            };
            let out_scores = docs
                .iter()
                .zip(&per_doc)
                .map(|(d, s)| {
                    if s.is_empty() {
                        bail!("no scored rows for document {:?}", d.doc_id);
                    }
                    let score = if doc_level {
                        if s.len() != 1 {
                            bail!("{} rows for document {:?}", s.len(), d.doc_id);
                        }
                        s[0]
                    } else {
                        aggregate_doc_score(s, method)?
                    };
                    Ok(DocScore {
                        doc_id: d.doc_id.clone(),
                        score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_doc_scores(out, &out_scores)?;
            m.output("doc_scores", out)?;
            m.summary("documents", out_scores.len());
        } else {
            let mut token_scores: Vec<Vec<Option<f32>>> = docs.iter().map(|d| vec![None; d.len()]).collect();
            for (t, s) in targets.iter().zip(&scores) {
                if let Target::Token(d, i) = *t {
                    if token_scores[d][i].replace(*s as f32).is_some() {
                        bail!("token {} of document {:?} is scored twice", i, docs[d].doc_id);
                    }
                }
            }
            let scored = docs
                .iter()
                .zip(token_scores)
                .map(|(d, s)| {
                    let s: Option<Vec<f32>> = s.into_iter().collect();
                    let s = s.ok_or_else(|| anyhow!("document {:?} has unscored tokens", d.doc_id))?;
                    Ok(d.clone().with_scores(s))
                })
                .collect::<Result<Vec<_>>>()?;
            write_shard(out, &scored)?;
            m.output("shard", out)?;
            m.summary("tokens", scores.len());
        }
        m.write(out)?;
        Ok(())
    })
}

pub fn calibrate(a: &CalibrateArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let probe_path = require(a.probe.as_ref(), "probe")?;
    let labels_path = optional(a.labels.as_ref())?;
    let out = output(&a.common)?;
    if let Some(p) = a.fraction {
        if !(p > 0.0 && p < 1.0) {
            return Err(Failure::Usage(format!("--fraction must be in (0, 1), got {p}")));
        }
    }
    stage("calibrate", || {
        let probe = Probe::load(probe_path)?;
        let (scores, source_docs) = if is_shard(input)? {
            let docs = read_shard(input)?;
            let mut scores = Vec::with_capacity(token_total(&docs));
            for d in &docs {
                let s = d
                    .scores
                    .as_ref()
                    .ok_or_else(|| anyhow!("document {:?} has no scores", d.doc_id))?;
                scores.extend(s.iter().map(|&v| f64::from(v)));
            }
            (scores, Some(docs))
        } else {
            let recs = read_doc_scores(input)?;
            (recs.iter().map(|r| r.score).collect(), None)
        };
        let mut m = Manifest::new("calibrate");
        m.input("scores", input)?.input("probe", probe_path)?;
        let set = basename(input);
        let calibrated = match a.fraction {
            Some(p) => {
                let t = calibrate_fraction(&scores, p)?;
                m.param("mode", "fraction").param("fraction", p);
                m.summary("filtered", t.filtered)
                    .summary("target", t.target)
                    .summary("tie_limited", t.tie_limited);
                probe.calibrated(
                    t.threshold,
                    Calibration {
                        mode: CalibrationMode::Fraction,
                        p: Some(p),
                        set,
                    },
                )
            }
            None => {
                let labels = match (labels_path, &source_docs) {
                    (Some(path), Some(docs)) => {
                        m.input("labels", path)?;
                        let truth = read_shard(path)?;
                        if truth.len() != docs.len() {
                            bail!("label shard has {} documents, scores have {}", truth.len(), docs.len());
                        }
                        let mut y = Vec::with_capacity(scores.len());
                        for (t, d) in truth.iter().zip(docs) {
                            if t.doc_id != d.doc_id || t.len() != d.len() {
                                bail!("label shard does not match document {:?}", d.doc_id);
                            }
                            y.extend_from_slice(labels_of(t)?);
                        }
                        y
                    }
                    (Some(path), None) => {
                        m.input("labels", path)?;
                        let truth = read_shard(path)?;
                        let recs = read_doc_scores(input)?;
                        let by_id: HashMap<&str, bool> = truth
                            .iter()
                            .map(|d| Ok((d.doc_id.as_str(), labels_of(d)?.iter().any(|&b| b))))
                            .collect::<Result<_>>()?;
                        recs.iter()
                            .map(|r| {
                                by_id
                                    .get(r.doc_id.as_str())
                                    .copied()
                                    .ok_or_else(|| anyhow!("no labels for document {:?}", r.doc_id))
                            })
                            .collect::<Result<_>>()?
                    }
                    (None, Some(docs)) => {
                        let mut y = Vec::with_capacity(scores.len());
                        for d in docs {
                            y.extend_from_slice(labels_of(d)?);
                        }
                        y
                    }
                    (None, None) => bail!("F1 calibration of document scores needs --labels"),
                };
                let t = calibrate_f1(&scores, &labels)?;
                m.param("mode", "f1max");
                m.summary("f1", t.f1);
                probe.calibrated(
                    t.threshold,
                    Calibration {
                        mode: CalibrationMode::F1max,
                        p: None,
                        set,
                    },
                )
            }
        };
        calibrated.save(out)?;
        m.output("probe", out)?;
        m.summary("threshold", calibrated.threshold);
        m.write(out)?;
        Ok(())
    })
}

pub fn filter(a: &FilterArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let out = output(&a.common)?;
    let mode = a.mode.ok_or_else(|| Failure::Usage("--mode is required".into()))?;
    let probe_path = optional(a.probe.as_ref())?;
    let doc_scores_path = optional(a.doc_scores.as_ref())?;
    let merges = optional(a.merges.as_ref())?;
    let ground_truth = optional(a.ground_truth.as_ref())?;
    let from_labels = a.from_labels.unwrap_or(false);
    if mode == Mode::Document && doc_scores_path.is_none() && !from_labels {
        return Err(Failure::Usage("document mode needs --doc-scores or --from-labels".into()));
    }
    if mode == Mode::Removal && a.hidden_id.is_none() && merges.is_none() {
        return Err(Failure::Usage("removal mode needs --hidden-id or --merges".into()));
    }
    let exec = executor(&a.common);
    stage("filter", || {
        let threshold = match (a.threshold, probe_path) {
            (Some(t), _) => t,
            (None, Some(p)) => Probe::load(p)?.threshold,
            (None, None) if from_labels => 0.5,
            (None, None) => bail!("no threshold: pass --threshold or --probe"),
        };
        let mut docs = read_shard(input)?;
        check_unique_ids(&docs)?;
        if from_labels && mode != Mode::Document {
            for d in &mut docs {
                let s = labels_of(d)?.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                d.scores = Some(s);
            }
        }
        let mut m = Manifest::new("filter");
        m.param("mode", mode)
            .param("threshold", threshold)
            .param("from_labels", from_labels)
            .param("onset_step", a.onset_step);
        m.input("shard", input)?;
        let result = match mode {
            Mode::Document => {
                let scores = match doc_scores_path {
                    Some(p) if !from_labels => {
                        m.input("doc_scores", p)?;
                        doc_scores_for(&docs, &read_doc_scores(p)?)?
                    }
                    _ => docs
                        .iter()
                        .map(|d| Ok(if labels_of(d)?.iter().any(|&b| b) { 1.0 } else { 0.0 }))
                        .collect::<Result<_>>()?,
                };
                filter_documents(&docs, &scores, threshold)?
            }
            Mode::Mask => mask_tokens(&docs, threshold, &exec)?,
            Mode::Removal => {
                let hidden = match (a.hidden_id, merges) {
                    (Some(h), _) => h,
                    (None, Some(p)) => {
                        m.input("merges", p)?;
                        MergeTable::load(p)?
                            .hidden_id()
                            .ok_or_else(|| anyhow!("merge table {} has no hidden token", p.display()))?
                    }
                    (None, None) => unreachable!("checked above"),
                };
                m.param("hidden_id", hidden);
                remove_tokens(&docs, threshold, hidden, &exec)?
            }
        };
        let truth = match ground_truth {
            Some(p) => {
                m.input("ground_truth", p)?;
                Some(read_shard(p)?)
            }
            None => None,
        };
        let mut report = filter_report(&docs, &result, truth.as_deref())?;
        report.threshold = Some(threshold);
        report.onset_step = a.onset_step;
        let written = match result {
            FilterOutput::Documents { retained, .. } => retained,
            FilterOutput::Tokens { mut shard, .. } => {
                shard.onset_step = a.onset_step;
                shard.to_tokenized()
            }
        };
        write_shard(out, &written)?;
        let report_path = with_suffix(out, ".report.json");
        write_json(&report_path, &report)?;
        m.output("shard", out)?.output("report", &report_path)?;
        m.summary("fraction_filtered", report.fraction_filtered)
            .summary("recall", report.recall)
            .summary("collateral", report.collateral);
        m.write(out)?;
        Ok(())
    })
}

pub fn noise(a: &NoiseArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let out = output(&a.common)?;
    let flip_rate = a
        .flip_rate
        .ok_or_else(|| Failure::Usage("--flip-rate is required".into()))?;
    let spec = NoiseSpec {
        flip_rate,
        seed: seed(&a.common),
    };
    let exec = executor(&a.common);
    stage("noise", || {
        let docs = read_shard(input)?;
        let noisy = perturb_corpus(&docs, &spec, &exec)?;
        let flipped: usize = docs
            .iter()
            .zip(&noisy)
            .filter_map(|(a, b)| Some(a.forget_labels()?.iter().zip(b.forget_labels()?).filter(|(x, y)| x != y).count()))
            .sum();
        write_shard(out, &noisy)?;
        let mut m = Manifest::new("noise");
        m.param("noise", spec);
        m.input("shard", input)?;
        m.output("shard", out)?;
        m.summary("tokens", token_total(&noisy)).summary("flipped", flipped);
        m.write(out)?;
        Ok(())
    })
}

pub fn stats(a: &StatsArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let out = output(&a.common)?;
    let kind = a.kind.ok_or_else(|| Failure::Usage("--kind is required".into()))?;
    let shard = optional(a.shard.as_ref())?;
    let labels = optional(a.labels.as_ref())?;
    stage("stats", || {
        let mut m = Manifest::new("stats");
        m.param("kind", kind);
        m.input("input", input)?;
        match kind {
            StatsKind::Histogram => {
                let edges = a.edges.clone().unwrap_or_else(|| DEFAULT_EDGES.to_vec());
                m.param("edges", &edges);
                let docs = read_shard(input)?;
                let h = doc_forget_histogram(&docs, &edges)?;
                m.summary("zero_forget_share", h.zero_forget_share());
                write_json(out, &h)?;
            }
            StatsKind::Latents => {
                let records = read_activations_jsonl(input)?;
                let ids: Vec<u32> = match &a.latent_ids {
                    Some(ids) => ids.clone(),
                    None => records
                        .iter()
                        .map(|r| r.latent_id)
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                m.param("latent_ids", &ids);
                let total = match shard {
                    Some(p) => {
                        m.input("shard", p)?;
                        Some(token_total(&read_shard(p)?) as u64)
                    }
                    None => None,
                };
                let set = latent_stats(&records, &ids, total)?;
                m.summary("latents", set.len());
                write_json(out, &set)?;
            }
            StatsKind::Eval => {
                let threshold = a.threshold.unwrap_or(0.5);
                m.param("threshold", threshold);
                let docs = read_shard(input)?;
                let truth = match labels {
                    Some(p) => {
                        m.input("labels", p)?;
                        read_shard(p)?
                    }
                    None => docs.clone(),
                };
                if truth.len() != docs.len() {
                    bail!("label shard has {} documents, scores have {}", truth.len(), docs.len());
                }
                let (mut s, mut y) = (Vec::new(), Vec::new());
                for (d, t) in docs.iter().zip(&truth) {
                    let ds = d
                        .scores
                        .as_ref()
                        .ok_or_else(|| anyhow!("document {:?} has no scores", d.doc_id))?;
                    let tl = labels_of(t)?;
                    if t.doc_id != d.doc_id || tl.len() != ds.len() {
                        bail!("label shard does not match document {:?}", d.doc_id);
                    }
                    s.extend(ds.iter().map(|&v| f64::from(v)));
                    y.extend_from_slice(tl);
                }
                let report = evaluate(&s, &y, threshold)?;
                m.summary("f1", report.f1);
                write_json(out, &report)?;
            }
        }
        m.output("stats", out)?;
        m.write(out)?;
        Ok(())
    })
}

#[derive(Serialize)]
struct FrontierRow {
    series: String,
    normalized_auc: f64,
}

pub fn scaling(a: &ScalingArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let out = output(&a.common)?;
    let baseline = a
        .baseline
        .clone()
        .ok_or_else(|| Failure::Usage("--baseline is required".into()))?;
    let frontier = a.frontier.unwrap_or(false);
    let format = a.format.unwrap_or(Format::Json);
    if frontier && format == Format::Csv {
        return Err(Failure::Usage("frontier AUCs are written as JSON only".into()));
    }
    stage("scaling", || {
        let mut m = Manifest::new("scaling");
        m.param("baseline", &baseline)
            .param("filtered", &a.filtered)
            .param("frontier", frontier)
            .param("format", format);
        m.input("series", input)?;
        let file = File::open(input)?;
        if frontier {
            let all = read_frontier_csv(file)?;
            let base = all
                .iter()
                .find(|s| s.label == baseline)
                .ok_or_else(|| anyhow!("series {baseline:?} not found"))?;
            let rows = all
                .iter()
                .filter(|s| s.label != baseline && a.filtered.as_ref().is_none_or(|f| &s.label == f))
                .map(|s| {
                    Ok(FrontierRow {
                        series: s.label.clone(),
                        normalized_auc: frontier_auc(s, base)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if rows.is_empty() {
                bail!("no series to compare against {baseline:?}");
            }
            write_json(out, &rows)?;
        } else {
            let all = read_series_csv(file)?;
            let base = find_series(&all, &baseline)?;
            let targets: Vec<_> = match &a.filtered {
                Some(f) => vec![find_series(&all, f)?],
                None => all.iter().filter(|s| s.label != baseline).collect(),
            };
            if targets.is_empty() {
                bail!("no series to compare against {baseline:?}");
            }
            let reports = targets
                .into_iter()
                .map(|s| slowdown(base, s))
                .collect::<Result<Vec<_>, _>>()?;
            match format {
                Format::Json => write_json(out, &reports)?,
                Format::Csv => {
                    let f = BufWriter::new(File::create(out)?);
                    write_slowdown_csv(f, &reports)?;
                }
            }
        }
        m.output("report", out)?;
        m.write(out)?;
        Ok(())
    })
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let dir = output(&a.common)?;
    let seed = seed(&a.common);
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        seed,
        retain_vocab: a.retain_vocab.unwrap_or(defaults.retain_vocab),
        forget_vocab: a.forget_vocab.unwrap_or(defaults.forget_vocab),
        docs: a.docs.unwrap_or(1000),
        min_len: a.min_len.unwrap_or(defaults.min_len),
        max_len: a.max_len.unwrap_or(defaults.max_len),
        span_rate: a.span_rate.unwrap_or(defaults.span_rate),
        span_min: a.span_min.unwrap_or(defaults.span_min),
        span_max: a.span_max.unwrap_or(defaults.span_max),
        noise_sd: a.noise_sd.unwrap_or(0.0),
        feature_dim: a.feature_dim.unwrap_or(defaults.feature_dim),
        margin: a.margin.unwrap_or(defaults.margin),
    };
    let plan_defaults = ActivationPlan::default();
    let plan = ActivationPlan {
        latents: a.latents.unwrap_or(plan_defaults.latents),
        m_min: a.m_min.unwrap_or(plan_defaults.m_min),
        noise_sd: cfg.noise_sd,
        seed: derive_seed(seed, "activations"),
        ..plan_defaults
    };
    let weak_margin = a.weak_margin.unwrap_or(cfg.margin / 4.0);
    let exec = executor(&a.common);
    stage("synth", || {
        let cfg = match a.forget_fraction {
            Some(t) => cfg.with_target_forget_fraction(t)?,
            None => cfg,
        };
        cfg.validate()?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let corpus = gen_corpus(&cfg, &exec)?;
        let (records, latents) = gen_activations(&corpus.docs, &plan, &exec)?;
        let (strong, _) = gen_token_features(
            &corpus.docs,
            cfg.feature_dim,
            cfg.margin,
            derive_seed(seed, "features-strong"),
            &exec,
        )?;
        let (weak, _) = gen_token_features(
            &corpus.docs,
            cfg.feature_dim,
            weak_margin,
            derive_seed(seed, "features-weak"),
            &exec,
        )?;
        // a few merges over the "r<id> " / "f<id> " rendering
        let merges = MergeTable::byte_level(
            &[(b"r", b"1"), (b"f", b"1"), (b"0", b" "), (b"1", b" "), (b"r", b"2"), (b"f", b"2")],
            true,
        )?;
        let budgets: Vec<f64> = (0..7).map(|i| 10f64.powi(14 + i)).collect();
        let base = gen_scaling_series("baseline", 1.0, 0.1, &budgets, 0.0, seed)?;
        let shifted = gen_scaling_series("filtered", 10f64.powf(0.1), 0.1, &budgets, 0.0, seed)?;

        let files = [
            ("raw", dir.join("raw.jsonl")),
            ("planted", dir.join("planted.tkshard")),
            ("activations", dir.join("activations.jsonl")),
            ("latents", dir.join("latents.json")),
            ("features", dir.join("features.tkft")),
            ("features_weak", dir.join("features-weak.tkft")),
            ("merges", dir.join("merges.json")),
            ("scaling", dir.join("scaling.csv")),
        ];
        write_raw_jsonl(&files[0].1, &corpus.raw)?;
        write_shard(&files[1].1, &corpus.docs)?;
        write_activations_jsonl(&files[2].1, &records)?;
        write_json(&files[3].1, &latents)?;
        strong.save(&files[4].1)?;
        weak.save(&files[5].1)?;
        merges.save(&files[6].1)?;
        write_series_csv(BufWriter::new(File::create(&files[7].1)?), &[base, shifted])?;

        let mut m = Manifest::new("synth");
        m.param("corpus", &cfg).param("activations", plan).param("weak_margin", weak_margin);
        for (role, path) in &files {
            m.output(role, path)?;
        }
        m.summary("documents", corpus.docs.len())
            .summary("tokens", corpus.token_count())
            .summary("forget_fraction", corpus.forget_fraction())
            .summary("expected_forget_fraction", cfg.expected_forget_fraction());
        m.write(dir)?;
        Ok(())
    })
}

#[derive(Serialize)]
struct WeakToStrongReport {
    weak_train_rows: usize,
    relabel_rows: usize,
    eval_rows: usize,
    #[serde(flatten)]
    result: tokensieve::probe::WeakToStrong,
}

pub fn weak2strong(a: &WeakToStrongArgs) -> Result<(), Failure> {
    let input = require(a.common.input.as_ref(), "input")?;
    let strong = require(a.strong.as_ref(), "strong")?;
    let labels = require(a.labels.as_ref(), "labels")?;
    let out = output(&a.common)?;
    let weak_share = a.weak_share.unwrap_or(0.25);
    let eval_share = a.eval_share.unwrap_or(0.25);
    let lambda = a.lambda.unwrap_or(DEFAULT_LAMBDA);
    if !(weak_share > 0.0 && eval_share > 0.0 && weak_share + eval_share < 1.0) {
        return Err(Failure::Usage(
            "--weak-share and --eval-share must be positive and sum to less than 1".into(),
        ));
    }
    let seed = seed(&a.common);
    let exec = executor(&a.common);
    stage("weak2strong", || {
        let weak_x = FeatureMatrix::load(input)?;
        let strong_x = FeatureMatrix::load(strong)?;
        if weak_x.rows() != strong_x.rows() || weak_x.keys() != strong_x.keys() {
            bail!("weak and strong feature files list different rows");
        }
        let docs = read_shard(labels)?;
        let y = row_labels(&align_rows(&weak_x, &docs)?, &docs)?;
        let n = y.len();
        let (eval_rows, rest) = partition_rows(n, eval_share, seed)?;
        let (weak_pos, relabel_pos) =
            partition_rows(rest.len(), weak_share / (1.0 - eval_share), derive_seed(seed, "weak-split"))?;
        let weak_rows: Vec<usize> = weak_pos.iter().map(|&i| rest[i]).collect();
        let relabel_rows: Vec<usize> = relabel_pos.iter().map(|&i| rest[i]).collect();
        let pick = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<bool>>();
        let weak_train = weak_x.select(&weak_rows);
        let weak_train_labels = pick(&weak_rows);
        let relabel_weak = weak_x.select(&relabel_rows);
        let relabel_strong = strong_x.select(&relabel_rows);
        let eval_weak = weak_x.select(&eval_rows);
        let eval_strong = strong_x.select(&eval_rows);
        let eval_labels = pick(&eval_rows);
        let result = weak_to_strong(
            &WeakToStrongInput {
                weak_train: &weak_train,
                weak_train_labels: &weak_train_labels,
                relabel_weak: &relabel_weak,
                relabel_strong: &relabel_strong,
                eval_weak: &eval_weak,
                eval_strong: &eval_strong,
                eval_labels: &eval_labels,
                lambda,
            },
            &exec,
        )?;
        let report = WeakToStrongReport {
            weak_train_rows: weak_rows.len(),
            relabel_rows: relabel_rows.len(),
            eval_rows: eval_rows.len(),
            result,
        };
        write_json(out, &report)?;
        let mut m = Manifest::new("weak2strong");
        m.param("weak_share", weak_share)
            .param("eval_share", eval_share)
            .param("lambda", lambda)
            .param("seed", seed);
        m.input("weak", input)?.input("strong", strong)?.input("labels", labels)?;
        m.output("report", out)?;
        m.summary("weak_f1", report.result.weak_eval.f1)
            .summary("strong_f1", report.result.strong_eval.f1);
        m.write(out)?;
        Ok(())
    })
}
