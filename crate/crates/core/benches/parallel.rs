//! Sequential executor against the worker pool on the document-parallel
//! stages. Without the `parallel` feature both arms run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tokensieve::filter::{mask_tokens, remove_tokens};
use tokensieve::labeler::{group_activations, label_corpus, LabelingParams};
use tokensieve::probe::{logistic_objective, score, train_probe_with, Lbfgs};
use tokensieve::synthgen::{gen_activations, gen_corpus, gen_token_features, ActivationPlan, SynthConfig};
use tokensieve::{Executor, TokenizedDocument};

/// The pool arm always gets at least two workers so that it goes through
/// the pool even on a single-core machine.
fn executors() -> Vec<(&'static str, Executor)> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", Executor::sequential()), ("pool", Executor::new(cores.max(2)))]
}

fn config() -> SynthConfig {
    SynthConfig {
        docs: 4000,
        seed: 1,
        span_rate: 0.05,
        ..Default::default()
    }
}

fn bench_synth(c: &mut Criterion) {
    let cfg = config();
    let mut g = c.benchmark_group("gen_corpus");
    for (name, exec) in executors() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| gen_corpus(&cfg, &exec).unwrap()));
    }
    g.finish();
}

fn bench_label(c: &mut Criterion) {
    let seq = Executor::sequential();
    let corpus = gen_corpus(&config(), &seq).unwrap();
    let (recs, latents) = gen_activations(&corpus.docs, &ActivationPlan::default(), &seq).unwrap();
    let acts = group_activations(&corpus.docs, &recs).unwrap();
    let params = LabelingParams::default();
    let mut g = c.benchmark_group("label_corpus");
    for (name, exec) in executors() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| label_corpus(&corpus.docs, &acts, &latents, &params, &exec).unwrap())
        });
    }
    g.finish();
}

fn bench_probe(c: &mut Criterion) {
    let seq = Executor::sequential();
    let corpus = gen_corpus(&config(), &seq).unwrap();
    let (x, y) = gen_token_features(&corpus.docs, 16, 4.0, 2, &seq).unwrap();
    let mut params = vec![0.01; x.dim() + 1];
    params[x.dim()] = 0.0;
    let mut grad = vec![0.0; x.dim() + 1];
    let probe = train_probe_with(&x, &y, 1e-4, &seq, &Lbfgs::default()).unwrap().probe;

    let mut g = c.benchmark_group("logistic_objective");
    for (name, exec) in executors() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| logistic_objective(&x, &y, 1e-4, &params, &mut grad, &exec))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("score");
    for (name, exec) in executors() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| score(&probe, &x, &exec).unwrap()));
    }
    g.finish();
}

fn bench_filter(c: &mut Criterion) {
    let cfg = config();
    let corpus = gen_corpus(&cfg, &Executor::sequential()).unwrap();
    let docs: Vec<TokenizedDocument> = corpus
        .docs
        .iter()
        .map(|d| {
            let s = d.forget_labels().unwrap().iter().map(|&f| if f { 0.9 } else { 0.1 }).collect();
            d.clone().with_scores(s)
        })
        .collect();
    let mut g = c.benchmark_group("filter");
    for (name, exec) in executors() {
        g.bench_function(BenchmarkId::new("mask", name), |b| b.iter(|| mask_tokens(&docs, 0.5, &exec).unwrap()));
        g.bench_function(BenchmarkId::new("removal", name), |b| {
            b.iter(|| remove_tokens(&docs, 0.5, cfg.hidden_id(), &exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_synth, bench_label, bench_probe, bench_filter);
criterion_main!(benches);
