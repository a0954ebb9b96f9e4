//! Token-level pretraining data filtering.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`corpus`]: tokenized documents, a reference byte-pair encoder and the
//!   binary shard format.
//! - [`labeler`]: ground-truth token labels from sparse-autoencoder latent
//!   activations, coarse label propagation and label noise.
//! - [`remap`]: moving token labels between two tokenizations of one text.
//! - [`probe`]: linear probes trained with L-BFGS, evaluation and threshold
//!   calibration, weak-to-strong relabeling.
//! - [`filter`]: document dropping, loss masking and token removal.
//! - [`scaling`]: loss-matched compute slowdown and loss-frontier AUC.
//! - [`synthgen`]: planted-ground-truth generators used as test oracles.
//!
//! Document-parallel work goes through [`par::Executor`]. With the default
//! `parallel` feature it fans out over a rayon pool; without it every stage
//! runs sequentially. Output never depends on the number of workers.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod filter;
pub mod labeler;
pub mod par;
pub mod probe;
pub mod remap;
pub mod rng;
pub mod scaling;
pub mod synthgen;

pub use corpus::{MergeTable, RawDocument, Span, TokenizedDocument};
pub use par::Executor;
