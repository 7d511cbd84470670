//! Sentence generation under lexical-complexity constraints.
//!
//! The pipeline: a graded lexicon assigns every word a complexity level; a
//! synthetic corpus generator produces graded sentences with keyword and
//! level annotations; a byte-pair tokenizer with a token-to-complexity table
//! bridges words and sub-words; a small encoder-decoder model consumes
//! keywords plus requested levels (optionally through learned complexity
//! embeddings) and emits a sentence; decoding strategies (greedy, masked,
//! beam) and an n-best reranker enforce or prefer the requested constraints;
//! metrics score keyword coverage, level accuracy and level recall.
//!
//! The `examples/` directory is the front door. Each file is a runnable
//! walkthrough of one capability:
//!
//! ```text
//! examples/
//!   build_language.rs   graded lexicon + synthetic corpus + dataset files
//!   tokenize.rs         BPE training, word-aligned encoding, complexity table
//!   train_tiny.rs       fit a small complexity-embedding model end to end
//!   generate.rs         greedy decoding with the complexity feedback loop
//!   masked_decoding.rs  vocabulary-masked decoding with a hard C2 guarantee
//!   beam_rerank.rs      length-normalized beam search + constraint reranking
//!   evaluate.rs         constraint and quality metrics over generations
//!   gradient_check.rs   finite-difference check of the analytic gradients
//! ```
//!
//! Run one with `cargo run --release --example build_language`. The same
//! capabilities are reachable from the thin `gradegen` binary (see
//! `cli::run`), which exists for shell pipelines.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod rerank;
pub mod tokenizer;
pub mod words;

pub use error::{Error, Result};
