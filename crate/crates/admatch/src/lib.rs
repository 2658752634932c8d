//! Query-ad matching pipeline: a three-class neural click model trained with
//! teacher-filtered augmented data, coupled to a compressed vector index for
//! weighted-cosine ad retrieval, plus the evaluation harness that compares
//! retrieval strategies against brute-force oracles.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`corpus`] — synthetic ad/query/user corpus and click-log generation
//! - [`teacher`] — relevance judging and low-relevance filtering
//! - [`click_model`] — two-tower embedding network with a 3-class softmax head
//! - [`active_loop`] — augment / filter / sample / train orchestration
//! - [`quantizer`] — k-means, product quantization, and rotation-optimized PQ
//! - [`retrieval`] — brute-force, cosine+re-rank, and weighted-MIPS search
//! - [`eval`] — AUC, relevance, coverage, latency, and serving simulation
//! - [`config`] — flat key=value run configuration shared by the CLI

pub mod active_loop;
pub mod click_model;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod quantizer;
pub mod retrieval;
pub mod teacher;

mod error;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
