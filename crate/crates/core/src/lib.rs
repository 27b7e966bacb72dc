//! Multimodal sequential recommendation engine.
//!
//! Image+text purchase histories are packed into prompts for a small two-tower
//! causal encoder. The encoder is trained with a mixed next-item generation and
//! contrastive objective through low-rank adapters, candidates are sampled
//! autoregressively, and an eager-scoring BM25 index fuses them into a ranked
//! list of catalog items for Recall/MRR/NDCG evaluation.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod io;
pub mod objective;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
