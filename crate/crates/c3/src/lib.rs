//! Latent context compression with cascaded causal transformers.
//!
//! A small encoder transformer reads a token sequence plus a set of trainable
//! query vectors and emits a fixed number of latent vectors; a larger decoder
//! transformer reconstructs the original text from those latents and the
//! prompt "repeat the text: ". The crate ships the full desk-scale stack:
//! a reverse-mode autodiff tensor core, byte-level tokenizer, rotary-attention
//! transformer blocks with KV-cached generation, the cascade model itself,
//! an AdamW training loop with deterministic checkpointing, synthetic corpus
//! generation, and an edit-distance evaluation harness.

pub mod cascade;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
