//! Desk-scale neural machine translation with an attention-based
//! encoder-decoder and a gated recurrent memory that adapts the attention
//! context to the decoding history.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`] — minimal reverse-mode differentiation over dense tensors
//! - [`nn`] — LSTM cell, embeddings, affine maps, dropout
//! - [`encoder`] — multi-layer bidirectional encoder plus the decoder bridge
//! - [`attention`] — global bilinear attention
//! - [`aca`] — the adaptive attention-control memory (remove/feed/update gates)
//! - [`model`] — the assembled translation model, loss, and checkpoints
//! - [`training`] — Adam, gradient clipping, the training loop
//! - [`decoding`] — greedy and beam search with length normalization
//! - [`evaluation`] — corpus BLEU, duplicate n-gram rates, length buckets
//! - [`data`] — vocabularies, batching, synthetic parallel tasks
//! - [`cli`] — the `acanmt` command-line entry points
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod aca;
pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod encoder;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod training;

pub use autodiff::{Scalar, Tensor};
