//! Side-information-aware abstractive summarization.
//!
//! A document plus one optional side channel (text or precomputed visual
//! feature vectors) are summarized by a pipeline of: a unified topic model
//! over bag-of-words/feature inputs, a topic-aware graph encoder that routes
//! information between document, side, and topic nodes, a topic-guided
//! decoder with beam search, and a triplet contrastive alignment objective.
//! Everything runs on a from-scratch f64 reverse-mode autodiff, so gradients
//! are verifiable against finite differences.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod utm;

pub use tensor::Tensor;
