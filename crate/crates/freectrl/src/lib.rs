//! Learning-free controllable text generation by adaptive re-weighting of
//! transformer feedforward value vectors.
//!
//! The crate loads GPT-2 layout checkpoints, profiles how individual
//! feedforward value vectors reshape the output distribution as their weight
//! grows, builds per-attribute control centers from the vectors that promote
//! attribute keywords, and steers generation through a monitor / adapt /
//! filter loop. An evaluation harness covers diversity, self-perplexity,
//! embedding-based attribute relevance, and an optional remote toxicity
//! scorer.

pub mod atlas;
pub mod control;
pub mod data;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod model;
pub mod steer;
pub mod testkit;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{
    load_checkpoint, softmax_distribution, KvCache, Model, ModelConfig, OutputDistribution,
    SteeringSet, ValueVectorRef,
};
pub use tokenizer::{BpeVocab, PositionHint};
