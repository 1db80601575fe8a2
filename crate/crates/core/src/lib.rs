//! Core library for a graph-based speech emotion recognizer.
//!
//! An utterance arrives as a sequence of per-frame acoustic feature vectors.
//! The model segments it into fixed-length windows, treats every frame as a
//! graph node on a cycle, encodes temporal context with a bidirectional GRU,
//! refines node embeddings with a stack of weighted multi-aggregator GIN
//! layers (one of which is fully adjacent), pools stage-wise logits from
//! several read-out heads, and trains all stages jointly with a weighted
//! multi-stage cross-entropy loss.
//!
//! The crate is `no_std` (with `alloc`); everything that touches files or a
//! terminal lives in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod fmath;

pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod wma;

pub use graph::{build_adjacency, segment_utterance, AdjacencyKind, FrameGraph, UtteranceFeatures};
pub use model::{model_forward, ModelConfig, ModelParams, StageLogits};
pub use tensor::{Tape, Tensor, TensorError, ValueId};
pub use trainer::{cross_validate, evaluate, train, EvalReport, TrainConfig};
