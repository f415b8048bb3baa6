//! Continual contrastive image-text pre-training at desk scale.
//!
//! A two-tower encoder is trained on a sequence of synthetic "modalities"
//! (stages), each a different generative map over class-structured latents.
//! Training on a new stage erodes the alignment learned for earlier ones;
//! this crate implements and measures the counter-strategies:
//!
//! * symmetric InfoNCE alignment over the batch similarity matrix,
//! * a fixed-size rehearsal buffer of representative image-text pairs
//!   selected by k-means over similarity-weighted joint embeddings,
//! * off-diagonal similarity distillation against a frozen previous-stage
//!   teacher (KL between row distributions, with corrupted teacher rows
//!   replaced by student rows),
//! * baseline strategies: sequential fine-tuning, reservoir-sampling
//!   replay, and herding (mean-of-features) exemplar selection.
//!
//! The whole stack is built on an in-crate reverse-mode tape so every loss
//! is finite-difference checkable, and every run is a pure function of its
//! configuration and seed.

pub mod alignment;
pub mod diffcore;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rehearsal;
pub mod rng;
pub mod stats;
pub mod synthstream;
pub mod verify;

pub use diffcore::{NodeId, OptimizerState, Tape, Tensor};
pub use error::{Error, Result};
pub use rng::Rng;
