//! Set-based cross-modal embedding similarity.
//!
//! Each sample is represented by a small set of `K` embeddings rather than a
//! single vector. This crate provides the pieces needed to train and probe
//! such models at desk scale:
//!
//! - [`numgrad`]: a dense reverse-mode autodiff engine with a
//!   finite-difference checker.
//! - [`assign`]: exact maximum-weight assignment on `K x K` blocks.
//! - [`simset`]: MIL, smooth-Chamfer and max-matching set similarities.
//! - [`objectives`]: triplet, global-discriminative, intra-set divergence,
//!   diversity, MMD and InfoNCE losses.
//! - [`encoder`]: a toy slot-attention set predictor.
//! - [`synthdata`]: a seeded multi-aspect paired dataset and its file format.
//! - [`runner`]: training, retrieval evaluation and collapse diagnostics.

pub mod assign;
pub mod checks;
pub mod encoder;
mod error;
mod framing;
pub mod numgrad;
pub mod objectives;
pub mod runner;
pub mod simset;
pub mod synthdata;

pub use error::{Error, Result};
pub use numgrad::Matrix;
