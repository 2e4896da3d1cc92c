//! Video-text retrieval trained with sentence-, token- and fusion-level
//! contrastive losses and cascaded hard-negative sampling.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode graph and gradient checking.
//! - [`encoders`]: video, text and fusion self-attention stacks.
//! - [`toi`]: token-of-interest selection and IDF weighting.
//! - [`losses`]: sentence-, token- and fusion-level NCE losses.
//! - [`cascade`]: hard-negative selection for the fusion stage.
//! - [`eval`]: inference scoring and retrieval metrics.
//! - [`data`]: JSONL corpora and the planted-alignment generator.
//! - [`train`]: run configuration, optimizer, training and evaluation drivers.

pub mod error;
pub mod numerics;

pub mod cascade;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod losses;
pub mod toi;
pub mod train;

pub use error::{Error, Result};
