//! Differentiable grounding-guided referring video object segmentation at
//! desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: reverse-mode automatic differentiation over `f64` tensors.
//! - [`nn`]: parameter storage and the small building blocks shared by layers.
//! - [`attention`]: multi-head self/cross attention and deformable attention.
//! - [`frontend`]: toy image/text encoders, fusion block and FPN.
//! - [`decoder`]: query decoder with confidence-aware pruning and cost ledger.
//! - [`mask`]: box head and box-conditioned deformable mask decoder.
//! - [`temporal`]: memory tracker and cross-modal temporal decoder.
//! - [`matching`]: assignment solver, matching cost and training losses.
//! - [`metrics`]: trajectory selection and J / F region/contour metrics.
//! - [`harness`]: synthetic scenes, model assembly, training, evaluation, I/O.

pub mod attention;
pub mod decoder;
pub mod diff;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod temporal;

pub use error::{Error, Result};
