//! A desk-scale, fully differentiable encoder-decoder that turns a grid of
//! region features into a short textual report.
//!
//! The model couples three pieces:
//! - a region-relationship encoder whose self-attention carries an additive
//!   geometry bias and learnable memory slots,
//! - a decoder stack with pluggable encoder→decoder connection schemas
//!   (U-shaped, last-layer, one-to-one),
//! - an injected-knowledge distiller that, at every decoding position, attends
//!   over visual, clinical (symptom-graph) and contextual feature rows before
//!   the vocabulary projection.
//!
//! Everything runs on a small f64 tape-based autodiff engine (`tensor`), so
//! every gradient in the system can be checked against central finite
//! differences. The `corpus` module provides a synthetic cross-modal dataset
//! generator, `metrics` the text/label metrics, and `training` the optimizer,
//! loop and checkpoint format. The `kiut` binary exposes data generation,
//! training, evaluation and ablation sweeps.

pub mod attention;
pub mod corpus;
pub mod metrics;
pub mod training;
pub mod distiller;
pub mod knowledge;
pub mod model;

pub mod decoder;

pub mod encoder;
pub mod error;

pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor};
