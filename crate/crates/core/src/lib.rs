//! Region-based image captioning with geometric attention and
//! attention-on-attention gating.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`geometry`]: box-pair geometry, geometric attention weights and the AoA gate.
//! - [`model`]: encoder/decoder captioner, decoding and checkpoints.
//! - [`training`]: cross-entropy and self-critical training stages.
//! - [`metrics`]: BLEU, CIDEr and ROUGE-L.
//! - [`data`]: record files, vocabulary, splits and the synthetic shapes set.
//! - [`verify`]: self-checks of gradients, invariants and metrics.

pub mod autodiff;
pub mod data;
mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use data::{CaptionRecord, ImageRecord, Vocabulary};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{BoundingBox, GeometryConfig};
pub use model::{Checkpoint, ModelConfig};
pub use tensor::{Tensor, TensorError};
pub use training::TrainConfig;
