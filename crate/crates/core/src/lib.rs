//! FiLM-conditioned U-Net segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a tape-based reverse-mode autodiff graph
//! * [`model`]: the metadata-driven FiLM generator and the FiLMed U-Net
//! * [`data`]: synthetic corpora, dataset files, subject splits and sampling
//! * [`train`]: Dice loss, Adam, cosine annealing, early stopping
//! * [`eval`]: Dice scoring, Wilcoxon signed-rank test, reports
//! * [`experiment`]: the repeated split/train/evaluate protocols
//! * [`verify`]: the gradient-check suite

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
