//! Encoder-decoder segmentation with learnable multi-scale attention skip
//! connections.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff.
//! * [`embedding`]: patch tokenization of the four encoder scales and the
//!   inverse reconstruction.
//! * [`dat`]: the dual attention transformer (channel-wise fusion attention,
//!   spatial-wise selection attention, residual MLPs).
//! * [`dra`]: decoder-guided recalibration attention and decoder fusion.
//! * [`segnet`]: the assembled network with pluggable skip strategies.
//! * [`train`]: losses, metrics, Adam, cosine schedule, k-fold training.
//! * [`data`]: synthetic data, PGM/PPM I/O and augmentation.
//! * [`experiment`]: config-driven runs and ablation suites.

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod dat;
pub mod dra;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod params;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
