//! Spatial attention pyramid for unsupervised domain adaptation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, convolution/pooling/resize kernels and
//!   the binary tensor record format.
//! - [`autodiff`]: a reverse-mode tape over those kernels, including the
//!   gradient reversal node used for adversarial training.
//! - [`sap`]: the attention pyramid discriminator.
//! - [`tasknet`]: a small backbone and segmentation head plus the task and
//!   adversarial losses.
//! - [`train`]: Adam, the two-stage schedule, checkpoints and evaluation.
//! - [`data`]: the synthetic two-domain scene generator and PPM/PGM I/O.
//! - [`config`] and [`cli`]: the key=value run configuration and the
//!   command implementations behind the `sapnet` binary.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod layers;
pub mod sap;
pub mod tasknet;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
