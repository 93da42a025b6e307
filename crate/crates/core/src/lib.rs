//! Attention-augmented invertible coupling flow for unsupervised anomaly
//! detection on spatial feature maps.
//!
//! The library trains a stack of two-sided affine coupling blocks by maximum
//! likelihood on normal samples only, scores anomalies per feature site from
//! the latent likelihood, and evaluates with image- and pixel-level AUROC.
//! Coupling subnets are small convolutional networks optionally gated by a
//! channel/spatial attention module; four wirings (`ca`, `ac`, `cac`, `cc`)
//! are selectable for ablation.
//!
//! Everything is generic over the element type: `f32` for training and
//! inference, `f64` for the verification suites. Batch loops run on rayon
//! when the `parallel` feature (default) is enabled and fall back to
//! sequential iteration otherwise; both paths produce bit-identical results.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod scalar;
pub mod subnet;
pub mod tensor;
pub mod train;
pub mod verify;

mod parallel;
pub mod rng;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{ConvKernel, Shape, Tensor};
