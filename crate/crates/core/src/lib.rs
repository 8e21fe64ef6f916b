//! Spectral reconstruction from RGB through a distilled hyperspectral latent
//! space.
//!
//! * [`tensor`]: dense `f64` tensors with reverse-mode gradients.
//! * [`teacher`]: per-pixel spectral autoencoder defining the latent space.
//! * [`student`]: RGB U-Net with channel attention predicting latent maps.
//! * [`training`]: the three-stage schedule (autoencoding, distillation,
//!   joint refinement) and the adaptive-moment optimizer.
//! * [`data`], [`metrics`], [`checkpoint`]: scenes, evaluation and file formats.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod params;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
