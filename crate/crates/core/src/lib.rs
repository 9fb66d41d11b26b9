//! Any2Any: unified latent diffusion for arbitrary modality-to-modality
//! image translation.
//!
//! Per-modality variational codecs map images into a shared latent space,
//! a single transformer denoiser trained with clean-sample prediction
//! translates between modalities, and lightweight per-target adapters
//! refine decoded predictions. See the crate README for the full tour.

pub mod autodiff;
pub mod backbone;
pub mod calibration;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod registry;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
