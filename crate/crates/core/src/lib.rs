//! Engine for reconstructing images from EEG: masked latent modeling of the
//! time branch, an FFT/recurrent frequency branch, time-frequency fusion,
//! semantic-interpolation alignment and a two-stage conditional diffusion
//! cascade, together with data formats, metrics and pipeline orchestration.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod freq;
pub mod lmm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
