//! Hierarchical video-to-speech toolkit: a content → timbre → prosody
//! conditioning encoder and an optimal-transport flow-matching mel decoder,
//! trained on a synthetic corpus with known generative factors.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the double-precision instantiation used by the tools.

pub mod diffcore;
mod error;
mod linalg;
mod scalar;
pub mod signal;
pub mod synthdata;
pub mod hierenc;
pub mod flowdec;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type AdamW = diffcore::AdamW<f64>;
pub type Waveform = signal::Waveform<f64>;
pub type MelSpectrogram = signal::MelSpectrogram<f64>;
