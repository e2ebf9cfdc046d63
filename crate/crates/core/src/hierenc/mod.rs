//! Hierarchical visual encoder: lip, face-identity and expression streams are
//! turned into a mel-rate conditioning sequence through content, timbre and
//! prosody stages with teacher-forced attribute adapters.

mod blocks;
mod config;
mod encoder;

pub use blocks::{argmax_rows, ConvStack, Fusion, Mapper, MaskedPredictor, Predictor, WeightedLayerSum};
pub use config::{AblationFlags, EncoderConfig, EncoderDims};
pub use encoder::{
    encode, ContentOut, EncoderInput, EncoderLosses, EncoderTargets, EncoderTrace, HierEncoder, Mode, ProsodyOut,
    TimbreOut,
};
