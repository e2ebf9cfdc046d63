//! Optimal-transport conditional flow matching: the probability path, the
//! U-Net vector field, training losses and the guided Euler sampler.

mod config;
mod flow;
mod loss;
mod net;
mod sampler;

pub use config::{DecoderConfig, FlowConfig, Prior, SamplerConfig};
pub use flow::{gaussian, ot_flow, ot_target_field, sample_timestep, timestep_from_uniform};
pub use loss::{cfm_loss, encoder_nll_loss, total_loss, total_loss_var, CfmDraw, LossBreakdown};
pub use net::{Condition, ConditionalField, VectorFieldNet};
pub use sampler::{euler_from, euler_plain, euler_sample, initial_noise};
