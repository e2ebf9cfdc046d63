use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the flow starts: `N(0, I)` or `N(μ, I)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    #[default]
    Standard,
    MuCentered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
    /// Probability of replacing the condition by the learned null condition.
    pub cfg_drop_prob: f64,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub lambda_p: f64,
    pub cosine_schedule: bool,
    pub prior: Prior,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            cfg_drop_prob: 0.1,
            lambda_c: 0.5,
            lambda_t: 0.5,
            lambda_p: 0.5,
            cosine_schedule: true,
            prior: Prior::Standard,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config(format!("sigma_min must be in (0, 1), got {}", self.sigma_min)));
        }
        if !(0.0..1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::Config(format!("cfg_drop_prob must be in [0, 1), got {}", self.cfg_drop_prob)));
        }
        if [self.lambda_c, self.lambda_t, self.lambda_p].iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale β.
    pub beta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 10, beta: 0.7, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("guidance scale must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// U-Net widths and attention settings of the vector-field network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels at full and half time resolution.
    pub channels: [usize; 2],
    pub heads: usize,
    pub time_dim: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: [64, 128], heads: 4, time_dim: 64, kernel: 3 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [c1, c2] = self.channels;
        if c1 == 0 || c2 == 0 || self.heads == 0 || c2 % self.heads != 0 {
            return Err(Error::Config("decoder channels must be positive and divisible by heads".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and >= 2".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("decoder kernel must be odd".into()));
        }
        Ok(())
    }
}
