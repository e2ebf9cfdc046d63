use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-switch ablations; every flag on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub hier: bool,
    pub timbre_stage: bool,
    pub prosody_stage: bool,
    pub face_id: bool,
    pub expr: bool,
    pub weighted_sum: bool,
    pub masked_pred: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            hier: true,
            timbre_stage: true,
            prosody_stage: true,
            face_id: true,
            expr: true,
            weighted_sum: true,
            masked_pred: true,
        }
    }
}

impl AblationFlags {
    /// The full model followed by each single-flag ablation, with row labels.
    pub fn table() -> Vec<(&'static str, Self)> {
        let full = Self::default();
        vec![
            ("Ours", full),
            ("w/o Hier", Self { hier: false, ..full }),
            ("w/o Timbre", Self { timbre_stage: false, ..full }),
            ("w/o Prosody", Self { prosody_stage: false, ..full }),
            ("w/o Face ID", Self { face_id: false, ..full }),
            ("w/o FE", Self { expr: false, ..full }),
            ("w/o WS", Self { weighted_sum: false, ..full }),
            ("w/o MP", Self { masked_pred: false, ..full }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub mapper_layers: usize,
    pub final_layers: usize,
    pub conv_blocks: usize,
    pub kernel: usize,
    /// Weight of the one-hot term in the label-smoothed content loss.
    pub alpha: f64,
    #[serde(skip)]
    pub ablation: AblationFlags,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            mapper_layers: 1,
            final_layers: 1,
            conv_blocks: 2,
            kernel: 3,
            alpha: 0.9,
            ablation: AblationFlags::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config("dim must be a positive multiple of heads".into()));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd and >= 3, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// Input and target widths, fixed by the corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub lip_layers: usize,
    pub d_lip: usize,
    pub d_face: usize,
    pub d_expr: usize,
    pub d_timbre: usize,
    pub n_units: usize,
    pub n_mels: usize,
    /// Corpus energy mean and std used to normalize the energy pathway.
    pub energy_mean: f64,
    pub energy_std: f64,
}
