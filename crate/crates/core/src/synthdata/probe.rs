use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::signal::{MelSpectrogram, N_MELS};
use crate::Scalar;

/// Ridge regression from log-mel frames to the timbre feature stream. Pooling
/// its outputs over time gives an utterance-level voice embedding that can be
/// computed from any mel spectrogram, generated or not.
#[derive(Clone, Debug, PartialEq)]
pub struct TimbreProbe<S> {
    /// `[N_MELS + 1, D_t]`; the last row is the bias.
    pub weight: Tensor<S>,
}

impl<S: Scalar> TimbreProbe<S> {
    pub fn fit(pairs: &[(&MelSpectrogram<S>, &Tensor<S>)], ridge: f64) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Validation("probe needs at least one sample".into()))?;
        let dt = first.1.cols();
        let p = N_MELS + 1;
        let mut gram = vec![S::zero(); p * p];
        let mut rhs = vec![S::zero(); p * dt];
        let mut x = vec![S::one(); p];
        for (mel, target) in pairs {
            if target.rows() != mel.num_frames() || target.cols() != dt {
                return Err(Error::dim("TimbreProbe::fit", "target stream must be [T, D_t] aligned with the mel"));
            }
            for t in 0..mel.num_frames() {
                x[..N_MELS].copy_from_slice(mel.frames.row(t));
                for i in 0..p {
                    for j in 0..p {
                        gram[i * p + j] += x[i] * x[j];
                    }
                    for (r, &y) in rhs[i * dt..(i + 1) * dt].iter_mut().zip(target.row(t)) {
                        *r += x[i] * y;
                    }
                }
            }
        }
        for i in 0..N_MELS {
            gram[i * p + i] += S::lit(ridge);
        }
        let w = solve_spd(&gram, p, &rhs, dt)?;
        Ok(Self { weight: Tensor::matrix(p, dt, w)? })
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// Time-averaged probe output.
    pub fn embed(&self, mel: &MelSpectrogram<S>) -> Result<Vec<S>> {
        let w = self.weight.slice_rows(0, N_MELS)?;
        let out = mel.frames.matmul(&w)?;
        let bias = self.weight.row(N_MELS);
        Ok(out.mean_rows().iter().zip(bias).map(|(&m, &b)| m + b).collect())
    }
}
