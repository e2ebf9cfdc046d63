use rustfft::num_complex::Complex;

use super::mel::{MelSpectrogram, Stft, Waveform, HOP, N_FFT, N_MELS, SAMPLE_RATE};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::Scalar;

pub const DEFAULT_ITERS: usize = 60;

/// Phase reconstruction from a log-mel spectrogram. Linear magnitudes come
/// from the filterbank pseudo-inverse (clamped at zero); phase starts at zero
/// and is refined by alternating projections.
pub struct GriffinLim<S: Scalar> {
    stft: Stft<S>,
    /// `[N_MELS, bins]`, maps mel energies to linear magnitudes row-wise.
    pinv_t: Tensor<S>,
}

impl<S: Scalar> GriffinLim<S> {
    pub fn new() -> Result<Self> {
        let stft = Stft::new();
        let fb = stft.filterbank();
        let bins = N_FFT / 2 + 1;
        let gram = fb.matmul(&fb.transpose())?;
        // (fb fbᵀ)⁻¹ fb, i.e. the transposed pseudo-inverse
        let pinv_t = solve_spd(gram.data(), N_MELS, fb.data(), bins)?;
        Ok(Self { pinv_t: Tensor::matrix(N_MELS, bins, pinv_t)?, stft })
    }

    pub fn stft(&self) -> &Stft<S> {
        &self.stft
    }

    fn magnitudes(&self, mel: &MelSpectrogram<S>) -> Result<Tensor<S>> {
        let lin = mel.frames.map(|v| v.exp());
        Ok(lin.matmul(&self.pinv_t)?.map(|v| v.max(S::zero())))
    }

    pub fn reconstruct(&self, mel: &MelSpectrogram<S>, iters: usize) -> Result<Waveform<S>> {
        if iters < 1 {
            return Err(Error::Config("griffin-lim needs at least one iteration".into()));
        }
        let frames = mel.num_frames();
        let n = frames.saturating_sub(1) * HOP;
        let mags = self.magnitudes(mel)?;
        let mut spectra: Vec<Vec<Complex<S>>> = (0..frames)
            .map(|t| mags.row(t).iter().map(|&m| Complex::new(m, S::zero())).collect())
            .collect();
        let mut x = self.stft.synthesize(&spectra, n);
        for _ in 0..iters {
            let est = self.stft.analyze(&x);
            for (t, (row, e)) in spectra.iter_mut().zip(&est).enumerate() {
                for (k, (c, z)) in row.iter_mut().zip(e).enumerate() {
                    let m = mags.get(t, k);
                    let r = z.norm();
                    *c = if r > S::zero() { *z * (m / r) } else { Complex::new(m, S::zero()) };
                }
            }
            x = self.stft.synthesize(&spectra, n);
        }
        Waveform::new(x, SAMPLE_RATE)
    }

    /// Frobenius distance between `mel` and the log-mel of `wave`, over the
    /// frames both share.
    pub fn reconstruction_error(&self, mel: &MelSpectrogram<S>, wave: &Waveform<S>) -> Result<S> {
        let re = self.stft.log_mel(wave)?;
        let t = re.num_frames().min(mel.num_frames());
        let a = re.truncate(t)?;
        let b = mel.truncate(t)?;
        Ok(a.frames.zip_map(&b.frames, |x, y| x - y)?.norm())
    }
}

pub fn griffin_lim<S: Scalar>(mel: &MelSpectrogram<S>, iters: usize) -> Result<Waveform<S>> {
    GriffinLim::new()?.reconstruct(mel, iters)
}
