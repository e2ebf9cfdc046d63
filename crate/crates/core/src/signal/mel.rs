use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 320;
pub const WINDOW: usize = 1280;
pub const N_FFT: usize = 1280;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
/// Mel energies are clamped to this value before the log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-scale mel energies, one `N_MELS`-wide row per hop.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<S> {
    pub frames: Tensor<S>,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn new(frames: Tensor<S>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != N_MELS {
            return Err(Error::dim("MelSpectrogram", format!("expected [T, {N_MELS}], got {:?}", frames.shape())));
        }
        frames.check_finite("mel spectrogram")?;
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// First `n` frames.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        Ok(Self { frames: self.frames.slice_rows(0, n)? })
    }
}

/// Frame count for `n` samples with centered frames: `floor(n / hop) + 1`.
pub fn frame_count(n_samples: usize) -> usize {
    n_samples / HOP + 1
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter.
pub fn mel_center_frequencies() -> Vec<f64> {
    let points = mel_points();
    points[1..=N_MELS].to_vec()
}

fn mel_points() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `[N_MELS, N_FFT/2 + 1]` matrix of unit-peak triangular filters on the HTK
/// mel scale.
pub fn mel_filterbank<S: Scalar>() -> Tensor<S> {
    let bins = N_FFT / 2 + 1;
    let pts = mel_points();
    let mut fb = Tensor::zeros(&[N_MELS, bins]);
    for m in 0..N_MELS {
        let (l, c, u) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let w = if f >= l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f <= u {
                (u - f) / (u - c)
            } else {
                0.0
            };
            if w > 0.0 {
                fb.set(m, k, S::lit(w));
            }
        }
    }
    fb
}

/// Index into `0..n` reflecting at both ends without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> Option<usize> {
    match n {
        0 => None,
        1 => Some(0),
        _ => {
            let period = 2 * (n as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= n as isize {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

/// Short-time Fourier analysis/synthesis with the fixed hop, window and
/// reflect-padded centering shared by the whole toolkit.
pub struct Stft<S: Scalar> {
    window: Vec<S>,
    forward: Arc<dyn Fft<S>>,
    inverse: Arc<dyn Fft<S>>,
    filterbank: Tensor<S>,
}

impl<S: Scalar> Default for Stft<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Stft<S> {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..WINDOW)
            .map(|j| S::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / WINDOW as f64).cos()))
            .collect();
        Self {
            window,
            forward: planner.plan_fft_forward(N_FFT),
            inverse: planner.plan_fft_inverse(N_FFT),
            filterbank: mel_filterbank(),
        }
    }

    pub fn filterbank(&self) -> &Tensor<S> {
        &self.filterbank
    }

    /// Complex spectra (`N_FFT/2 + 1` bins) for each centered frame.
    pub fn analyze(&self, samples: &[S]) -> Vec<Vec<Complex<S>>> {
        let n = samples.len();
        let frames = frame_count(n);
        let half = (WINDOW / 2) as isize;
        let bins = N_FFT / 2 + 1;
        let mut buf = vec![Complex::new(S::zero(), S::zero()); N_FFT];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * HOP) as isize - half;
            for (j, b) in buf.iter_mut().enumerate() {
                let v = reflect_index(start + j as isize, n).map_or(S::zero(), |i| samples[i]);
                *b = Complex::new(v * self.window[j], S::zero());
            }
            self.forward.process(&mut buf);
            out.push(buf[..bins].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`] producing `n` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex<S>>], n: usize) -> Vec<S> {
        let half = WINDOW / 2;
        let padded = n + 2 * half;
        let mut acc = vec![S::zero(); padded];
        let mut norm = vec![S::zero(); padded];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); N_FFT];
        let scale = S::one() / S::lit(N_FFT as f64);
        for (t, spec) in spectra.iter().enumerate() {
            // rebuild the Hermitian-symmetric full spectrum
            for k in 0..N_FFT {
                buf[k] = if k < spec.len() { spec[k] } else { spec[N_FFT - k].conj() };
            }
            self.inverse.process(&mut buf);
            let start = t * HOP;
            for j in 0..WINDOW {
                let p = start + j;
                if p >= padded {
                    break;
                }
                acc[p] += buf[j].re * scale * self.window[j];
                norm[p] += self.window[j] * self.window[j];
            }
        }
        let tiny = S::lit(1e-8);
        (0..n)
            .map(|i| {
                let p = i + half;
                if norm[p] > tiny {
                    acc[p] / norm[p]
                } else {
                    S::zero()
                }
            })
            .collect()
    }

    /// Linear mel energies from complex spectra.
    pub fn mel_from_spectra(&self, spectra: &[Vec<Complex<S>>]) -> Tensor<S> {
        let bins = N_FFT / 2 + 1;
        let mut mags = Vec::with_capacity(spectra.len() * bins);
        for s in spectra {
            mags.extend(s.iter().map(|c| c.norm()));
        }
        let mags = Tensor::matrix(spectra.len(), bins, mags).expect("sized");
        mags.matmul(&self.filterbank.transpose()).expect("bins match")
    }

    pub fn log_mel(&self, w: &Waveform<S>) -> Result<MelSpectrogram<S>> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::Validation(format!(
                "expected {SAMPLE_RATE} Hz audio, got {} Hz",
                w.sample_rate
            )));
        }
        let lin = self.mel_from_spectra(&self.analyze(&w.samples));
        let floor = S::lit(LOG_FLOOR);
        MelSpectrogram::new(lin.map(|v| v.max(floor).ln()))
    }
}

/// Log-mel spectrogram: Hann window 1280, hop 320, 80 HTK mel bands over
/// 0–8000 Hz, magnitudes clamped at 1e-5 before the natural log.
pub fn log_mel<S: Scalar>(w: &Waveform<S>) -> Result<MelSpectrogram<S>> {
    Stft::new().log_mel(w)
}

/// Per-frame L2 norm over mel bins.
pub fn energy<S: Scalar>(m: &MelSpectrogram<S>) -> Vec<S> {
    (0..m.num_frames())
        .map(|t| m.frames.row(t).iter().map(|&v| v * v).sum::<S>().sqrt())
        .collect()
}
