use super::mel::{frame_count, reflect_index, Waveform, HOP};
use crate::error::{Error, Result};
use crate::Scalar;

pub const PITCH_MIN_HZ: f64 = 60.0;
pub const PITCH_MAX_HZ: f64 = 500.0;
/// Threshold on the cumulative mean normalized difference.
pub const YIN_THRESHOLD: f64 = 0.15;
/// Integration window of the difference function, in samples.
pub const YIN_WINDOW: usize = 640;

/// Frame-aligned fundamental frequency; `f0` is zero where `voiced` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack<S> {
    pub f0: Vec<S>,
    pub voiced: Vec<bool>,
}

impl<S: Scalar> PitchTrack<S> {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }

    pub fn truncate(&mut self, n: usize) {
        self.f0.truncate(n);
        self.voiced.truncate(n);
    }
}

/// YIN pitch tracking aligned with the mel frames (one estimate per hop,
/// centered on the same sample).
pub fn estimate_pitch<S: Scalar>(w: &Waveform<S>) -> PitchTrack<S> {
    let sr = w.sample_rate as f64;
    let tau_min = (sr / PITCH_MAX_HZ).floor().max(2.0) as usize;
    let tau_max = (sr / PITCH_MIN_HZ).ceil() as usize;
    let n = w.samples.len();
    let frames = frame_count(n);
    let span = YIN_WINDOW + tau_max + 1;
    let mut seg = vec![S::zero(); span];
    let mut diff = vec![S::zero(); tau_max + 2];
    let mut f0 = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    let silence = S::lit(1e-10) * S::lit(YIN_WINDOW as f64);

    for t in 0..frames {
        let start = (t * HOP) as isize - (span / 2) as isize;
        for (j, s) in seg.iter_mut().enumerate() {
            *s = reflect_index(start + j as isize, n).map_or(S::zero(), |i| w.samples[i]);
        }
        let power: S = seg[..YIN_WINDOW].iter().map(|&v| v * v).sum();
        let est = if power <= silence { None } else { yin_frame(&seg, &mut diff, tau_min, tau_max) };
        match est.map(|tau| sr / tau) {
            Some(hz) if (PITCH_MIN_HZ..=PITCH_MAX_HZ).contains(&hz) => {
                f0.push(S::lit(hz));
                voiced.push(true);
            }
            _ => {
                f0.push(S::zero());
                voiced.push(false);
            }
        }
    }
    PitchTrack { f0, voiced }
}

/// Returns the refined period (in samples) or `None` when no dip falls below
/// the threshold.
fn yin_frame<S: Scalar>(seg: &[S], d: &mut [S], tau_min: usize, tau_max: usize) -> Option<f64> {
    let last = tau_max + 1;
    for tau in 1..=last {
        d[tau] = (0..YIN_WINDOW).map(|j| {
            let e = seg[j] - seg[j + tau];
            e * e
        }).sum();
    }
    // cumulative mean normalized difference
    d[0] = S::one();
    let mut running = S::zero();
    for tau in 1..=last {
        running += d[tau];
        d[tau] = if running > S::zero() { d[tau] * S::lit(tau as f64) / running } else { S::one() };
    }
    let thr = S::lit(YIN_THRESHOLD);
    let mut tau = tau_min;
    while tau <= tau_max {
        if d[tau] < thr {
            while tau < tau_max && d[tau + 1] < d[tau] {
                tau += 1;
            }
            let (a, b, c) = (d[tau - 1].as_f64(), d[tau].as_f64(), d[tau + 1].as_f64());
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            return Some(tau as f64 + shift.clamp(-1.0, 1.0));
        }
        tau += 1;
    }
    None
}

/// Per-utterance z-score of voiced frames; unvoiced frames map to 0, and a
/// contour with fewer than two voiced frames or zero spread maps to all zeros.
pub fn standardize_pitch<S: Scalar>(track: &PitchTrack<S>) -> Result<Vec<S>> {
    if track.f0.len() != track.voiced.len() {
        return Err(Error::dim("standardize_pitch", "f0 and voicing lengths differ"));
    }
    let vals: Vec<S> = track.f0.iter().zip(&track.voiced).filter(|(_, &v)| v).map(|(&f, _)| f).collect();
    let mut out = vec![S::zero(); track.f0.len()];
    if vals.len() < 2 {
        return Ok(out);
    }
    let n = S::lit(vals.len() as f64);
    let mean = vals.iter().copied().sum::<S>() / n;
    let var = vals.iter().map(|&f| (f - mean) * (f - mean)).sum::<S>() / n;
    let std = var.sqrt();
    if std <= S::epsilon() * mean.abs().max(S::one()) {
        return Ok(out);
    }
    for (o, (&f, &v)) in out.iter_mut().zip(track.f0.iter().zip(&track.voiced)) {
        if v {
            *o = (f - mean) / std;
        }
    }
    Ok(out)
}
