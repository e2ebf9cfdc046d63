use super::mel::{energy, MelSpectrogram};
use super::pitch::PitchTrack;
use crate::error::{Error, Result};
use crate::Scalar;

/// RMSE in Hz over frames voiced in both tracks; `None` when no frame is.
pub fn rmse_f0<S: Scalar>(a: &PitchTrack<S>, b: &PitchTrack<S>) -> Result<Option<S>> {
    if a.len() != b.len() {
        return Err(Error::dim("rmse_f0", format!("{} vs {} frames", a.len(), b.len())));
    }
    let mut sum = S::zero();
    let mut n = 0usize;
    for i in 0..a.len() {
        if a.voiced[i] && b.voiced[i] {
            let e = a.f0[i] - b.f0[i];
            sum += e * e;
            n += 1;
        }
    }
    Ok((n > 0).then(|| (sum / S::lit(n as f64)).sqrt()))
}

/// Mean absolute difference of per-frame energies.
pub fn mae_energy<S: Scalar>(a: &MelSpectrogram<S>, b: &MelSpectrogram<S>) -> Result<S> {
    if a.num_frames() != b.num_frames() {
        return Err(Error::dim("mae_energy", format!("{} vs {} frames", a.num_frames(), b.num_frames())));
    }
    let (ea, eb) = (energy(a), energy(b));
    if ea.is_empty() {
        return Ok(S::zero());
    }
    let n = S::lit(ea.len() as f64);
    Ok(ea.iter().zip(&eb).map(|(&x, &y)| (x - y).abs()).sum::<S>() / n)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_sim<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Ok(S::zero());
    }
    Ok((dot / (na * nb)).max(-S::one()).min(S::one()))
}
