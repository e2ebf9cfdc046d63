use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mel::{MelSpectrogram, Waveform, N_MELS};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Writes 16-bit PCM, clipping to [-1, 1].
pub fn write_wav<S: Scalar>(path: &Path, w: &Waveform<S>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut out = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        out.write_sample(v).map_err(wav_err)?;
    }
    out.finalize().map_err(wav_err)
}

/// Reads a mono WAV (integer or float samples) into [-1, 1].
pub fn read_wav<S: Scalar>(path: &Path) -> Result<Waveform<S>> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Validation(format!("{}: expected mono audio", path.display())));
    }
    let samples: Vec<S> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| S::lit(v as f64 / scale)))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(|v| S::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
    };
    Waveform::new(samples, spec.sample_rate)
}

/// `frame,mel_0,…,mel_79`.
pub fn write_mel_csv<S: Scalar>(path: &Path, mel: &MelSpectrogram<S>) -> Result<()> {
    let mut s = String::from("frame");
    for m in 0..N_MELS {
        let _ = write!(s, ",mel_{m}");
    }
    s.push('\n');
    for t in 0..mel.num_frames() {
        let _ = write!(s, "{t}");
        for v in mel.frames.row(t) {
            let _ = write!(s, ",{}", v.as_f64());
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_mel_csv<S: Scalar>(path: &Path) -> Result<MelSpectrogram<S>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    if header.split(',').count() != N_MELS + 1 {
        return Err(Error::Format(format!("{}: expected {} columns", path.display(), N_MELS + 1)));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != N_MELS + 1 {
            return Err(Error::Format(format!("{}: line {} has {} fields", path.display(), i + 2, fields.len())));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {f:?} on line {}", path.display(), i + 2)))?;
            data.push(S::lit(v));
        }
        rows += 1;
    }
    MelSpectrogram::new(Tensor::matrix(rows, N_MELS, data)?)
}
