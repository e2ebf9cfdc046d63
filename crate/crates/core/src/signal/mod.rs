//! Audio front end and acoustic metrics: log-mel analysis, YIN pitch,
//! Griffin-Lim inversion, and WAV/CSV I/O.

mod griffin_lim;
mod io;
mod mel;
mod metrics;
mod pitch;

pub use griffin_lim::{griffin_lim, GriffinLim, DEFAULT_ITERS};
pub use io::{read_mel_csv, read_wav, write_mel_csv, write_wav};
pub use mel::{
    energy, frame_count, hz_to_mel, log_mel, mel_center_frequencies, mel_filterbank, mel_to_hz,
    MelSpectrogram, Stft, Waveform, F_MAX, F_MIN, HOP, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE,
    WINDOW,
};
pub use metrics::{cosine_sim, mae_energy, rmse_f0};
pub use pitch::{estimate_pitch, standardize_pitch, PitchTrack, PITCH_MAX_HZ, PITCH_MIN_HZ, YIN_THRESHOLD};
