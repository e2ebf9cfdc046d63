use std::f64::consts::PI;

use hierflow_core::diffcore::Tensor;
use hierflow_core::signal::*;
use hierflow_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sine(freq: f64, secs: f64, amp: f64) -> Waveform<f64> {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let samples = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect();
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

#[test]
fn silence_hits_the_log_floor() {
    let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
    let m = log_mel(&w).unwrap();
    assert_eq!(m.num_frames(), 51);
    let floor = LOG_FLOOR.ln();
    assert!(m.frames.data().iter().all(|&v| (v - floor).abs() < 1e-12));
}

#[test]
fn frame_count_matches_hop_rule() {
    for n in [0usize, 1, 319, 320, 321, 12_800, 15_999] {
        let w = Waveform::new(vec![0.0; n], SAMPLE_RATE).unwrap();
        assert_eq!(log_mel(&w).unwrap().num_frames(), n / HOP + 1, "n = {n}");
    }
}

#[test]
fn sine_peaks_at_nearest_band() {
    let m = log_mel(&sine(440.0, 1.0, 0.5)).unwrap();
    let centers = mel_center_frequencies();
    let expected = (0..N_MELS)
        .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
        .unwrap();
    for t in 5..m.num_frames() - 5 {
        let row = m.frames.row(t);
        let peak = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, expected, "frame {t}");
    }
}

#[test]
fn energy_is_row_norm() {
    let m = MelSpectrogram::new(Tensor::full(&[3, N_MELS], 1.0)).unwrap();
    for e in energy(&m) {
        assert!((e - 80f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn tracks_a_pure_tone() {
    let track = estimate_pitch(&sine(220.0, 1.0, 0.5));
    assert_eq!(track.len(), 51);
    let inner = &track.f0[3..48];
    assert!(track.voiced[3..48].iter().all(|&v| v));
    for f in inner {
        assert!((f - 220.0).abs() <= 3.0, "{f}");
    }
}

#[test]
fn tracks_the_search_range_edges() {
    for hz in [70.0, 480.0] {
        let track = estimate_pitch(&sine(hz, 0.5, 0.5));
        let mid = track.len() / 2;
        assert!(track.voiced[mid]);
        assert!((track.f0[mid] - hz).abs() / hz < 0.02, "{hz}: {}", track.f0[mid]);
    }
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let track = estimate_pitch(&Waveform::new(samples, SAMPLE_RATE).unwrap());
    assert!(track.voiced_fraction() < 0.2, "{}", track.voiced_fraction());
}

#[test]
fn silence_is_unvoiced() {
    let track = estimate_pitch(&Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap());
    assert!(track.voiced.iter().all(|&v| !v));
    assert!(track.f0.iter().all(|&f| f == 0.0));
}

#[test]
fn standardization() {
    let t = PitchTrack { f0: vec![100.0, 0.0, 200.0], voiced: vec![true, false, true] };
    assert_eq!(standardize_pitch(&t).unwrap(), vec![-1.0, 0.0, 1.0]);
    let flat = PitchTrack { f0: vec![200.0; 5], voiced: vec![true; 5] };
    assert_eq!(standardize_pitch(&flat).unwrap(), vec![0.0; 5]);
    let single = PitchTrack { f0: vec![0.0, 150.0], voiced: vec![false, true] };
    assert_eq!(standardize_pitch(&single).unwrap(), vec![0.0; 2]);
}

#[test]
fn griffin_lim_improves_with_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8000;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            0.3f64 * (2.0 * PI * 180.0 * t).sin() + 0.15 * (2.0 * PI * 360.0 * t).sin() + 0.01 * rng.random_range(-1.0..1.0)
        })
        .collect();
    let mel = log_mel(&Waveform::new(samples, SAMPLE_RATE).unwrap()).unwrap();
    let gl = GriffinLim::new().unwrap();
    let e1 = gl.reconstruction_error(&mel, &gl.reconstruct(&mel, 1).unwrap()).unwrap();
    let e60 = gl.reconstruction_error(&mel, &gl.reconstruct(&mel, 60).unwrap()).unwrap();
    assert!(e60 <= e1, "{e60} > {e1}");
    let w = gl.reconstruct(&mel, 1).unwrap();
    assert_eq!(w.len(), (mel.num_frames() - 1) * HOP);
}

#[test]
fn griffin_lim_of_floor_is_quiet() {
    let mel = MelSpectrogram::new(Tensor::full(&[20, N_MELS], LOG_FLOOR.ln())).unwrap();
    let w = griffin_lim(&mel, 10).unwrap();
    assert!(w.samples.iter().all(|s| s.abs() < 1e-2));
}

#[test]
fn griffin_lim_rejects_zero_iterations() {
    let mel = MelSpectrogram::new(Tensor::full(&[4, N_MELS], 0.0)).unwrap();
    assert!(matches!(griffin_lim(&mel, 0), Err(Error::Config(_))));
}

#[test]
fn metric_identities() {
    let a = PitchTrack { f0: vec![100.0, 200.0, 0.0], voiced: vec![true, true, false] };
    let b = PitchTrack { f0: vec![103.0, 196.0, 150.0], voiced: vec![true, true, true] };
    assert_eq!(rmse_f0(&a, &a).unwrap(), Some(0.0));
    assert!((rmse_f0(&a, &b).unwrap().unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    let none = PitchTrack { f0: vec![0.0; 3], voiced: vec![false; 3] };
    assert_eq!(rmse_f0(&a, &none).unwrap(), None);
    assert!(rmse_f0(&a, &PitchTrack { f0: vec![1.0], voiced: vec![true] }).is_err());

    assert!((cosine_sim(&[1.0f64, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(cosine_sim(&[1.0f64, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
    assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);

    let m = log_mel(&sine(300.0, 0.3, 0.4)).unwrap();
    assert_eq!(mae_energy(&m, &m).unwrap(), 0.0);
}

#[test]
fn wav_and_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let w = sine(330.0, 0.1, 0.5);
    let p = dir.path().join("a.wav");
    write_wav(&p, &w).unwrap();
    let r: Waveform<f64> = read_wav(&p).unwrap();
    assert_eq!(r.len(), w.len());
    assert!(r.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));

    let m = log_mel(&w).unwrap();
    let c = dir.path().join("m.csv");
    write_mel_csv(&c, &m).unwrap();
    let back: MelSpectrogram<f64> = read_mel_csv(&c).unwrap();
    assert_eq!(back, m);
}

#[test]
fn single_precision_agrees() {
    let w = sine(250.0, 0.2, 0.5);
    let w32 = Waveform::new(w.samples.iter().map(|&s| s as f32).collect(), SAMPLE_RATE).unwrap();
    let a = log_mel(&w).unwrap();
    let b = log_mel(&w32).unwrap();
    // bands far below the peak are dominated by single-precision leakage
    for (x, y) in a.frames.data().iter().zip(b.frames.data()).filter(|(x, _)| **x > -4.0) {
        assert!((x - *y as f64).abs() < 1e-2, "{x} vs {y}");
    }
}
