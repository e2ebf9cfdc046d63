use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_fit, KMeansModel};
use super::probe::TimbreProbe;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::signal::{
    energy, estimate_pitch, standardize_pitch, MelSpectrogram, PitchTrack, Stft, Waveform, SAMPLE_RATE,
};
use crate::Scalar;

/// Audio samples per video frame (25 fps at 16 kHz); two mel hops.
pub const SAMPLES_PER_VIDEO_FRAME: usize = 640;
const HARMONIC_CEILING_HZ: f64 = 7600.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_samples: usize,
    /// Leading samples reserved for evaluation.
    pub n_eval: usize,
    pub k_units: usize,
    pub kmeans_k: usize,
    pub n_layers: usize,
    pub d_lip: usize,
    pub d_face: usize,
    pub d_expr: usize,
    pub d_speaker: usize,
    pub d_timbre: usize,
    pub d_content: usize,
    pub n_speakers: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Noise on the first lip layer; layer ℓ gets `lip_noise · (L − ℓ) / L`.
    pub lip_noise: f64,
    pub face_noise: f64,
    pub expr_noise: f64,
    pub content_noise: f64,
    pub timbre_noise: f64,
    pub probe_ridge: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            n_eval: 8,
            k_units: 16,
            kmeans_k: 32,
            n_layers: 4,
            d_lip: 16,
            d_face: 8,
            d_expr: 16,
            d_speaker: 8,
            d_timbre: 16,
            d_content: 16,
            n_speakers: 8,
            min_frames: 24,
            max_frames: 48,
            lip_noise: 0.4,
            face_noise: 0.05,
            expr_noise: 0.05,
            content_noise: 0.1,
            timbre_noise: 0.1,
            probe_ridge: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn noiseless(mut self) -> Self {
        self.lip_noise = 0.0;
        self.face_noise = 0.0;
        self.expr_noise = 0.0;
        self.content_noise = 0.0;
        self.timbre_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1");
        }
        if self.n_eval >= self.n_samples && self.n_samples > 1 {
            return bad("n_eval must leave at least one training sample");
        }
        if self.k_units < 2 || self.kmeans_k < 2 {
            return bad("k_units and kmeans_k must be at least 2");
        }
        if self.n_layers < 1 || self.n_speakers < 1 {
            return bad("n_layers and n_speakers must be positive");
        }
        if [self.d_lip, self.d_face, self.d_expr, self.d_timbre, self.d_content].contains(&0) || self.d_speaker < 3 {
            return bad("feature dims must be positive and d_speaker >= 3");
        }
        if self.min_frames < 4 || self.max_frames < self.min_frames {
            return bad("need 4 <= min_frames <= max_frames");
        }
        let noises = [self.lip_noise, self.face_noise, self.expr_noise, self.content_noise, self.timbre_noise];
        if noises.iter().any(|n| !n.is_finite() || *n < 0.0) || !(self.probe_ridge >= 0.0) {
            return bad("noise levels and probe_ridge must be finite and non-negative");
        }
        Ok(())
    }

    pub fn lip_noise_at(&self, layer: usize) -> f64 {
        self.lip_noise * (self.n_layers - layer) as f64 / self.n_layers as f64
    }
}

/// Ground-truth generative factors of one clip, at video rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactors<S> {
    pub unit_seq: Vec<usize>,
    pub speaker: usize,
    pub speaker_vec: Vec<S>,
    pub pitch_curve: Vec<S>,
    pub energy_curve: Vec<S>,
}

impl<S: Scalar> LatentFactors<S> {
    pub fn duration(&self) -> usize {
        self.unit_seq.len()
    }

    pub fn mel_frames(&self) -> usize {
        2 * self.duration()
    }

    /// Unit active at a mel frame.
    pub fn unit_at_mel(&self, t: usize) -> usize {
        self.unit_seq[t / 2]
    }

    /// Pitch curve interpolated to the center of a mel frame, on the same
    /// schedule the synthesizer uses.
    pub fn pitch_at_mel(&self, t: usize) -> S {
        S::lit(interp(&self.pitch_curve, (t * 320) as f64))
    }
}

/// Linear interpolation of a video-rate curve at an audio sample index; video
/// frame `v` is anchored at its center sample.
fn interp<S: Scalar>(curve: &[S], sample: f64) -> f64 {
    let p = ((sample - 320.0) / SAMPLES_PER_VIDEO_FRAME as f64).clamp(0.0, (curve.len() - 1) as f64);
    let i = p.floor() as usize;
    let j = (i + 1).min(curve.len() - 1);
    let f = p - i as f64;
    curve[i].as_f64() * (1.0 - f) + curve[j].as_f64() * f
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTargets<S> {
    pub content_units: Vec<usize>,
    pub timbre_vec: Vec<S>,
    /// Standardized per utterance; zero on unvoiced frames.
    pub pitch: Vec<S>,
    pub energy: Vec<S>,
    /// Raw pitch track of the sample audio.
    pub f0: PitchTrack<S>,
}

impl<S: Scalar> AttributeTargets<S> {
    pub fn len(&self) -> usize {
        self.content_units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content_units.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<S> {
    pub id: String,
    pub factors: LatentFactors<S>,
    pub audio: Waveform<S>,
    /// Log-mel of `audio`, trimmed to two frames per video frame.
    pub mel: MelSpectrogram<S>,
    /// `L` matrices of `[T_video, D_l]`.
    pub lip_layers: Vec<Tensor<S>>,
    pub face_id: Vec<S>,
    /// `[T_video, D_e]`.
    pub expr_feats: Tensor<S>,
    /// Mel-rate acoustic stream quantized into content units, `[T_mel, D_c]`.
    pub content_stream: Tensor<S>,
    /// Mel-rate stream whose time average is the timbre target, `[T_mel, D_t]`.
    pub timbre_stream: Tensor<S>,
    pub targets: Option<AttributeTargets<S>>,
}

impl<S: Scalar> SyntheticSample<S> {
    pub fn video_frames(&self) -> usize {
        self.factors.duration()
    }

    pub fn mel_frames(&self) -> usize {
        self.mel.num_frames()
    }

    pub fn targets(&self) -> Result<&AttributeTargets<S>> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("sample {} has no targets", self.id)))
    }
}

/// Corpus-wide hidden parameters: every mixing matrix, unit formants and the
/// speaker pool. Drawn from a dedicated stream of the corpus seed.
struct World {
    lip: Vec<(Vec<f64>, Vec<f64>)>,
    face: (Vec<f64>, Vec<f64>),
    expr: (Vec<f64>, Vec<f64>),
    content: (Vec<f64>, Vec<f64>),
    timbre: Vec<f64>,
    formants: Vec<(f64, f64)>,
    loudness: Vec<f64>,
    speakers: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl World {
    fn new(seed: u64, cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut affine = |rows: usize, cols: usize| {
            let s = 1.0 / (cols as f64).sqrt();
            (gaussian(&mut rng, rows * cols, s), gaussian(&mut rng, rows, 0.1))
        };
        let ku = cfg.k_units;
        let lip = (0..cfg.n_layers).map(|_| affine(cfg.d_lip, ku)).collect();
        let face = affine(cfg.d_face, cfg.d_speaker);
        let expr = affine(cfg.d_expr, 2);
        let content = affine(cfg.d_content, ku);
        let timbre = affine(cfg.d_timbre, cfg.d_speaker).0;
        let formants = (0..ku)
            .map(|_| (rng.random_range(300.0..850.0), rng.random_range(950.0..2600.0)))
            .collect();
        let loudness = (0..ku).map(|_| rng.random_range(-1.0..1.0)).collect();
        let speakers = (0..cfg.n_speakers).map(|_| gaussian(&mut rng, cfg.d_speaker, 1.0)).collect();
        Self { lip, face, expr, content, timbre, formants, loudness, speakers }
    }
}

/// `W x + b` for a row-major `W` of `[out, in]`.
fn apply(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    (0..w.len() / d_in)
        .map(|r| w[r * d_in..(r + 1) * d_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b[r]))
        .collect()
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

fn noisy_rows<S: Scalar>(rows: Vec<Vec<f64>>, noise: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let t = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let data = rows
        .into_iter()
        .flatten()
        .map(|v| S::lit(v + if noise > 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 }))
        .collect();
    Tensor::matrix(t, d, data).expect("sized")
}

struct Voice {
    base_hz: f64,
    tilt: f64,
    formant_scale: f64,
    /// Speaker-specific high resonance (center, gain).
    f3: (f64, f64),
}

fn speaker_voice(s: &[f64]) -> Voice {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    Voice {
        base_hz: 150.0 + 40.0 * s[0].tanh(),
        tilt: 0.72 + 0.12 * s[1].tanh(),
        formant_scale: 1.0 + 0.1 * s[2].tanh(),
        f3: (
            2900.0 + 500.0 * s.get(3).copied().unwrap_or(0.0).tanh(),
            0.2 + 0.6 * sig(s.get(4).copied().unwrap_or(0.0)),
        ),
    }
}

fn synthesize(f: &LatentFactors<f64>, world: &World) -> Vec<f64> {
    let tv = f.duration();
    let voice = speaker_voice(&f.speaker_vec);
    let (tilt, fscale, (f3, g3)) = (voice.tilt, voice.formant_scale, voice.f3);
    let max_h = (HARMONIC_CEILING_HZ / 60.0) as usize;
    // harmonic amplitudes per video frame, normalized to unit sum
    let table: Vec<Vec<f64>> = (0..tv)
        .map(|v| {
            let (f1, f2) = world.formants[f.unit_seq[v]];
            let (f1, f2) = (f1 * fscale, f2 * fscale);
            let f0 = f.pitch_curve[v];
            let mut amps: Vec<f64> = (1..=max_h)
                .map(|h| {
                    let hz = h as f64 * f0;
                    if hz >= HARMONIC_CEILING_HZ {
                        return 0.0;
                    }
                    let bump = |c: f64, bw: f64| (-0.5 * ((hz - c) / bw).powi(2)).exp();
                    tilt.powi(h as i32 - 1) * (0.4 + bump(f1, 120.0) + 0.7 * bump(f2, 180.0) + g3 * bump(f3, 250.0) / tilt.powi(8))
                })
                .collect();
            amps[0] += 1.0;
            let total: f64 = amps.iter().sum();
            amps.iter_mut().for_each(|a| *a /= total);
            amps
        })
        .collect();
    let n = tv * SAMPLES_PER_VIDEO_FRAME;
    let sr = SAMPLE_RATE as f64;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = interp(&f.pitch_curve, i as f64);
        let amp = 0.6 * interp(&f.energy_curve, i as f64);
        let p = ((i as f64 - 320.0) / SAMPLES_PER_VIDEO_FRAME as f64).clamp(0.0, (tv - 1) as f64);
        let (a, b) = (p.floor() as usize, (p.floor() as usize + 1).min(tv - 1));
        let w = p - a as f64;
        let mut s = 0.0;
        for h in 1..=max_h {
            if h as f64 * f0 >= HARMONIC_CEILING_HZ {
                break;
            }
            let g = table[a][h - 1] * (1.0 - w) + table[b][h - 1] * w;
            s += g * (h as f64 * phase).sin();
        }
        out.push(amp * s);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
    }
    out
}

fn factors(rng: &mut ChaCha8Rng, cfg: &CorpusConfig, world: &World) -> LatentFactors<f64> {
    let tv = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let mut unit_seq = Vec::with_capacity(tv);
    while unit_seq.len() < tv {
        let u = rng.random_range(0..cfg.k_units);
        let len = rng.random_range(2..=4);
        unit_seq.extend(std::iter::repeat_n(u, len));
    }
    unit_seq.truncate(tv);
    let speaker = rng.random_range(0..cfg.n_speakers);
    let speaker_vec = world.speakers[speaker].clone();
    let base = speaker_voice(&speaker_vec).base_hz;
    let (rate, phase) = (rng.random_range(0.4..1.2), rng.random_range(0.0..2.0 * PI));
    let (rate2, phase2) = (rng.random_range(1.0..2.0), rng.random_range(0.0..2.0 * PI));
    let pitch_curve = (0..tv)
        .map(|v| {
            let t = v as f64 / 25.0;
            base * (1.0 + 0.06 * (2.0 * PI * rate * t + phase).sin() + 0.02 * (2.0 * PI * rate2 * t + phase2).sin())
        })
        .collect();
    let (erate, ephase) = (rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI));
    let energy_curve = (0..tv)
        .map(|v| {
            let t = v as f64 / 25.0;
            let e = 0.55 + 0.2 * world.loudness[unit_seq[v]] + 0.15 * (2.0 * PI * erate * t + ephase).sin();
            e.clamp(0.15, 1.0)
        })
        .collect();
    LatentFactors { unit_seq, speaker, speaker_vec, pitch_curve, energy_curve }
}

fn cast_factors<S: Scalar>(f: LatentFactors<f64>) -> LatentFactors<S> {
    let c = |v: Vec<f64>| v.into_iter().map(S::lit).collect();
    LatentFactors {
        unit_seq: f.unit_seq,
        speaker: f.speaker,
        speaker_vec: c(f.speaker_vec),
        pitch_curve: c(f.pitch_curve),
        energy_curve: c(f.energy_curve),
    }
}

fn gen_sample<S: Scalar>(seed: u64, index: usize, cfg: &CorpusConfig, world: &World, stft: &Stft<S>) -> Result<SyntheticSample<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let f = factors(&mut rng, cfg, world);
    let tv = f.duration();
    let audio = Waveform::new(synthesize(&f, world).into_iter().map(S::lit).collect(), SAMPLE_RATE)?;
    let mel = stft.log_mel(&audio)?.truncate(2 * tv)?;

    let lip_layers = world
        .lip
        .iter()
        .enumerate()
        .map(|(l, (w, b))| {
            let rows = f.unit_seq.iter().map(|&u| apply(w, Some(b), &one_hot(u, cfg.k_units))).collect();
            noisy_rows(rows, cfg.lip_noise_at(l), &mut rng)
        })
        .collect();
    let face = apply(&world.face.0, Some(&world.face.1), &f.speaker_vec);
    let face_id = noisy_rows::<S>(vec![face], cfg.face_noise, &mut rng).into_data();
    let expr_rows = (0..tv)
        .map(|v| apply(&world.expr.0, Some(&world.expr.1), &[(f.pitch_curve[v] - 150.0) / 25.0, 4.0 * f.energy_curve[v]]))
        .collect();
    let expr_feats = noisy_rows(expr_rows, cfg.expr_noise, &mut rng);
    let content_rows = (0..2 * tv)
        .map(|t| apply(&world.content.0, Some(&world.content.1), &one_hot(f.unit_seq[t / 2], cfg.k_units)))
        .collect();
    let content_stream = noisy_rows(content_rows, cfg.content_noise, &mut rng);
    let timbre = apply(&world.timbre, None, &f.speaker_vec);
    let timbre_stream = noisy_rows(vec![timbre; 2 * tv], cfg.timbre_noise, &mut rng);

    Ok(SyntheticSample {
        id: format!("s{index:04}"),
        factors: cast_factors(f),
        audio,
        mel,
        lip_layers,
        face_id,
        expr_feats,
        content_stream,
        timbre_stream,
        targets: None,
    })
}

/// Generates `n_samples` clips. Pure function of `(seed, cfg)`: each sample
/// draws from its own stream `(seed, index)`, the shared mixing matrices from a
/// reserved stream.
pub fn gen_corpus<S: Scalar>(seed: u64, n_samples: usize, cfg: &CorpusConfig) -> Result<Vec<SyntheticSample<S>>> {
    if n_samples < 1 {
        return Err(Error::Config("corpus needs at least one sample".into()));
    }
    cfg.validate()?;
    let world = World::new(seed, cfg);
    let stft = Stft::new();
    (0..n_samples).map(|i| gen_sample(seed, i, cfg, &world, &stft)).collect()
}

pub fn make_targets<S: Scalar>(sample: &SyntheticSample<S>, km: &KMeansModel<S>) -> Result<AttributeTargets<S>> {
    if km.dim() != sample.content_stream.cols() {
        return Err(Error::Validation(format!(
            "k-means model is {}-dimensional but the content stream has {} columns",
            km.dim(),
            sample.content_stream.cols()
        )));
    }
    let t = sample.mel_frames();
    let content_units = km.assign(&sample.content_stream)?;
    // running mean: exact when every frame carries the same vector
    let mut timbre_vec = vec![S::zero(); sample.timbre_stream.cols()];
    for i in 0..sample.timbre_stream.rows() {
        let k = S::lit((i + 1) as f64);
        for (m, &x) in timbre_vec.iter_mut().zip(sample.timbre_stream.row(i)) {
            *m += (x - *m) / k;
        }
    }
    let mut f0 = estimate_pitch(&sample.audio);
    f0.truncate(t);
    let pitch = standardize_pitch(&f0)?;
    let energy = energy(&sample.mel);
    Ok(AttributeTargets { content_units, timbre_vec, pitch, energy, f0 })
}

/// A generated corpus with its fitted quantizer and timbre probe; every sample
/// carries targets.
#[derive(Clone, Debug)]
pub struct Corpus<S> {
    pub config: CorpusConfig,
    pub seed: u64,
    pub samples: Vec<SyntheticSample<S>>,
    pub kmeans: KMeansModel<S>,
    pub probe: TimbreProbe<S>,
}

impl<S: Scalar> Corpus<S> {
    /// Generates samples, fits k-means on the training split's content
    /// streams, attaches targets and fits the timbre probe.
    pub fn build(seed: u64, cfg: &CorpusConfig) -> Result<Self> {
        let mut samples = gen_corpus::<S>(seed, cfg.n_samples, cfg)?;
        let train_from = if cfg.n_samples > cfg.n_eval { cfg.n_eval } else { 0 };
        let pool: Vec<&Tensor<S>> = samples[train_from..].iter().map(|s| &s.content_stream).collect();
        let rows: usize = pool.iter().map(|t| t.rows()).sum();
        let data = pool.iter().flat_map(|t| t.data().iter().copied()).collect();
        let stacked = Tensor::matrix(rows, cfg.d_content, data)?;
        let kmeans = kmeans_fit(&stacked, cfg.kmeans_k, seed)?.model;
        for s in samples.iter_mut() {
            s.targets = Some(make_targets(s, &kmeans)?);
        }
        let pairs: Vec<_> = samples[train_from..].iter().map(|s| (&s.mel, &s.timbre_stream)).collect();
        let probe = TimbreProbe::fit(&pairs, cfg.probe_ridge)?;
        Ok(Self { config: cfg.clone(), seed, samples, kmeans, probe })
    }

    pub fn eval_samples(&self) -> &[SyntheticSample<S>] {
        &self.samples[..self.config.n_eval.min(self.samples.len())]
    }

    pub fn train_samples(&self) -> &[SyntheticSample<S>] {
        let n = self.config.n_eval;
        if n < self.samples.len() {
            &self.samples[n..]
        } else {
            &self.samples
        }
    }
}
