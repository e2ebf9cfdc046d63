use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{AttributeTargets, Corpus, CorpusConfig, LatentFactors, SyntheticSample};
use super::kmeans::KMeansModel;
use super::probe::TimbreProbe;
use crate::diffcore::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::signal::{write_wav, MelSpectrogram, PitchTrack, Waveform, SAMPLE_RATE};
use crate::Scalar;

pub const CORPUS_FILE: &str = "corpus.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const KMEANS_FILE: &str = "kmeans.bin";
pub const PROBE_FILE: &str = "probe.bin";
pub const TARGETS_HEADER: &str = "frame,content_unit,pitch,energy,f0_hz,voiced";

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn vec_tensor<S: Scalar>(v: &[S]) -> Tensor<f64> {
    Tensor::vector(v.iter().map(|x| x.as_f64()).collect())
}

fn to_vec<S: Scalar>(t: &Tensor<f64>) -> Vec<S> {
    t.data().iter().map(|&x| S::lit(x)).collect()
}

fn ids(v: &[usize]) -> Tensor<f64> {
    Tensor::vector(v.iter().map(|&x| x as f64).collect())
}

fn to_ids(t: &Tensor<f64>) -> Vec<usize> {
    t.data().iter().map(|&x| x as usize).collect()
}

fn features(s: &SyntheticSample<impl Scalar>) -> Result<Checkpoint> {
    let t = s.targets()?;
    let f = &s.factors;
    let mut ck = Checkpoint::new();
    for (l, layer) in s.lip_layers.iter().enumerate() {
        ck.insert(format!("lip.{l}"), layer.cast());
    }
    ck.insert("face_id", vec_tensor(&s.face_id));
    ck.insert("expr", s.expr_feats.cast());
    ck.insert("content_stream", s.content_stream.cast());
    ck.insert("timbre_stream", s.timbre_stream.cast());
    ck.insert("timbre_vec", vec_tensor(&t.timbre_vec));
    ck.insert("mel", s.mel.frames.cast());
    ck.insert("audio", vec_tensor(&s.audio.samples));
    ck.insert("factors.unit_seq", ids(&f.unit_seq));
    ck.insert("factors.speaker", Tensor::scalar(f.speaker as f64));
    ck.insert("factors.speaker_vec", vec_tensor(&f.speaker_vec));
    ck.insert("factors.pitch_curve", vec_tensor(&f.pitch_curve));
    ck.insert("factors.energy_curve", vec_tensor(&f.energy_curve));
    Ok(ck)
}

fn targets_csv<S: Scalar>(t: &AttributeTargets<S>) -> String {
    let mut s = format!("{TARGETS_HEADER}\n");
    for i in 0..t.len() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{}",
            t.content_units[i],
            t.pitch[i].as_f64(),
            t.energy[i].as_f64(),
            t.f0.f0[i].as_f64(),
            u8::from(t.f0.voiced[i])
        );
    }
    s
}

/// Writes the corpus: `corpus.toml`, `manifest.csv`, `kmeans.bin`,
/// `probe.bin` and one directory per sample holding `audio.wav`,
/// `features.bin` and `targets.csv`.
pub fn save_corpus<S: Scalar>(dir: &Path, corpus: &Corpus<S>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CorpusMeta { seed: corpus.seed, config: corpus.config.clone() };
    let meta = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join(CORPUS_FILE), meta)?;

    let mut manifest = String::from("sample_id,video_frames,mel_frames,speaker,split\n");
    for (i, s) in corpus.samples.iter().enumerate() {
        let split = if i < corpus.config.n_eval { "eval" } else { "train" };
        let _ = writeln!(manifest, "{},{},{},{},{split}", s.id, s.video_frames(), s.mel_frames(), s.factors.speaker);
        let sd = dir.join(&s.id);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        write_wav(&sd.join("audio.wav"), &s.audio)?;
        features(s)?.save(sd.join("features.bin"))?;
        write(&sd.join("targets.csv"), targets_csv(s.targets()?))?;
    }
    write(&dir.join(MANIFEST_FILE), manifest)?;

    let mut km = Checkpoint::new();
    km.insert("centroids", corpus.kmeans.centroids.cast());
    km.save(dir.join(KMEANS_FILE))?;
    let mut pr = Checkpoint::new();
    pr.insert("weight", corpus.probe.weight.cast());
    pr.save(dir.join(PROBE_FILE))
}

fn parse_targets<S: Scalar>(path: &Path, timbre_vec: Vec<S>) -> Result<AttributeTargets<S>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TARGETS_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let bad = |i: usize| Error::Format(format!("{}: malformed line {}", path.display(), i + 2));
    let mut t = AttributeTargets {
        content_units: vec![],
        timbre_vec,
        pitch: vec![],
        energy: vec![],
        f0: PitchTrack { f0: vec![], voiced: vec![] },
    };
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i));
        t.content_units.push(f[1].parse().map_err(|_| bad(i))?);
        t.pitch.push(S::lit(num(2)?));
        t.energy.push(S::lit(num(3)?));
        t.f0.f0.push(S::lit(num(4)?));
        t.f0.voiced.push(f[5] == "1");
    }
    Ok(t)
}

fn load_sample<S: Scalar>(dir: &Path, id: &str, cfg: &CorpusConfig) -> Result<SyntheticSample<S>> {
    let sd = dir.join(id);
    let ck = Checkpoint::load(sd.join("features.bin"))?;
    let lip_layers = (0..cfg.n_layers)
        .map(|l| ck.require(&format!("lip.{l}")).map(|t| t.cast()))
        .collect::<Result<_>>()?;
    let factors = LatentFactors {
        unit_seq: to_ids(ck.require("factors.unit_seq")?),
        speaker: ck.require("factors.speaker")?.data()[0] as usize,
        speaker_vec: to_vec(ck.require("factors.speaker_vec")?),
        pitch_curve: to_vec(ck.require("factors.pitch_curve")?),
        energy_curve: to_vec(ck.require("factors.energy_curve")?),
    };
    let targets = parse_targets(&sd.join("targets.csv"), to_vec(ck.require("timbre_vec")?))?;
    let sample = SyntheticSample {
        id: id.to_string(),
        audio: Waveform::new(to_vec(ck.require("audio")?), SAMPLE_RATE)?,
        mel: MelSpectrogram::new(ck.require("mel")?.cast())?,
        lip_layers,
        face_id: to_vec(ck.require("face_id")?),
        expr_feats: ck.require("expr")?.cast(),
        content_stream: ck.require("content_stream")?.cast(),
        timbre_stream: ck.require("timbre_stream")?.cast(),
        factors,
        targets: Some(targets),
    };
    if sample.mel_frames() != 2 * sample.video_frames() || sample.targets()?.len() != sample.mel_frames() {
        return Err(Error::Format(format!("sample {id}: inconsistent frame counts")));
    }
    Ok(sample)
}

pub fn load_corpus<S: Scalar>(dir: &Path) -> Result<Corpus<S>> {
    let meta_path = dir.join(CORPUS_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta =
        toml::from_str(&meta).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let samples = manifest
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| load_sample(dir, l.split(',').next().unwrap_or_default(), &meta.config))
        .collect::<Result<Vec<_>>>()?;
    let kmeans = KMeansModel::new(Checkpoint::load(dir.join(KMEANS_FILE))?.require("centroids")?.cast())?;
    let probe = TimbreProbe { weight: Checkpoint::load(dir.join(PROBE_FILE))?.require("weight")?.cast() };
    Ok(Corpus { config: meta.config, seed: meta.seed, samples, kmeans, probe })
}
