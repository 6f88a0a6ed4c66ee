//! Waveform I/O, duration fixing, protocol files, the synthetic task and
//! seeded batching.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BONAFIDE, SPOOF};
use crate::rng::RunRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }

    /// Class index used by the model head.
    pub fn class(self) -> usize {
        match self {
            Key::Bonafide => BONAFIDE,
            Key::Spoof => SPOOF,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            _ => Err(Error::invalid(format!(
                "key `{s}` is neither bonafide nor spoof"
            ))),
        }
    }
}

/// Attack id carried by bona fide utterances.
pub const NO_ATTACK: &str = "-";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub key: Key,
    pub attack: String,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid(format!(
                "utterance {} has no samples",
                self.id
            )));
        }
        if (self.attack == NO_ATTACK) != (self.key == Key::Bonafide) {
            return Err(Error::invalid(format!(
                "utterance {}: attack `{}` is inconsistent with key {}",
                self.id, self.attack, self.key
            )));
        }
        Ok(())
    }
}

/// Reads a mono 16-bit PCM WAV file at `sample_rate`, scaled by 1/32768.
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f64>> {
    let audio = |msg: String| Error::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio(format!(
            "expected 16-bit PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(audio(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != sample_rate {
        return Err(audio(format!(
            "expected {sample_rate} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio(e.to_string()))?;
    if samples.is_empty() {
        return Err(audio("data chunk is empty".into()));
    }
    Ok(samples)
}

/// Writes mono 16-bit PCM, rounding `x * 32768` and saturating.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// Truncates to `target` samples, tiling shorter inputs first.
pub fn fix_duration(samples: &[f64], target: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot fix the duration of an empty signal"));
    }
    Ok(samples.iter().cycle().take(target).copied().collect())
}

/// One `SPEAKER UTT_ID - ATTACK KEY` protocol line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker: String,
    pub utterance: String,
    pub attack: String,
    pub key: Key,
}

pub fn parse_protocol_str(text: &str, source: &str) -> Result<Vec<ProtocolEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(source, n + 1, msg);
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let key: Key = fields[4].parse().map_err(|e: Error| bad(e.to_string()))?;
        if (fields[3] == NO_ATTACK) != (key == Key::Bonafide) {
            return Err(bad(format!(
                "attack `{}` is inconsistent with key {key}",
                fields[3]
            )));
        }
        out.push(ProtocolEntry {
            speaker: fields[0].to_string(),
            utterance: fields[1].to_string(),
            attack: fields[3].to_string(),
            key,
        });
    }
    Ok(out)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, &path.display().to_string())
}

pub fn protocol_to_string(entries: &[ProtocolEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{} {} - {} {}\n", e.speaker, e.utterance, e.attack, e.key))
        .collect()
}

pub fn write_protocol(path: &Path, entries: &[ProtocolEntry]) -> Result<()> {
    fs::write(path, protocol_to_string(entries)).map_err(|e| Error::io(path, e))
}

/// Reads every utterance of a protocol from `wav_dir/<UTT_ID>.wav`, fixed to
/// `samples` samples.
pub fn load_dataset(
    protocol: &Path,
    wav_dir: &Path,
    sample_rate: u32,
    samples: usize,
) -> Result<Vec<Utterance>> {
    parse_protocol(protocol)?
        .into_iter()
        .map(|e| {
            let raw = read_wav(&wav_dir.join(format!("{}.wav", e.utterance)), sample_rate)?;
            Ok(Utterance {
                samples: fix_duration(&raw, samples)?,
                id: e.utterance,
                key: e.key,
                attack: e.attack,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub samples: usize,
    /// Signal-to-noise ratio of the added white noise, in dB.
    pub snr_db: f64,
}

impl SynthConfig {
    pub fn full() -> Self {
        SynthConfig {
            sample_rate: 16000,
            samples: 64000,
            snr_db: 20.0,
        }
    }

    pub fn toy() -> Self {
        SynthConfig {
            sample_rate: 4000,
            samples: 4000,
            snr_db: 20.0,
        }
    }
}

/// Attack ids assigned round-robin to synthetic spoofs.
pub const SYNTH_ATTACKS: [&str; 3] = ["S01", "S02", "S03"];
const HARMONICS: usize = 5;

/// `2 * n_per_class` utterances alternating bona fide and spoof. Bona fide
/// items are five harmonics of `f0 ~ U[80, 300]` Hz with amplitudes `1/h` and
/// random phases; spoofs multiply each harmonic frequency by an independent
/// factor from `U[1.02, 1.08]`. White noise is added at the configured SNR and
/// the result is peak-normalized to 0.9.
///
/// Exactly one `u64` is drawn from `rng` per utterance; it seeds that
/// utterance's own generator.
pub fn synth_task(
    rng: &mut impl Rng,
    n_per_class: usize,
    cfg: &SynthConfig,
) -> Result<Vec<Utterance>> {
    if cfg.samples == 0 || cfg.sample_rate == 0 {
        return Err(Error::invalid(
            "synthetic utterances need a positive length and rate",
        ));
    }
    let width = (2 * n_per_class).max(1).to_string().len().max(4);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let key = if i % 2 == 0 {
            Key::Bonafide
        } else {
            Key::Spoof
        };
        let mut local = RunRng::seed_from_u64(rng.random());
        let f0 = local.random_range(80.0..300.0);
        let phases: [f64; HARMONICS] = std::array::from_fn(|_| local.random_range(0.0..2.0 * PI));
        let stretch: [f64; HARMONICS] = std::array::from_fn(|_| local.random_range(1.02..1.08));
        let sr = cfg.sample_rate as f64;
        let mut x: Vec<f64> = (0..cfg.samples)
            .map(|n| {
                let t = n as f64 / sr;
                (0..HARMONICS)
                    .map(|h| {
                        let m = (h + 1) as f64;
                        let f = m * f0 * if key == Key::Spoof { stretch[h] } else { 1.0 };
                        (2.0 * PI * f * t + phases[h]).sin() / m
                    })
                    .sum()
            })
            .collect();
        let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        for v in &mut x {
            let z: f64 = StandardNormal.sample(&mut local);
            *v += sigma * z;
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            x.iter_mut().for_each(|v| *v *= 0.9 / peak);
        }
        let attack = match key {
            Key::Bonafide => NO_ATTACK.to_string(),
            Key::Spoof => SYNTH_ATTACKS[(i / 2) % SYNTH_ATTACKS.len()].to_string(),
        };
        out.push(Utterance {
            id: format!("SYN_{i:0width$}"),
            samples: x,
            key,
            attack,
        });
    }
    Ok(out)
}

/// Count, total duration and SHA-256 of a dataset written by [`export_dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetDigest {
    pub count: usize,
    pub total_samples: usize,
    pub sha256: String,
}

/// Writes `<dir>/<UTT_ID>.wav` for every utterance plus `<dir>/<protocol>`;
/// the digest hashes the protocol bytes followed by every WAV file's bytes
/// in protocol order.
pub fn export_dataset(
    dir: &Path,
    protocol: &str,
    utts: &[Utterance],
    sample_rate: u32,
) -> Result<DatasetDigest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ProtocolEntry> = utts
        .iter()
        .map(|u| ProtocolEntry {
            speaker: "SYN".into(),
            utterance: u.id.clone(),
            attack: u.attack.clone(),
            key: u.key,
        })
        .collect();
    let proto_path = dir.join(protocol);
    write_protocol(&proto_path, &entries)?;
    for u in utts {
        write_wav(&dir.join(format!("{}.wav", u.id)), &u.samples, sample_rate)?;
    }
    digest_dataset(&proto_path, dir)
}

pub fn digest_dataset(protocol: &Path, wav_dir: &Path) -> Result<DatasetDigest> {
    let read = |p: PathBuf| fs::read(&p).map_err(|e| Error::io(&p, e));
    let entries = parse_protocol(protocol)?;
    let mut h = Sha256::new();
    h.update(read(protocol.to_path_buf())?);
    let mut total = 0;
    for e in &entries {
        let bytes = read(wav_dir.join(format!("{}.wav", e.utterance)))?;
        total += bytes.len().saturating_sub(44) / 2;
        h.update(&bytes);
    }
    Ok(DatasetDigest {
        count: entries.len(),
        total_samples: total,
        sha256: hex::encode(h.finalize()),
    })
}

/// Shuffled index batches for one epoch.
pub fn batches(
    n: usize,
    batch: usize,
    rng: &mut impl Rng,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch)
        .filter(|c| !drop_last || c.len() == batch)
        .map(<[usize]>::to_vec)
        .collect())
}
