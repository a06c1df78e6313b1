//! Deterministic synthetic speech-like corpus so the whole pipeline runs
//! with no external data. Four "phone" classes on a 10 ms label grid:
//!
//!   0: steady two-tone 440 + 880 Hz
//!   1: steady two-tone 1800 + 2600 Hz
//!   2: rising chirp 700 → 1500 Hz
//!   3: falling chirp 1500 → 700 Hz
//!
//! Mid-chirp frames of classes 2 and 3 pass through the same instantaneous
//! frequencies, so a frame-wise linear classifier on raw features cannot
//! fully separate them; the sweep direction lives in neighboring frames.
//! "Speakers" differ by amplitude gain (a constant offset in log-power
//! features) and a small frequency warp (which survives per-utterance
//! CMVN, unlike a pure gain).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::probes::{FrameLabelSet, ProbeError, UtteranceLabelSet};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Labels(#[from] ProbeError),
}

pub type SynthResult<T> = Result<T, SynthError>;

pub const PHONE_CLASSES: usize = 4;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub sample_rate_hz: u32,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    /// Additive white noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utterances: 50,
            n_speakers: 4,
            sample_rate_hz: 16_000,
            min_segments: 3,
            max_segments: 8,
            min_segment_ms: 150.0,
            max_segment_ms: 300.0,
            noise: 0.002,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> SynthResult<()> {
        if self.n_utterances == 0 {
            return Err(SynthError::BadConfig("n_utterances must be positive".into()));
        }
        if self.n_speakers == 0 {
            return Err(SynthError::BadConfig("n_speakers must be positive".into()));
        }
        if self.sample_rate_hz < 8_000 {
            return Err(SynthError::BadConfig(format!(
                "sample rate {} too low for the phone frequencies",
                self.sample_rate_hz
            )));
        }
        if self.min_segments == 0 || self.max_segments < self.min_segments {
            return Err(SynthError::BadConfig("segment counts must satisfy 1 <= min <= max".into()));
        }
        if !(self.min_segment_ms > 0.0 && self.max_segment_ms >= self.min_segment_ms) {
            return Err(SynthError::BadConfig("segment durations must satisfy 0 < min <= max".into()));
        }
        if !(0.0..0.1).contains(&self.noise) {
            return Err(SynthError::BadConfig(format!("noise {} outside [0, 0.1)", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub samples: Vec<f32>,
    /// Phone class per 10 ms analysis frame (25 ms window, 10 ms hop),
    /// matching the frame count of default feature extraction.
    pub frame_labels: Vec<usize>,
    pub speaker: usize,
}

pub struct SynthCorpus {
    pub utterances: Vec<SynthUtterance>,
    pub sample_rate_hz: u32,
}

/// Amplitude gain of a speaker: evenly spread offsets in log domain.
fn speaker_gain(s: usize, n: usize) -> f64 {
    if n == 1 {
        return 0.6;
    }
    0.25 + 0.65 * s as f64 / (n - 1) as f64
}

/// Frequency warp of a speaker (vocal-tract-length analogue). Kept within
/// ±5% so phone classes never collide across speakers.
fn speaker_warp(s: usize, n: usize) -> f64 {
    if n == 1 {
        return 1.0;
    }
    0.95 + 0.10 * s as f64 / (n - 1) as f64
}

struct Segment {
    class: usize,
    start: usize,
    len: usize,
}

/// Pure tones of a class at time fraction x in [0, 1]: steady pairs for
/// classes 0/1, linear sweeps for 2/3.
fn class_freqs(class: usize, x: f64) -> (f64, Option<f64>) {
    match class {
        0 => (440.0, Some(880.0)),
        1 => (1800.0, Some(2600.0)),
        2 => (700.0 + 800.0 * x, None),
        _ => (1500.0 - 800.0 * x, None),
    }
}

fn synth_segment(out: &mut [f32], class: usize, warp: f64, gain: f64, sr: f64) {
    let n = out.len();
    // Chirp phase is the integral of the instantaneous frequency, keeping
    // the sweep click-free within the segment.
    let mut phase0 = 0.0f64;
    let mut phase1 = 0.0f64;
    let fade = (0.005 * sr) as usize;
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64 / n as f64;
        let (f0, f1) = class_freqs(class, x);
        phase0 += 2.0 * PI * f0 * warp / sr;
        let mut v = phase0.sin();
        if let Some(f1) = f1 {
            phase1 += 2.0 * PI * f1 * warp / sr;
            v += 0.7 * phase1.sin();
        }
        let mut env = 1.0;
        if i < fade {
            env = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        }
        let tail = n - 1 - i;
        if tail < fade {
            env = env.min(0.5 - 0.5 * (PI * tail as f64 / fade as f64).cos());
        }
        *o = (gain * env * v * 0.5) as f32;
    }
}

/// Generate the corpus. Everything is a pure function of the config, so
/// repeated calls are bitwise identical.
pub fn generate(cfg: &SynthConfig) -> SynthResult<SynthCorpus> {
    cfg.validate()?;
    let sr = cfg.sample_rate_hz as f64;
    let win = (0.025 * sr).round() as usize;
    let hop = (0.010 * sr).round() as usize;
    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for u in 0..cfg.n_utterances {
        let mut rng = seed::rng_for(&[cfg.seed, seed::fnv1a("synth"), u as u64]);
        let speaker = u % cfg.n_speakers;
        let gain = speaker_gain(speaker, cfg.n_speakers);
        let warp = speaker_warp(speaker, cfg.n_speakers);

        let n_segments = rng.random_range(cfg.min_segments..=cfg.max_segments);
        let mut segments: Vec<Segment> = Vec::with_capacity(n_segments);
        let mut cursor = 0usize;
        let mut prev_class = usize::MAX;
        for _ in 0..n_segments {
            let mut class = rng.random_range(0..PHONE_CLASSES);
            while class == prev_class {
                class = rng.random_range(0..PHONE_CLASSES);
            }
            prev_class = class;
            let ms = rng.random_range(cfg.min_segment_ms..=cfg.max_segment_ms);
            let len = (ms / 1000.0 * sr).round() as usize;
            segments.push(Segment { class, start: cursor, len });
            cursor += len;
        }

        let mut samples = vec![0.0f32; cursor];
        for seg in &segments {
            synth_segment(&mut samples[seg.start..seg.start + seg.len], seg.class, warp, gain, sr);
        }
        if cfg.noise > 0.0 {
            for s in &mut samples {
                *s += (cfg.noise * (rng.random_range(-1.0..1.0f64))) as f32;
            }
        }

        // One label per analysis frame, decided at the frame center.
        let t = if samples.len() >= win { 1 + (samples.len() - win) / hop } else { 0 };
        let mut frame_labels = Vec::with_capacity(t);
        for k in 0..t {
            let center = k * hop + win / 2;
            let seg = segments
                .iter()
                .find(|s| center < s.start + s.len)
                .unwrap_or(segments.last().expect("n_segments >= 1"));
            frame_labels.push(seg.class);
        }

        utterances.push(SynthUtterance {
            id: format!("synth{u:04}"),
            samples,
            frame_labels,
            speaker,
        });
    }
    Ok(SynthCorpus { utterances, sample_rate_hz: cfg.sample_rate_hz })
}

impl SynthCorpus {
    pub fn frame_labels(&self) -> FrameLabelSet {
        let mut labels = std::collections::BTreeMap::new();
        for u in &self.utterances {
            labels.insert(u.id.clone(), u.frame_labels.clone());
        }
        FrameLabelSet::new(labels)
    }

    pub fn speaker_labels(&self) -> UtteranceLabelSet {
        let mut labels = std::collections::BTreeMap::new();
        for u in &self.utterances {
            labels.insert(u.id.clone(), u.speaker);
        }
        UtteranceLabelSet::new(labels)
    }
}

pub struct CorpusPaths {
    pub wav_dir: PathBuf,
    pub frame_labels: PathBuf,
    pub speaker_labels: PathBuf,
}

/// Write `wav/{id}.wav` (16-bit PCM) plus the two label CSVs.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus) -> SynthResult<CorpusPaths> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir)
        .map_err(|source| SynthError::Io { path: wav_dir.clone(), source })?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: corpus.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for u in &corpus.utterances {
        let path = wav_dir.join(format!("{}.wav", u.id));
        let mut writer = hound::WavWriter::create(&path, spec)
            .map_err(|source| SynthError::Wav { path: path.clone(), source })?;
        for &s in &u.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(q)
                .map_err(|source| SynthError::Wav { path: path.clone(), source })?;
        }
        writer.finalize().map_err(|source| SynthError::Wav { path: path.clone(), source })?;
    }
    let frame_labels = dir.join("phone_frames.csv");
    corpus.frame_labels().write_csv(&frame_labels)?;
    let speaker_labels = dir.join("speakers.csv");
    corpus.speaker_labels().write_csv(&speaker_labels)?;
    Ok(CorpusPaths { wav_dir, frame_labels, speaker_labels })
}
