//! WAV audio → normalized log-Mel / log-linear spectrogram sequences, plus
//! frame stacking for temporal downsampling and the on-disk feature cache.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported format ({detail}); expected 16-bit integer PCM")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("{path}: file contains no audio samples")]
    EmptyAudio { path: PathBuf },
    #[error("waveform too short: {len} samples, need at least one window of {win}")]
    TooShort { len: usize, win: usize },
    #[error("cmvn requires at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("stack factor must be at least 1")]
    BadStackFactor,
    #[error("cannot unstack: stack_factor {r} does not divide dimension {d}")]
    BadUnstack { r: usize, d: usize },
    #[error("invalid feature config: {0}")]
    BadConfig(String),
    #[error("{path}: not a feature cache file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: corrupt feature cache ({detail})")]
    Corrupt { path: PathBuf, detail: String },
}

pub type FeatureResult<T> = Result<T, FeatureError>;

pub const MAMF_MAGIC: &[u8; 4] = b"MAMF";
pub const MAMF_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FeatureKind {
    Mel,
    Linear,
    /// Encoder representations dumped through the same cache format.
    Repr,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mel => 0,
            FeatureKind::Linear => 1,
            FeatureKind::Repr => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FeatureKind::Mel),
            1 => Some(FeatureKind::Linear),
            2 => Some(FeatureKind::Repr),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::Linear => "linear",
            FeatureKind::Repr => "repr",
        }
    }
}

/// A T×D frame matrix with enough metadata to interpret its time axis.
/// `hop_ms` always refers to the pre-stacking frame grid; `stack_factor`
/// records how many base frames each row concatenates.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub frames: Vec<f32>,
    pub t: usize,
    pub d: usize,
    pub kind: FeatureKind,
    pub sample_rate_hz: u32,
    pub hop_ms: f32,
    pub stack_factor: usize,
    pub utterance_id: String,
}

impl FeatureSequence {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.frames[t * self.d..(t + 1) * self.d]
    }

    pub fn base_dim(&self) -> usize {
        self.d / self.stack_factor
    }
}

#[derive(Clone, Debug)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub window_ms: f32,
    pub hop_ms: f32,
    pub n_mels: usize,
    pub log_floor: f32,
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_fft: 400,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 160,
            log_floor: 1e-10,
            cmvn: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate_hz: u32) -> FeatureResult<()> {
        if self.window_ms <= 0.0 || self.hop_ms <= 0.0 {
            return Err(FeatureError::BadConfig("window_ms and hop_ms must be positive".into()));
        }
        if self.n_mels == 0 || self.n_mels > self.n_fft / 2 + 1 {
            return Err(FeatureError::BadConfig(format!(
                "n_mels {} outside 1..={}",
                self.n_mels,
                self.n_fft / 2 + 1
            )));
        }
        if self.window_samples(sample_rate_hz) > self.n_fft {
            return Err(FeatureError::BadConfig(format!(
                "window of {} samples exceeds n_fft {}",
                self.window_samples(sample_rate_hz),
                self.n_fft
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(FeatureError::BadConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms * sample_rate_hz as f32 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.hop_ms * sample_rate_hz as f32 / 1000.0).round() as usize
    }

    pub fn dim(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::Mel => self.n_mels,
            _ => self.n_fft / 2 + 1,
        }
    }
}

/// Load a PCM16 WAV file. Stereo is averaged down to mono; samples are
/// scaled to [-1, 1].
pub fn load_wav(path: &Path) -> FeatureResult<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|source| FeatureError::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FeatureError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let channels = spec.channels as usize;
    let samples: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|source| FeatureError::Wav { path: path.to_path_buf(), source })?;
    if samples.is_empty() {
        return Err(FeatureError::EmptyAudio { path: path.to_path_buf() });
    }
    let n = samples.len() / channels;
    let inv = 1.0 / (channels as f32 * 32768.0);
    let wave = (0..n)
        .map(|i| {
            let mut acc = 0.0f32;
            for c in 0..channels {
                acc += samples[i * channels + c] as f32;
            }
            acc * inv
        })
        .collect();
    Ok((wave, spec.sample_rate))
}

fn hz_to_mel(f: f32) -> f32 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f32) -> f32 {
    700.0 * (10f32.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filterbank, n_mels × (n_fft/2 + 1), HTK frequency warp.
/// A filter too narrow to cover any bin center falls back to unit weight
/// at the bin nearest its center so every output dimension carries signal.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Vec<f32> {
    let n_bins = n_fft / 2 + 1;
    let fmax = sample_rate_hz as f32 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let hz_pts: Vec<f32> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f32 / (n_mels + 1) as f32))
        .collect();
    let bin_hz = sample_rate_hz as f32 / n_fft as f32;
    let mut fb = vec![0.0f32; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, ctr, hi) = (hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f32 * bin_hz;
            let w = if f >= lo && f <= ctr && ctr > lo {
                (f - lo) / (ctr - lo)
            } else if f > ctr && f <= hi && hi > ctr {
                (hi - f) / (hi - ctr)
            } else {
                0.0
            };
            if w > 0.0 {
                fb[m * n_bins + k] = w;
                any = true;
            }
        }
        if !any {
            let k = ((ctr / bin_hz).round() as usize).min(n_bins - 1);
            fb[m * n_bins + k] = 1.0;
        }
    }
    fb
}

/// Short-time log-power spectrogram. T = 1 + floor((len - win)/hop); each
/// value is log(power + log_floor). Mel applies the filterbank first.
pub fn log_spectrogram(
    wave: &[f32],
    sample_rate_hz: u32,
    cfg: &FeatureConfig,
    kind: FeatureKind,
    utterance_id: &str,
) -> FeatureResult<FeatureSequence> {
    cfg.validate(sample_rate_hz)?;
    let win = cfg.window_samples(sample_rate_hz);
    let hop = cfg.hop_samples(sample_rate_hz);
    if wave.len() < win {
        return Err(FeatureError::TooShort { len: wave.len(), win });
    }
    let t = 1 + (wave.len() - win) / hop;
    let n_bins = cfg.n_fft / 2 + 1;

    // Periodic Hann window.
    let window: Vec<f32> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * n as f32 / win as f32).cos())
        .collect();

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];

    let mel_fb = match kind {
        FeatureKind::Mel => Some(mel_filterbank(cfg.n_mels, cfg.n_fft, sample_rate_hz)),
        _ => None,
    };
    let d = cfg.dim(kind);
    let mut frames = vec![0.0f32; t * d];
    let mut power = vec![0.0f32; n_bins];

    for fi in 0..t {
        let start = fi * hop;
        for n in 0..win {
            buf[n] = Complex::new(wave[start + n] * window[n], 0.0);
        }
        for slot in buf.iter_mut().skip(win) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let out = &mut frames[fi * d..(fi + 1) * d];
        match &mel_fb {
            Some(fb) => {
                for (m, slot) in out.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (k, &p) in power.iter().enumerate() {
                        acc += fb[m * n_bins + k] * p;
                    }
                    *slot = (acc + cfg.log_floor).ln();
                }
            }
            None => {
                for (k, slot) in out.iter_mut().enumerate() {
                    *slot = (power[k] + cfg.log_floor).ln();
                }
            }
        }
    }

    Ok(FeatureSequence {
        frames,
        t,
        d,
        kind,
        sample_rate_hz,
        hop_ms: cfg.hop_ms,
        stack_factor: 1,
        utterance_id: utterance_id.to_string(),
    })
}

/// Per-utterance, per-dimension standardization. Constant dimensions map
/// to zero via the variance floor; applying twice is a no-op within 1e-6.
pub fn cmvn(mut seq: FeatureSequence) -> FeatureResult<FeatureSequence> {
    const VAR_FLOOR: f64 = 1e-8;
    if seq.t < 2 {
        return Err(FeatureError::TooFewFrames(seq.t));
    }
    let (t, d) = (seq.t, seq.d);
    for c in 0..d {
        let mut mean = 0.0f64;
        for r in 0..t {
            mean += seq.frames[r * d + c] as f64;
        }
        mean /= t as f64;
        let mut var = 0.0f64;
        for r in 0..t {
            let diff = seq.frames[r * d + c] as f64 - mean;
            var += diff * diff;
        }
        var /= t as f64;
        let inv_std = 1.0 / var.max(VAR_FLOOR).sqrt();
        for r in 0..t {
            let v = (seq.frames[r * d + c] as f64 - mean) * inv_std;
            seq.frames[r * d + c] = v as f32;
        }
    }
    Ok(seq)
}

/// Concatenate each run of `r` consecutive frames into one wider frame,
/// zero-padding the tail so T becomes a multiple of r. Row-major layout
/// makes this a reshape of the padded buffer.
pub fn stack_frames(seq: &FeatureSequence, r: usize) -> FeatureResult<FeatureSequence> {
    if r == 0 {
        return Err(FeatureError::BadStackFactor);
    }
    if r == 1 {
        return Ok(seq.clone());
    }
    let t_out = seq.t.div_ceil(r);
    let mut frames = vec![0.0f32; t_out * r * seq.d];
    frames[..seq.t * seq.d].copy_from_slice(&seq.frames);
    Ok(FeatureSequence {
        frames,
        t: t_out,
        d: seq.d * r,
        kind: seq.kind,
        sample_rate_hz: seq.sample_rate_hz,
        hop_ms: seq.hop_ms,
        stack_factor: seq.stack_factor * r,
        utterance_id: seq.utterance_id.clone(),
    })
}

/// Undo [`stack_frames`]: recovers the padded pre-stack sequence (original
/// frames plus any trailing zero rows).
pub fn unstack_frames(seq: &FeatureSequence) -> FeatureResult<FeatureSequence> {
    let r = seq.stack_factor;
    if r == 0 || seq.d % r != 0 {
        return Err(FeatureError::BadUnstack { r, d: seq.d });
    }
    if r == 1 {
        return Ok(seq.clone());
    }
    Ok(FeatureSequence {
        frames: seq.frames.clone(),
        t: seq.t * r,
        d: seq.d / r,
        kind: seq.kind,
        sample_rate_hz: seq.sample_rate_hz,
        hop_ms: seq.hop_ms,
        stack_factor: 1,
        utterance_id: seq.utterance_id.clone(),
    })
}

/// Full pipeline from waveform to model-ready frames: spectrogram, optional
/// CMVN, then stacking by `r`.
pub fn extract_features(
    wave: &[f32],
    sample_rate_hz: u32,
    cfg: &FeatureConfig,
    kind: FeatureKind,
    r: usize,
    utterance_id: &str,
) -> FeatureResult<FeatureSequence> {
    let seq = log_spectrogram(wave, sample_rate_hz, cfg, kind, utterance_id)?;
    let seq = if cfg.cmvn { cmvn(seq)? } else { seq };
    stack_frames(&seq, r)
}

/// Write a sequence to the feature cache format. The file appears under a
/// `.tmp` suffix until fully written, then is renamed into place.
pub fn write_mamf(path: &Path, seq: &FeatureSequence) -> FeatureResult<()> {
    let io_err = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("mamf.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        let mut header = Vec::with_capacity(22);
        header.extend_from_slice(MAMF_MAGIC);
        header.extend_from_slice(&MAMF_VERSION.to_le_bytes());
        header.extend_from_slice(&(seq.t as u32).to_le_bytes());
        header.extend_from_slice(&(seq.d as u32).to_le_bytes());
        header.push(seq.kind.code());
        header.push(seq.stack_factor as u8);
        header.extend_from_slice(&seq.hop_ms.to_le_bytes());
        f.write_all(&header).map_err(io_err)?;
        let mut payload = Vec::with_capacity(seq.frames.len() * 4);
        for &v in &seq.frames {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&payload).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

/// Read a feature cache file; the utterance id is the file stem.
pub fn read_mamf(path: &Path) -> FeatureResult<FeatureSequence> {
    let io_err = |source| FeatureError::Io { path: path.to_path_buf(), source };
    let corrupt = |detail: String| FeatureError::Corrupt { path: path.to_path_buf(), detail };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 22 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAMF_MAGIC {
        return Err(FeatureError::BadMagic { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MAMF_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let kind = FeatureKind::from_code(bytes[16])
        .ok_or_else(|| corrupt(format!("unknown feature kind {}", bytes[16])))?;
    let stack_factor = bytes[17] as usize;
    if stack_factor == 0 {
        return Err(corrupt("zero stack factor".into()));
    }
    let hop_ms = f32::from_le_bytes(bytes[18..22].try_into().unwrap());
    let expected = 22 + t * d * 4;
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes for {t}x{d}, found {}", bytes.len())));
    }
    let frames: Vec<f32> = bytes[22..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let utterance_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence {
        frames,
        t,
        d,
        kind,
        sample_rate_hz: 16_000,
        hop_ms,
        stack_factor,
        utterance_id,
    })
}
