//! Command-line pipeline: synth → features → pretrain → extract → probe /
//! finetune. Every command resolves its settings as CLI flag > config file
//! (key=value lines) > preset default, rejects unknown config keys, and
//! writes a `resolved-config.txt` audit snapshot into its output directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::features::{
    extract_features, load_wav, read_mamf, write_mamf, FeatureConfig, FeatureKind, FeatureSequence,
};
use crate::masking::MaskPolicy;
use crate::model::EncoderConfig;
use crate::probes::{
    finetune_frame_probe, low_resource_sweep, train_linear_frame_probe, train_rnn_utterance_probe,
    write_report_csv, FinetuneOptions, FrameLabelSet, ProbeConfig, ProbeInput, ProbeReport,
    UtteranceLabelSet,
};
use crate::repr::{dump_representations, extract_last, extract_layers, LayerStack, WeightedSumMixer};
use crate::synth::{generate, write_corpus, SynthConfig};
use crate::train::{checkpoint, pretrain, write_loss_csv, RunConfig, TrainSchedule};

pub fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Finetune(a) => cmd_finetune(a),
    }
}

#[derive(Parser)]
#[command(name = "mam", version, about = "Masked acoustic modeling on CPU: pre-train a bidirectional transformer on speech features and probe the learned representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus (WAVs plus label CSVs)
    Synth(SynthArgs),
    /// Extract log-mel or log-linear features from WAVs into a MAMF cache
    Features(FeaturesArgs),
    /// Pre-train the encoder with masked acoustic modeling
    Pretrain(PretrainArgs),
    /// Dump per-utterance representations from a checkpoint
    Extract(ExtractArgs),
    /// Train downstream probes on features or representations
    Probe(ProbeArgs),
    /// Fine-tune the encoder jointly with a frame classifier
    Finetune(FinetuneArgs),
}

// ── config plumbing ─────────────────────────────────────────────────────

/// Key=value config file: `#` comments, blank lines ignored.
struct KvConfig {
    map: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl KvConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key=value", p.display(), i + 1))?;
                if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    bail!("{}:{}: duplicate key `{}`", p.display(), i + 1, k.trim());
                }
            }
        }
        Ok(KvConfig { map, path: path.map(Path::to_path_buf) })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Every key must have been consumed by a `resolve` call.
    fn finish(self) -> Result<()> {
        if !self.map.is_empty() {
            let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
            bail!(
                "unknown config key(s) {} in {}",
                keys.join(", "),
                self.path.as_deref().unwrap_or(Path::new("<config>")).display()
            );
        }
        Ok(())
    }
}

fn parse_key<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse::<T>().map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
}

/// CLI flag > config file > default.
fn resolve<T: FromStr>(cli: Option<T>, file: &mut KvConfig, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    if let Some(v) = cli {
        file.take(key);
        return Ok(v);
    }
    match file.take(key) {
        Some(raw) => parse_key(key, &raw),
        None => Ok(default),
    }
}

fn resolve_opt<T: FromStr>(cli: Option<T>, file: &mut KvConfig, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if let Some(v) = cli {
        file.take(key);
        return Ok(Some(v));
    }
    match file.take(key) {
        Some(raw) => Ok(Some(parse_key(key, &raw)?)),
        None => Ok(None),
    }
}

/// The audit record: every resolved setting of the run, written before the
/// heavy work starts.
#[derive(Default)]
struct Snapshot(BTreeMap<String, String>);

impl Snapshot {
    fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let mut text = String::new();
        for (k, v) in &self.0 {
            text.push_str(&format!("{k}={v}\n"));
        }
        write_text_atomic(&dir.join("resolved-config.txt"), &text)
    }
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot finalize {}", path.display()))?;
    Ok(())
}

fn parse_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "mel" => Ok(FeatureKind::Mel),
        "linear" => Ok(FeatureKind::Linear),
        other => bail!("feature kind must be `mel` or `linear`, got `{other}`"),
    }
}

// ── shared artifact access ──────────────────────────────────────────────

fn load_cache(dir: &Path) -> Result<Vec<FeatureSequence>> {
    let manifest = dir.join("manifest.txt");
    if !manifest.exists() {
        bail!(
            "feature cache not found at {} (no manifest.txt); run `mam features` to build it",
            dir.display()
        );
    }
    let ids = std::fs::read_to_string(&manifest)
        .with_context(|| format!("cannot read {}", manifest.display()))?;
    let mut seqs = Vec::new();
    for id in ids.lines().filter(|l| !l.trim().is_empty()) {
        let path = dir.join(format!("{id}.mamf"));
        seqs.push(
            read_mamf(&path)
                .with_context(|| format!("cache entry {} is unreadable", path.display()))?,
        );
    }
    if seqs.is_empty() {
        bail!("feature cache at {} lists no utterances", dir.display());
    }
    Ok(seqs)
}

fn cache_dims(seqs: &[FeatureSequence]) -> Result<(usize, FeatureKind, usize)> {
    let (d, kind, stack) = (seqs[0].d, seqs[0].kind, seqs[0].stack_factor);
    for s in seqs {
        if s.d != d || s.kind != kind || s.stack_factor != stack {
            bail!(
                "feature cache is inconsistent: {} has d={} kind={} stack={}, expected d={d} kind={} stack={stack}",
                s.utterance_id,
                s.d,
                s.kind.name(),
                s.stack_factor,
                kind.name()
            );
        }
    }
    Ok((d, kind, stack))
}

fn preset_config(name: &str) -> Result<EncoderConfig> {
    match name {
        "base" => Ok(EncoderConfig::base()),
        "large" => Ok(EncoderConfig::large()),
        "tiny" => Ok(EncoderConfig::tiny()),
        other => bail!("preset must be `base`, `large` or `tiny`, got `{other}`"),
    }
}

/// Model-shape flags shared by every command that builds an encoder.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Model preset: base, large or tiny
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Masked-block width; also the downsampled mask unit
    #[arg(long)]
    consecutive: Option<usize>,
}

impl ModelArgs {
    fn build(&self, file: &mut KvConfig, snap: &mut Snapshot) -> Result<EncoderConfig> {
        let preset = resolve(self.preset.clone(), file, "preset", "tiny".to_string())?;
        let mut cfg = preset_config(&preset)?;
        cfg.hidden_dim = resolve(self.hidden_dim, file, "hidden_dim", cfg.hidden_dim)?;
        cfg.ff_dim = resolve(self.ff_dim, file, "ff_dim", cfg.ff_dim)?;
        cfg.heads = resolve(self.heads, file, "heads", cfg.heads)?;
        cfg.layers = resolve(self.layers, file, "layers", cfg.layers)?;
        cfg.max_seq_len = resolve(self.max_seq_len, file, "max_seq_len", cfg.max_seq_len)?;
        cfg.consecutive = resolve(self.consecutive, file, "consecutive", cfg.consecutive)?;
        snap.set("preset", &preset);
        for (k, v) in [
            ("hidden_dim", cfg.hidden_dim),
            ("ff_dim", cfg.ff_dim),
            ("heads", cfg.heads),
            ("layers", cfg.layers),
            ("max_seq_len", cfg.max_seq_len),
            ("consecutive", cfg.consecutive),
        ] {
            snap.set(k, v);
        }
        Ok(cfg)
    }
}

/// Fit the config to a feature cache and (optionally) a checkpoint, so dims
/// always come from data rather than guesswork.
fn fit_config_to_cache(
    cfg: &mut EncoderConfig,
    inputs: &[FeatureSequence],
    ckpt: Option<&checkpoint::Checkpoint>,
) -> Result<()> {
    let (d, _, stack) = cache_dims(inputs)?;
    cfg.input_dim = d;
    cfg.downsample = stack;
    if let Some(ck) = ckpt {
        if let Some(p) = ck.params.get("input_proj.w") {
            if p.shape[0] != d {
                bail!(
                    "checkpoint expects {}-dim inputs but the feature cache is {d}-dim; \
                     re-run `mam features` with matching settings",
                    p.shape[0]
                );
            }
        }
        if let Some(p) = ck.params.get("head.w2") {
            cfg.target_dim = p.shape[1];
        }
        ck.validate_model(cfg)?;
    }
    Ok(())
}

fn read_mixer(path: &Path) -> Result<WeightedSumMixer> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read mixer file {}", path.display()))?;
    let mut logits: Option<Vec<f32>> = None;
    let mut gamma: Option<f32> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some(("logits", v)) => {
                logits = Some(
                    v.split(',')
                        .map(|x| x.trim().parse::<f32>())
                        .collect::<Result<Vec<f32>, _>>()
                        .with_context(|| format!("bad logits in {}", path.display()))?,
                );
            }
            Some(("gamma", v)) => {
                gamma = Some(v.trim().parse().with_context(|| format!("bad gamma in {}", path.display()))?);
            }
            _ => bail!("{}: expected `logits=...` or `gamma=...` lines", path.display()),
        }
    }
    match (logits, gamma) {
        (Some(layer_logits), Some(gamma)) if !layer_logits.is_empty() => {
            Ok(WeightedSumMixer { layer_logits, gamma })
        }
        _ => bail!("{}: mixer file needs non-empty logits and gamma", path.display()),
    }
}

fn write_mixer(path: &Path, mixer: &WeightedSumMixer) -> Result<()> {
    let logits: Vec<String> = mixer.layer_logits.iter().map(f32::to_string).collect();
    write_text_atomic(path, &format!("logits={}\ngamma={}\n", logits.join(","), mixer.gamma))
}

// ── synth ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Output directory for wav/ and the label CSVs
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    n_speakers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_segments: Option<usize>,
    #[arg(long)]
    max_segments: Option<usize>,
    #[arg(long)]
    min_segment_ms: Option<f64>,
    #[arg(long)]
    max_segment_ms: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_utterances: resolve(a.n_utterances, &mut file, "n_utterances", d.n_utterances)?,
        n_speakers: resolve(a.n_speakers, &mut file, "n_speakers", d.n_speakers)?,
        sample_rate_hz: d.sample_rate_hz,
        min_segments: resolve(a.min_segments, &mut file, "min_segments", d.min_segments)?,
        max_segments: resolve(a.max_segments, &mut file, "max_segments", d.max_segments)?,
        min_segment_ms: resolve(a.min_segment_ms, &mut file, "min_segment_ms", d.min_segment_ms)?,
        max_segment_ms: resolve(a.max_segment_ms, &mut file, "max_segment_ms", d.max_segment_ms)?,
        noise: resolve(a.noise, &mut file, "noise", d.noise)?,
        seed: resolve(a.seed, &mut file, "seed", d.seed)?,
    };
    file.finish()?;
    let mut snap = Snapshot::default();
    snap.set("command", "synth");
    snap.set("n_utterances", cfg.n_utterances);
    snap.set("n_speakers", cfg.n_speakers);
    snap.set("sample_rate_hz", cfg.sample_rate_hz);
    snap.set("min_segments", cfg.min_segments);
    snap.set("max_segments", cfg.max_segments);
    snap.set("min_segment_ms", cfg.min_segment_ms);
    snap.set("max_segment_ms", cfg.max_segment_ms);
    snap.set("noise", cfg.noise);
    snap.set("seed", cfg.seed);
    snap.write(&a.out)?;
    let corpus = generate(&cfg)?;
    let paths = write_corpus(&a.out, &corpus)?;
    println!(
        "wrote {} utterances to {} with labels {} and {}",
        corpus.utterances.len(),
        paths.wav_dir.display(),
        paths.frame_labels.display(),
        paths.speaker_labels.display()
    );
    Ok(())
}

// ── features ────────────────────────────────────────────────────────────

#[derive(Args)]
struct FeaturesArgs {
    /// Directory of 16-bit mono WAV files
    #[arg(long)]
    wav: PathBuf,
    /// Cache directory for the MAMF files
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// mel or linear
    #[arg(long)]
    kind: Option<String>,
    /// Frame stacking factor (downsample)
    #[arg(long)]
    stack: Option<usize>,
    #[arg(long)]
    n_mels: Option<usize>,
    #[arg(long)]
    n_fft: Option<usize>,
    #[arg(long)]
    window_ms: Option<f32>,
    #[arg(long)]
    hop_ms: Option<f32>,
    #[arg(long)]
    log_floor: Option<f32>,
    #[arg(long)]
    cmvn: Option<bool>,
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let d = FeatureConfig::default();
    let kind = parse_kind(&resolve(a.kind, &mut file, "kind", "mel".to_string())?)?;
    let stack = resolve(a.stack, &mut file, "stack", 1usize)?;
    let fcfg = FeatureConfig {
        n_fft: resolve(a.n_fft, &mut file, "n_fft", d.n_fft)?,
        window_ms: resolve(a.window_ms, &mut file, "window_ms", d.window_ms)?,
        hop_ms: resolve(a.hop_ms, &mut file, "hop_ms", d.hop_ms)?,
        n_mels: resolve(a.n_mels, &mut file, "n_mels", d.n_mels)?,
        log_floor: resolve(a.log_floor, &mut file, "log_floor", d.log_floor)?,
        cmvn: resolve(a.cmvn, &mut file, "cmvn", d.cmvn)?,
    };
    file.finish()?;
    if stack == 0 {
        bail!("stack must be at least 1");
    }

    let mut wavs: Vec<PathBuf> = std::fs::read_dir(&a.wav)
        .with_context(|| format!("cannot read WAV directory {}", a.wav.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        bail!("no utterances found in {} (expected .wav files)", a.wav.display());
    }

    let mut snap = Snapshot::default();
    snap.set("command", "features");
    snap.set("kind", kind.name());
    snap.set("stack", stack);
    snap.set("n_fft", fcfg.n_fft);
    snap.set("window_ms", fcfg.window_ms);
    snap.set("hop_ms", fcfg.hop_ms);
    snap.set("n_mels", fcfg.n_mels);
    snap.set("log_floor", fcfg.log_floor);
    snap.set("cmvn", fcfg.cmvn);
    snap.write(&a.out)?;

    let expect_d = match kind {
        FeatureKind::Mel => fcfg.n_mels * stack,
        FeatureKind::Linear => (fcfg.n_fft / 2 + 1) * stack,
        FeatureKind::Repr => unreachable!("parse_kind rejects repr"),
    };
    let mut ids = Vec::with_capacity(wavs.len());
    let mut fresh = 0usize;
    for path in &wavs {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("non-UTF-8 file name {}", path.display()))?
            .to_string();
        let out_path = a.out.join(format!("{id}.mamf"));
        // Idempotent resume: keep cache entries that already match.
        if let Ok(existing) = read_mamf(&out_path) {
            if existing.kind == kind && existing.stack_factor == stack && existing.d == expect_d {
                ids.push(id);
                continue;
            }
        }
        let (wave, sr) = load_wav(path)?;
        let seq = extract_features(&wave, sr, &fcfg, kind, stack, &id)?;
        write_mamf(&out_path, &seq)?;
        ids.push(id);
        fresh += 1;
    }
    ids.sort();
    write_text_atomic(&a.out.join("manifest.txt"), &(ids.join("\n") + "\n"))?;
    println!("cached {} utterances in {} ({} newly extracted)", ids.len(), a.out.display(), fresh);
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

#[derive(Args)]
struct PretrainArgs {
    /// Input feature cache
    #[arg(long)]
    cache: PathBuf,
    /// Optional separate target feature cache (same utterances)
    #[arg(long)]
    target_cache: Option<PathBuf>,
    /// Run directory for checkpoints and loss log
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Global-norm gradient clip; 0 disables
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Checkpoint every N steps; 0 writes only the final checkpoint
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Resume from an existing checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    mask_proportion: Option<f64>,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let mut snap = Snapshot::default();
    snap.set("command", "pretrain");
    let mut cfg = a.model.build(&mut file, &mut snap)?;

    let sd = TrainSchedule::pretrain_default();
    let grad_clip = resolve(a.grad_clip, &mut file, "grad_clip", 1.0)?;
    let sched = TrainSchedule {
        total_steps: resolve(a.total_steps, &mut file, "total_steps", sd.total_steps)?,
        warmup_fraction: resolve(a.warmup_fraction, &mut file, "warmup_fraction", sd.warmup_fraction)?,
        peak_lr: resolve(a.peak_lr, &mut file, "peak_lr", sd.peak_lr)?,
        batch_size: resolve(a.batch_size, &mut file, "batch_size", sd.batch_size)?,
        dropout: resolve(a.dropout, &mut file, "dropout", sd.dropout)?,
        grad_clip: (grad_clip > 0.0).then_some(grad_clip),
    };
    let pd = MaskPolicy::default();
    let policy = MaskPolicy {
        mask_proportion: resolve(a.mask_proportion, &mut file, "mask_proportion", pd.mask_proportion)?,
        consecutive: cfg.consecutive,
        ..pd
    };
    let seed_value = resolve(a.seed, &mut file, "seed", 0u64)?;
    let interval = resolve(a.checkpoint_interval, &mut file, "checkpoint_interval", 0u64)?;
    let resume_path = resolve_opt(a.resume, &mut file, "resume")?;
    file.finish()?;

    let inputs = load_cache(&a.cache)?;
    let (d_in, kind_in, stack_in) = cache_dims(&inputs)?;
    let targets = a.target_cache.as_deref().map(load_cache).transpose()?;
    cfg.input_dim = d_in;
    cfg.downsample = stack_in;
    match &targets {
        Some(t) => {
            let (d_t, kind_t, stack_t) = cache_dims(t)?;
            if t.len() != inputs.len()
                || t.iter().zip(&inputs).any(|(x, y)| x.utterance_id != y.utterance_id)
            {
                bail!("target cache must list exactly the same utterances as the input cache");
            }
            if stack_t != stack_in {
                bail!("target cache stacked {stack_t}x but inputs {stack_in}x");
            }
            cfg.target_dim = d_t;
            cfg.target_kind = kind_t;
        }
        None => {
            cfg.target_dim = d_in;
            cfg.target_kind = kind_in;
        }
    }
    cfg.dropout = sched.dropout;
    cfg.validate()?;

    let resume = resume_path
        .as_deref()
        .map(|p: &Path| -> Result<checkpoint::Checkpoint> {
            let ck = checkpoint::load(p)?;
            ck.validate_model(&cfg)?;
            Ok(ck)
        })
        .transpose()?;

    snap.set("cache", a.cache.display());
    if let Some(t) = &a.target_cache {
        snap.set("target_cache", t.display());
    }
    snap.set("input_dim", cfg.input_dim);
    snap.set("target_dim", cfg.target_dim);
    snap.set("target_kind", cfg.target_kind.name());
    snap.set("downsample", cfg.downsample);
    snap.set("total_steps", sched.total_steps);
    snap.set("warmup_fraction", sched.warmup_fraction);
    snap.set("peak_lr", sched.peak_lr);
    snap.set("batch_size", sched.batch_size);
    snap.set("dropout", sched.dropout);
    snap.set("grad_clip", grad_clip);
    snap.set("mask_proportion", policy.mask_proportion);
    snap.set("seed", seed_value);
    snap.set("checkpoint_interval", interval);
    if let Some(p) = &resume_path {
        snap.set("resume", p.display());
    }
    snap.write(&a.out)?;

    let run = RunConfig {
        seed: seed_value,
        out_dir: Some(a.out.clone()),
        checkpoint_interval: interval,
        resume,
    };
    let outputs = pretrain(&inputs, targets.as_deref(), &cfg, &policy, &sched, run)?;
    let last = outputs.log.last().map(|r| r.loss).unwrap_or(f32::NAN);
    println!(
        "pre-trained {} steps; final loss {last}; artifacts in {}",
        outputs.log.len(),
        a.out.display()
    );
    Ok(())
}

// ── extract ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct ExtractArgs {
    /// Input feature cache
    #[arg(long)]
    cache: PathBuf,
    /// Pre-trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for representation MAMF files
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// last or weighted
    #[arg(long)]
    mode: Option<String>,
    /// Mixer file from a weighted probe run (logits=... / gamma=...)
    #[arg(long)]
    mixer: Option<PathBuf>,
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let mut snap = Snapshot::default();
    snap.set("command", "extract");
    let mut cfg = a.model.build(&mut file, &mut snap)?;
    let mode = resolve(a.mode, &mut file, "mode", "last".to_string())?;
    let mixer_path = resolve_opt(a.mixer, &mut file, "mixer")?;
    file.finish()?;

    let inputs = load_cache(&a.cache)?;
    let ck = checkpoint::load(&a.ckpt)?;
    fit_config_to_cache(&mut cfg, &inputs, Some(&ck))?;

    let mixer = match (mode.as_str(), &mixer_path) {
        ("last", _) => None,
        ("weighted", Some(p)) => {
            let m = read_mixer(p)?;
            if m.n_layers() != cfg.layers {
                bail!("mixer spans {} layers but the model has {}", m.n_layers(), cfg.layers);
            }
            Some(m)
        }
        ("weighted", None) => {
            println!("no --mixer given; using uniform weights with gamma 1");
            Some(WeightedSumMixer::new(cfg.layers)?)
        }
        (other, _) => bail!("mode must be `last` or `weighted`, got `{other}`"),
    };

    snap.set("cache", a.cache.display());
    snap.set("ckpt", a.ckpt.display());
    snap.set("mode", &mode);
    if let Some(p) = &mixer_path {
        snap.set("mixer", p.display());
    }
    snap.write(&a.out)?;

    let paths = dump_representations(&a.out, &cfg, &ck.params, &inputs, mixer.as_ref())?;
    let mut ids: Vec<String> = paths
        .iter()
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    ids.sort();
    write_text_atomic(&a.out.join("manifest.txt"), &(ids.join("\n") + "\n"))?;
    println!("wrote {} representation files to {}", paths.len(), a.out.display());
    Ok(())
}

// ── probe ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct ProbeArgs {
    /// Feature cache (raw features; representations are derived in-process)
    #[arg(long)]
    cache: PathBuf,
    /// Checkpoint, required for repr-last / repr-weighted inputs
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for report.csv (and mixer.txt when weighted)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// mel, repr-last or repr-weighted
    #[arg(long)]
    input: Option<String>,
    /// frame (linear classifier) or utterance (RNN classifier)
    #[arg(long)]
    task: Option<String>,
    /// Frame-label CSV (utterance_id,frame_index,class_id)
    #[arg(long)]
    frame_labels: Option<PathBuf>,
    /// Utterance-label CSV (utterance_id,class_id)
    #[arg(long)]
    utterance_labels: Option<PathBuf>,
    /// Comma-separated ascending label budgets in (0,1], frame task only
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_frames: Option<usize>,
    #[arg(long)]
    batch_utterances: Option<usize>,
    #[arg(long)]
    rnn_width: Option<usize>,
    #[arg(long)]
    mean_pool: Option<bool>,
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let mut snap = Snapshot::default();
    snap.set("command", "probe");
    let mut cfg = a.model.build(&mut file, &mut snap)?;

    let input_kind = resolve(a.input, &mut file, "input", "mel".to_string())?;
    let task = resolve(a.task, &mut file, "task", "frame".to_string())?;
    let budget_raw = resolve_opt(a.budget, &mut file, "budget")?;
    let pd = ProbeConfig::default();
    let pcfg = ProbeConfig {
        lr: resolve(a.lr, &mut file, "lr", pd.lr)?,
        max_epochs: resolve(a.max_epochs, &mut file, "max_epochs", pd.max_epochs)?,
        patience: resolve(a.patience, &mut file, "patience", pd.patience)?,
        batch_frames: resolve(a.batch_frames, &mut file, "batch_frames", pd.batch_frames)?,
        batch_utterances: resolve(a.batch_utterances, &mut file, "batch_utterances", pd.batch_utterances)?,
        rnn_width: resolve(a.rnn_width, &mut file, "rnn_width", pd.rnn_width)?,
        mean_pool: resolve(a.mean_pool, &mut file, "mean_pool", pd.mean_pool)?,
        seed: resolve(a.seed, &mut file, "seed", pd.seed)?,
    };
    file.finish()?;

    let budgets: Vec<f64> = match &budget_raw {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad budget `{x}`")))
            .collect::<Result<_>>()?,
        None => vec![1.0],
    };

    let features = load_cache(&a.cache)?;
    let needs_ckpt = input_kind != "mel";
    let ck = match (&a.ckpt, needs_ckpt) {
        (Some(p), _) => Some(checkpoint::load(p)?),
        (None, true) => bail!("--input {input_kind} needs --ckpt (a pre-trained checkpoint)"),
        (None, false) => None,
    };
    if let Some(ck) = &ck {
        fit_config_to_cache(&mut cfg, &features, Some(ck))?;
    }

    snap.set("cache", a.cache.display());
    if let Some(p) = &a.ckpt {
        snap.set("ckpt", p.display());
    }
    snap.set("input", &input_kind);
    snap.set("task", &task);
    snap.set("budgets", budgets.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    snap.set("lr", pcfg.lr);
    snap.set("max_epochs", pcfg.max_epochs);
    snap.set("patience", pcfg.patience);
    snap.set("batch_frames", pcfg.batch_frames);
    snap.set("batch_utterances", pcfg.batch_utterances);
    snap.set("rnn_width", pcfg.rnn_width);
    snap.set("mean_pool", pcfg.mean_pool);
    snap.set("seed", pcfg.seed);
    snap.write(&a.out)?;

    // Materialize the probe input.
    let mut fixed: Vec<FeatureSequence> = Vec::new();
    let mut stacks: Vec<LayerStack> = Vec::new();
    match input_kind.as_str() {
        "mel" => fixed = features.clone(),
        "repr-last" => {
            let ck = ck.as_ref().unwrap();
            for seq in &features {
                fixed.push(extract_last(&cfg, &ck.params, seq)?);
            }
        }
        "repr-weighted" => {
            let ck = ck.as_ref().unwrap();
            for seq in &features {
                stacks.push(extract_layers(&cfg, &ck.params, seq)?);
            }
        }
        other => bail!("input must be `mel`, `repr-last` or `repr-weighted`, got `{other}`"),
    }
    let input = if input_kind == "repr-weighted" {
        ProbeInput::Mixed(&stacks)
    } else {
        ProbeInput::Fixed(&fixed)
    };

    let mut reports: Vec<ProbeReport> = Vec::new();
    match task.as_str() {
        "frame" => {
            let path = a
                .frame_labels
                .as_ref()
                .context("--task frame needs --frame-labels CSV")?;
            let labels = FrameLabelSet::read_csv(path)?;
            if budgets.len() == 1 {
                let art = train_linear_frame_probe(&input, &labels, budgets[0], &pcfg)?;
                if let Some(m) = &art.mixer {
                    write_mixer(&a.out.join("mixer.txt"), m)?;
                }
                reports.push(art.report);
            } else {
                reports = low_resource_sweep(&input, &labels, &budgets, &pcfg)?;
                if input_kind == "repr-weighted" {
                    // Keep the mixer of the full-budget run as the artifact.
                    let art = train_linear_frame_probe(&input, &labels, *budgets.last().unwrap(), &pcfg)?;
                    if let Some(m) = &art.mixer {
                        write_mixer(&a.out.join("mixer.txt"), m)?;
                    }
                }
            }
        }
        "utterance" => {
            if budget_raw.is_some() {
                bail!("--budget applies to the frame task only");
            }
            let path = a
                .utterance_labels
                .as_ref()
                .context("--task utterance needs --utterance-labels CSV")?;
            let labels = UtteranceLabelSet::read_csv(path)?;
            let art = train_rnn_utterance_probe(&input, &labels, &pcfg)?;
            if let Some(m) = &art.mixer {
                write_mixer(&a.out.join("mixer.txt"), m)?;
            }
            reports.push(art.report);
        }
        other => bail!("task must be `frame` or `utterance`, got `{other}`"),
    }

    write_report_csv(&a.out.join("report.csv"), &reports)?;
    for r in &reports {
        println!(
            "{} {} budget {}: accuracy {:.4} ({})",
            r.input_kind, r.task, r.budget, r.accuracy, r.split
        );
    }
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────────

#[derive(Args)]
struct FinetuneArgs {
    /// Raw feature cache
    #[arg(long)]
    cache: PathBuf,
    /// Pre-trained checkpoint to start from
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Frame-label CSV
    #[arg(long)]
    frame_labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// 0 freezes the encoder (reduces to probe training)
    #[arg(long)]
    encoder_lr_scale: Option<f64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_utterances: Option<usize>,
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut file = KvConfig::load(a.config.as_deref())?;
    let mut snap = Snapshot::default();
    snap.set("command", "finetune");
    let mut cfg = a.model.build(&mut file, &mut snap)?;
    let od = FinetuneOptions::default();
    let opts = FinetuneOptions {
        epochs: resolve(a.epochs, &mut file, "epochs", od.epochs)?,
        encoder_lr_scale: resolve(a.encoder_lr_scale, &mut file, "encoder_lr_scale", od.encoder_lr_scale)?,
        peak_lr: resolve(a.peak_lr, &mut file, "peak_lr", od.peak_lr)?,
        batch_utterances: resolve(a.batch_utterances, &mut file, "batch_utterances", od.batch_utterances)?,
    };
    let seed_value = resolve(a.seed, &mut file, "seed", 0u64)?;
    let labels_path = resolve_opt(a.frame_labels, &mut file, "frame_labels")?
        .context("finetune needs --frame-labels CSV")?;
    file.finish()?;

    let features = load_cache(&a.cache)?;
    let ck = checkpoint::load(&a.ckpt)?;
    fit_config_to_cache(&mut cfg, &features, Some(&ck))?;
    let labels = FrameLabelSet::read_csv(&labels_path)?;
    let pcfg = ProbeConfig { seed: seed_value, ..ProbeConfig::default() };

    snap.set("cache", a.cache.display());
    snap.set("ckpt", a.ckpt.display());
    snap.set("frame_labels", labels_path.display());
    snap.set("epochs", opts.epochs);
    snap.set("encoder_lr_scale", opts.encoder_lr_scale);
    snap.set("peak_lr", opts.peak_lr);
    snap.set("batch_utterances", opts.batch_utterances);
    snap.set("seed", seed_value);
    snap.write(&a.out)?;

    let out = finetune_frame_probe(&cfg, &ck.params, &features, &labels, &pcfg, &opts)?;
    write_report_csv(&a.out.join("report.csv"), std::slice::from_ref(&out.report))?;
    write_loss_csv(&a.out.join("loss.csv"), &out.log)?;
    let mut merged = out.encoder_params.clone();
    for (name, p) in out.classifier.iter() {
        merged.insert(name.clone(), p.shape.clone(), p.data.clone());
    }
    checkpoint::save(&a.out.join("ckpt-finetuned.mamc"), out.log.len() as u64, &merged, None)?;
    println!(
        "fine-tuned {} steps; test accuracy {:.4}; artifacts in {}",
        out.log.len(),
        out.report.accuracy,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_config_parses_and_rejects_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed = 7\n\nbatch_size=3\n").unwrap();
        let mut cfg = KvConfig::load(Some(&path)).unwrap();
        let seed_value: u64 = resolve(None, &mut cfg, "seed", 0).unwrap();
        assert_eq!(seed_value, 7);
        // CLI value wins over the file and still consumes the key.
        let batch: usize = resolve(Some(9), &mut cfg, "batch_size", 1).unwrap();
        assert_eq!(batch, 9);
        cfg.finish().unwrap();

        std::fs::write(&path, "nonsense_key=1\n").unwrap();
        let cfg = KvConfig::load(Some(&path)).unwrap();
        let err = cfg.finish().unwrap_err().to_string();
        assert!(err.contains("nonsense_key"), "{err}");

        std::fs::write(&path, "broken line\n").unwrap();
        assert!(KvConfig::load(Some(&path)).is_err());
        std::fs::write(&path, "k=1\nk=2\n").unwrap();
        assert!(KvConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn mixer_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixer.txt");
        let m = WeightedSumMixer { layer_logits: vec![0.25, -1.5, 3.0], gamma: 0.75 };
        write_mixer(&path, &m).unwrap();
        let back = read_mixer(&path).unwrap();
        assert_eq!(back.layer_logits, m.layer_logits);
        assert_eq!(back.gamma, m.gamma);
        std::fs::write(&path, "gamma=1\n").unwrap();
        assert!(read_mixer(&path).is_err());
    }

    #[test]
    fn feature_kind_names_parse() {
        assert_eq!(parse_kind("mel").unwrap(), FeatureKind::Mel);
        assert_eq!(parse_kind("linear").unwrap(), FeatureKind::Linear);
        assert!(parse_kind("repr").is_err());
    }
}
