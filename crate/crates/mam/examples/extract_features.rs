//! Waveform to model-ready features: log-Mel and log-linear spectrograms,
//! per-utterance CMVN, frame stacking, and the MAMF cache format.

use mam::features::{extract_features, read_mamf, write_mamf, FeatureConfig, FeatureKind};
use mam::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig { n_utterances: 1, seed: 7, ..SynthConfig::default() })?;
    let u = &corpus.utterances[0];
    println!("utterance {}: {} samples", u.id, u.samples.len());

    let cfg = FeatureConfig { n_mels: 80, ..FeatureConfig::default() };

    // 80-dim log-Mel, no stacking.
    let mel = extract_features(&u.samples, corpus.sample_rate_hz, &cfg, FeatureKind::Mel, 1, &u.id)?;
    println!("mel:    {} frames x {} dims (hop {} ms)", mel.t, mel.d, mel.hop_ms);

    // 201-dim log-linear magnitudes from the same waveform.
    let lin =
        extract_features(&u.samples, corpus.sample_rate_hz, &cfg, FeatureKind::Linear, 1, &u.id)?;
    println!("linear: {} frames x {} dims", lin.t, lin.d);

    // Stacking by 3 concatenates consecutive frames and shortens the
    // sequence: ceil(t/3) rows of 3x the width.
    let stacked =
        extract_features(&u.samples, corpus.sample_rate_hz, &cfg, FeatureKind::Mel, 3, &u.id)?;
    println!(
        "mel stacked x3: {} frames x {} dims (stack_factor {})",
        stacked.t, stacked.d, stacked.stack_factor
    );

    // CMVN leaves each coefficient near zero mean, unit variance.
    let d = mel.d;
    let mean0: f32 = (0..mel.t).map(|t| mel.frames[t * d]).sum::<f32>() / mel.t as f32;
    let var0: f32 =
        (0..mel.t).map(|t| (mel.frames[t * d] - mean0).powi(2)).sum::<f32>() / mel.t as f32;
    println!("coefficient 0 after CMVN: mean {mean0:+.2e}, variance {var0:.3}");

    // Round-trip through the cache format is bitwise exact.
    let path = std::env::temp_dir().join("mam-example-features.mamf");
    write_mamf(&path, &mel)?;
    let back = read_mamf(&path)?;
    assert_eq!(back.frames, mel.frames);
    assert_eq!(back.kind, FeatureKind::Mel);
    println!("cache round-trip at {} is bitwise identical", path.display());
    Ok(())
}
