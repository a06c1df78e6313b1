//! Pull representations out of a pre-trained encoder: the last hidden
//! layer, the full per-layer stack, and a learnable weighted sum over
//! layers (the mixer downstream probes can train through).

use mam::features::{extract_features, FeatureConfig, FeatureKind};
use mam::masking::MaskPolicy;
use mam::model::EncoderConfig;
use mam::repr::{dump_representations, extract_last, extract_layers, WeightedSumMixer};
use mam::synth::{generate, SynthConfig};
use mam::train::{pretrain, RunConfig, TrainSchedule};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig { n_utterances: 6, seed: 21, ..SynthConfig::default() })?;
    let fcfg = FeatureConfig { n_mels: 40, ..FeatureConfig::default() };
    let seqs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| extract_features(&u.samples, corpus.sample_rate_hz, &fcfg, FeatureKind::Mel, 1, &u.id))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = EncoderConfig::tiny();
    let sched = TrainSchedule { total_steps: 60, batch_size: 3, ..TrainSchedule::pretrain_default() };
    let trained = pretrain(&seqs, None, &cfg, &MaskPolicy::default(), &sched, RunConfig::in_memory(2))?;

    // Layer stack: one hidden-state sequence per encoder layer.
    let stack = extract_layers(&cfg, &trained.params, &seqs[0])?;
    println!(
        "{}: {} layers of {} frames x {} dims",
        stack.utterance_id,
        stack.n_layers(),
        stack.t,
        stack.d
    );

    // The conventional choice is the last layer.
    let last = extract_last(&cfg, &trained.params, &seqs[0])?;
    println!("last-layer representation: {} frames x {} dims ({})", last.t, last.d, last.kind.name());

    // A fresh mixer starts uniform; its weights always sum to one.
    let mixer = WeightedSumMixer::new(stack.n_layers())?;
    let w = mixer.weights();
    println!("uniform mixer weights: {w:?} (sum {})", w.iter().sum::<f32>());
    let mixed = mixer.combine(&stack)?;
    println!("mixed representation: {} frames x {} dims", mixed.t, mixed.d);

    // Saturating the logits on the last layer reproduces extract_last.
    let mut saturated = WeightedSumMixer::new(stack.n_layers())?;
    *saturated.layer_logits.last_mut().unwrap() = 20.0;
    let approx = saturated.combine(&stack)?;
    let max_diff = approx
        .frames
        .iter()
        .zip(&last.frames)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("saturated mixer vs last layer: max |diff| = {max_diff:.2e}");

    // Dump one MAMF file per utterance; these feed probes like any feature.
    let dir = std::env::temp_dir().join("mam-example-repr");
    let paths = dump_representations(&dir, &cfg, &trained.params, &seqs, Some(&mixer))?;
    println!("dumped {} representation files to {}", paths.len(), dir.display());
    Ok(())
}
