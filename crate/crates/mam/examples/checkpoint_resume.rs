//! Checkpointing: serialize a training run mid-flight, resume it, and end
//! up bitwise identical to the run that never stopped.

use mam::features::{extract_features, FeatureConfig, FeatureKind};
use mam::masking::MaskPolicy;
use mam::model::EncoderConfig;
use mam::synth::{generate, SynthConfig};
use mam::train::{checkpoint, pretrain, RunConfig, TrainSchedule};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig { n_utterances: 10, seed: 61, ..SynthConfig::default() })?;
    let fcfg = FeatureConfig { n_mels: 40, ..FeatureConfig::default() };
    let seqs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| extract_features(&u.samples, corpus.sample_rate_hz, &fcfg, FeatureKind::Mel, 1, &u.id))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = EncoderConfig::tiny();
    let policy = MaskPolicy::default();
    // Warmup and decay scale with total_steps, so a resumable checkpoint
    // has to come from the target schedule itself; checkpoint_interval
    // captures it mid-flight.
    let sched = TrainSchedule { total_steps: 60, batch_size: 4, ..TrainSchedule::pretrain_default() };
    let dir = std::env::temp_dir().join("mam-example-resume");

    let straight = pretrain(
        &seqs,
        None,
        &cfg,
        &policy,
        &sched,
        RunConfig { out_dir: Some(dir.clone()), checkpoint_interval: 30, ..RunConfig::in_memory(7) },
    )?;
    let path = dir.join("ckpt-0000030.mamc");
    println!("uninterrupted run wrote a mid-flight checkpoint to {}", path.display());

    let ck = checkpoint::load(&path)?;
    println!("loaded: step {}, {} tensors, optimizer state {}", ck.step, ck.params.len(), ck.has_optimizer());
    let resumed = pretrain(
        &seqs,
        None,
        &cfg,
        &policy,
        &sched,
        RunConfig { resume: Some(ck), ..RunConfig::in_memory(7) },
    )?;

    let identical = straight
        .params
        .iter()
        .zip(resumed.params.iter())
        .all(|((na, a), (nb, b))| na == nb && a.data == b.data);
    println!("resumed weights match the uninterrupted run bitwise: {identical}");
    let tail_match = straight.log[30..]
        .iter()
        .zip(&resumed.log)
        .all(|(a, b)| a.loss == b.loss && a.grad_norm == b.grad_norm);
    println!("per-step losses after the restart also match: {tail_match}");
    Ok(())
}
