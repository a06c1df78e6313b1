//! Frame-level phone classification with linear probes: raw features
//! versus pre-trained representations (last layer and learned weighted
//! sum), plus a low-resource label-budget sweep.

use mam::features::{extract_features, FeatureConfig, FeatureKind};
use mam::masking::MaskPolicy;
use mam::model::EncoderConfig;
use mam::probes::{low_resource_sweep, train_linear_frame_probe, ProbeConfig, ProbeInput};
use mam::repr::{extract_last, extract_layers};
use mam::synth::{generate, SynthConfig};
use mam::train::{pretrain, RunConfig, TrainSchedule};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig { n_utterances: 40, seed: 31, ..SynthConfig::default() })?;
    let fcfg = FeatureConfig { n_mels: 40, ..FeatureConfig::default() };
    let seqs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| extract_features(&u.samples, corpus.sample_rate_hz, &fcfg, FeatureKind::Mel, 1, &u.id))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = corpus.frame_labels();

    println!("pre-training the tiny encoder (this is the slow part)...");
    let cfg = EncoderConfig::tiny();
    let sched = TrainSchedule { total_steps: 800, batch_size: 6, peak_lr: 1e-3, ..TrainSchedule::pretrain_default() };
    let trained = pretrain(&seqs, None, &cfg, &MaskPolicy::default(), &sched, RunConfig::in_memory(3))?;

    let last: Vec<_> = seqs.iter().map(|s| extract_last(&cfg, &trained.params, s)).collect::<Result<_, _>>()?;
    let stacks: Vec<_> = seqs.iter().map(|s| extract_layers(&cfg, &trained.params, s)).collect::<Result<_, _>>()?;

    let pcfg = ProbeConfig::default();
    for (name, input) in [
        ("mel          ", ProbeInput::Fixed(&seqs)),
        ("repr-last    ", ProbeInput::Fixed(&last)),
        ("repr-weighted", ProbeInput::Mixed(&stacks)),
    ] {
        let art = train_linear_frame_probe(&input, &labels, 1.0, &pcfg)?;
        print!("{name} accuracy {:.4}", art.report.accuracy);
        if let Some(m) = &art.mixer {
            print!("  (learned layer weights {:?})", m.weights());
        }
        println!();
    }

    // Shrinking the labeled training set while the test set stays fixed.
    println!("label-budget sweep on repr-last:");
    let budgets = [0.05, 0.2, 1.0];
    for r in low_resource_sweep(&ProbeInput::Fixed(&last), &labels, &budgets, &pcfg)? {
        println!("  budget {:>4}: accuracy {:.4}  ({})", r.budget, r.accuracy, r.split);
    }
    Ok(())
}
