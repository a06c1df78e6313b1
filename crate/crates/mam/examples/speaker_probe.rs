//! Utterance-level speaker identification with a single-layer RNN probe,
//! on raw features versus pre-trained last-layer representations.
//!
//! The raw-feature baseline is expected to do poorly here: un-normalized
//! log-power values sit far from unit scale and saturate the RNN's tanh,
//! while encoder representations hand the same probe a well-conditioned
//! input. That gap, not any probe tweak, is the point of the comparison.

use mam::features::{extract_features, FeatureConfig, FeatureKind};
use mam::masking::MaskPolicy;
use mam::model::EncoderConfig;
use mam::probes::{train_rnn_utterance_probe, ProbeConfig, ProbeInput};
use mam::repr::extract_last;
use mam::synth::{generate, SynthConfig};
use mam::train::{pretrain, RunConfig, TrainSchedule};

fn main() -> anyhow::Result<()> {
    let corpus = generate(&SynthConfig { n_utterances: 60, n_speakers: 3, seed: 41, ..SynthConfig::default() })?;
    // Speaker identity lives in amplitude gain and frequency warp. CMVN
    // would remove the gain (the strong cue), so it stays off here; the
    // raised log floor keeps silent bins near zero instead of ln(1e-10).
    let fcfg = FeatureConfig { n_mels: 40, cmvn: false, log_floor: 1e-2, ..FeatureConfig::default() };
    let seqs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| extract_features(&u.samples, corpus.sample_rate_hz, &fcfg, FeatureKind::Mel, 1, &u.id))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = corpus.speaker_labels();

    let cfg = EncoderConfig::tiny();
    let sched = TrainSchedule { total_steps: 400, batch_size: 6, peak_lr: 1e-3, ..TrainSchedule::pretrain_default() };
    let trained = pretrain(&seqs, None, &cfg, &MaskPolicy::default(), &sched, RunConfig::in_memory(4))?;
    let last: Vec<_> = seqs.iter().map(|s| extract_last(&cfg, &trained.params, s)).collect::<Result<_, _>>()?;

    // A narrower RNN keeps this example quick.
    let pcfg = ProbeConfig { rnn_width: 64, max_epochs: 40, ..ProbeConfig::default() };
    for (name, input) in [("mel      ", ProbeInput::Fixed(&seqs)), ("repr-last", ProbeInput::Fixed(&last))] {
        let art = train_rnn_utterance_probe(&input, &labels, &pcfg)?;
        println!("{name} speaker accuracy {:.4}  ({})", art.report.accuracy, art.report.split);
    }

    // Mean pooling before the readout is the other standard variant.
    let pooled = ProbeConfig { mean_pool: true, ..pcfg };
    let art = train_rnn_utterance_probe(&ProbeInput::Fixed(&last), &labels, &pooled)?;
    println!("repr-last with mean pooling: accuracy {:.4}", art.report.accuracy);
    Ok(())
}
