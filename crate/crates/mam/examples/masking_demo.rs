//! The masking policy in isolation: block selection statistics, the
//! 80/10/10 alteration branches, and why masks re-roll across epochs while
//! staying reproducible.

use mam::masking::{make_batch, select_positions, AlterBranch, MaskPolicy};
use mam::seed::{fnv1a, mix, rng_for};
use mam::synth::{generate, SynthConfig};
use mam::features::{extract_features, FeatureConfig, FeatureKind};

fn main() -> anyhow::Result<()> {
    let policy = MaskPolicy::default();
    println!(
        "policy: mask {:.0}% of frames in blocks of {}, alter zero/random/keep = {}/{}/{}",
        policy.mask_proportion * 100.0,
        policy.consecutive,
        policy.p_zero,
        policy.p_random,
        policy.p_keep
    );

    // Selection statistics over many draws on a 500-step utterance.
    let t = 500;
    let mut rng = rng_for(&[1, fnv1a("demo")]);
    let (mut masked, mut draws) = (0usize, 0usize);
    for _ in 0..2000 {
        let sel = select_positions(t, &policy, &mut rng)?;
        masked += sel.iter().filter(|&&s| s).count();
        draws += t;
    }
    println!("empirical masked fraction over 2000 draws: {:.4}", masked as f64 / draws as f64);

    // Branch frequencies over single-utterance batches.
    let cfg = SynthConfig { n_utterances: 40, seed: 5, ..SynthConfig::default() };
    let corpus = generate(&cfg)?;
    let fcfg = FeatureConfig { n_mels: 40, ..FeatureConfig::default() };
    let seqs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| extract_features(&u.samples, corpus.sample_rate_hz, &fcfg, FeatureKind::Mel, 1, &u.id))
        .collect::<Result<_, _>>()?;

    let mut freq = [0usize; 3];
    for epoch in 0..50u64 {
        let batch = make_batch(&seqs, &policy, mix(&[9, epoch, fnv1a("mask")]))?;
        for b in &batch.branches {
            freq[match b {
                AlterBranch::Zero => 0,
                AlterBranch::RandomReplace => 1,
                AlterBranch::Keep => 2,
            }] += 1;
        }
    }
    let total: usize = freq.iter().sum();
    println!(
        "alteration branches over {total} utterance draws: zero {:.3}, random {:.3}, keep {:.3}",
        freq[0] as f64 / total as f64,
        freq[1] as f64 / total as f64,
        freq[2] as f64 / total as f64,
    );

    // Dynamic masking: same epoch seed means identical masks, a new epoch
    // re-rolls them.
    let e0 = make_batch(&seqs, &policy, mix(&[9, 0, fnv1a("mask")]))?;
    let e0_again = make_batch(&seqs, &policy, mix(&[9, 0, fnv1a("mask")]))?;
    let e1 = make_batch(&seqs, &policy, mix(&[9, 1, fnv1a("mask")]))?;
    println!(
        "same epoch reproduces the masks: {}; next epoch differs: {}",
        e0.select_mask == e0_again.select_mask,
        e0.select_mask != e1.select_mask
    );

    // Unselected frames pass through bit-for-bit.
    let batch = make_batch(&seqs[..1], &policy, 123)?;
    let d = batch.d_in;
    let untouched = (0..batch.lengths[0])
        .filter(|&i| !batch.select_mask[i])
        .all(|i| batch.inputs[i * d..(i + 1) * d] == seqs[0].frames[i * d..(i + 1) * d]);
    println!("unselected frames bitwise untouched: {untouched}");
    Ok(())
}
