//! Generate the synthetic evaluation corpus and look at what is in it:
//! four tonal phone classes (two steady dyads, two chirps that are only
//! distinguishable from context) spoken by gain/warp-varied speakers.

use mam::synth::{generate, write_corpus, SynthConfig, PHONE_CLASSES};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig { n_utterances: 8, n_speakers: 3, seed: 42, ..SynthConfig::default() };
    let corpus = generate(&cfg)?;

    println!("generated {} utterances at {} Hz", corpus.utterances.len(), corpus.sample_rate_hz);
    for u in &corpus.utterances {
        let secs = u.samples.len() as f64 / corpus.sample_rate_hz as f64;
        let peak = u.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
        println!(
            "  {}: speaker {} | {:.2} s | {} labeled frames | peak {:.3}",
            u.id,
            u.speaker,
            secs,
            u.frame_labels.len(),
            peak
        );
    }

    // Class occupancy over all frames.
    let mut counts = [0usize; PHONE_CLASSES];
    for u in &corpus.utterances {
        for &c in &u.frame_labels {
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    println!("frame label distribution over {total} frames:");
    for (c, n) in counts.iter().enumerate() {
        println!("  class {c}: {:.1}%", 100.0 * *n as f64 / total as f64);
    }

    let dir = std::env::temp_dir().join("mam-example-corpus");
    let paths = write_corpus(&dir, &corpus)?;
    println!("wrote WAVs to {}", paths.wav_dir.display());
    println!("frame labels: {}", paths.frame_labels.display());
    println!("speaker labels: {}", paths.speaker_labels.display());
    Ok(())
}
