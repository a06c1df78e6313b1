//! Self-supervised speech representation learning on CPU.
//!
//! Pipeline: WAV audio → log Mel / linear spectrogram features → masked
//! acoustic modeling pre-training of a bidirectional transformer encoder →
//! frozen representation extraction → linear / recurrent probes (or full
//! fine-tuning) on frame and utterance classification tasks.

pub mod cli;
pub mod features;
pub mod masking;
pub mod model;
pub mod probes;
pub mod repr;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
