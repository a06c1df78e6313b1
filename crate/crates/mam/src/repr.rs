//! Frozen-encoder representation access: run the encoder in eval mode over
//! whole utterances, keep every layer's output, and either take the last
//! layer or learn a softmax-weighted combination of all of them.
//!
//! Extraction is deterministic: eval mode disables dropout, so the output
//! is a pure function of weights and features.

use std::path::{Path, PathBuf};

use crate::features::{write_mamf, FeatureError, FeatureKind, FeatureSequence};
use crate::model::{bind, encode, EncoderConfig, ModelError, ParamSet};
use crate::seed;
use crate::tensor::{Scalar, Tape, TensorError, TensorId};
use crate::train::chunk_sequence;

#[derive(Debug, thiserror::Error)]
pub enum ReprError {
    #[error("utterance {id}: feature dim {found} but encoder expects {expected}")]
    InputDim { id: String, expected: usize, found: usize },
    #[error("utterance {id} has no frames")]
    EmptySequence { id: String },
    #[error("mixer spans {expected} layers but the stack has {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("mixer needs at least one layer")]
    NoLayers,
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type ReprResult<T> = Result<T, ReprError>;

/// Every encoder layer's output for one utterance. The input embedding is
/// deliberately absent: downstream consumers weigh transformer layers only.
pub struct LayerStack {
    /// layers[l] is t*d row-major, l = 0 the first encoder layer.
    pub layers: Vec<Vec<f32>>,
    pub t: usize,
    pub d: usize,
    pub utterance_id: String,
    pub sample_rate_hz: u32,
    pub hop_ms: f32,
    pub stack_factor: usize,
}

impl LayerStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sequence(&self, l: usize) -> FeatureSequence {
        self.as_sequence(self.layers[l].clone())
    }

    pub fn last_sequence(&self) -> FeatureSequence {
        self.layer_sequence(self.layers.len() - 1)
    }

    fn as_sequence(&self, frames: Vec<f32>) -> FeatureSequence {
        FeatureSequence {
            frames,
            t: self.t,
            d: self.d,
            kind: FeatureKind::Repr,
            sample_rate_hz: self.sample_rate_hz,
            hop_ms: self.hop_ms,
            stack_factor: self.stack_factor,
            utterance_id: self.utterance_id.clone(),
        }
    }
}

/// Eval-mode forward pass over one utterance, batch of one. Utterances
/// longer than the encoder's max length are split into balanced chunks
/// whose outputs concatenate back to the full timeline.
pub fn extract_layers(
    cfg: &EncoderConfig,
    params: &ParamSet,
    seq: &FeatureSequence,
) -> ReprResult<LayerStack> {
    cfg.validate()?;
    if seq.t == 0 {
        return Err(ReprError::EmptySequence { id: seq.utterance_id.clone() });
    }
    if seq.d != cfg.input_dim {
        return Err(ReprError::InputDim {
            id: seq.utterance_id.clone(),
            expected: cfg.input_dim,
            found: seq.d,
        });
    }
    let mut layers: Vec<Vec<f32>> = (0..cfg.layers)
        .map(|_| Vec::with_capacity(seq.t * cfg.hidden_dim))
        .collect();
    for chunk in chunk_sequence(seq, cfg.max_seq_len) {
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, params);
        let x = tape.constant(chunk.frames.clone(), vec![chunk.t, cfg.input_dim]);
        // Eval mode never draws from the RNG; any seed works.
        let mut rng = seed::rng_for(&[0]);
        let out = encode(&mut tape, cfg, &bound, x, 1, chunk.t, &[chunk.t], false, &mut rng)?;
        for (l, &id) in out.layers.iter().enumerate() {
            layers[l].extend_from_slice(tape.data(id));
        }
    }
    Ok(LayerStack {
        layers,
        t: seq.t,
        d: cfg.hidden_dim,
        utterance_id: seq.utterance_id.clone(),
        sample_rate_hz: seq.sample_rate_hz,
        hop_ms: seq.hop_ms,
        stack_factor: seq.stack_factor,
    })
}

/// The conventional downstream representation: last encoder layer.
pub fn extract_last(
    cfg: &EncoderConfig,
    params: &ParamSet,
    seq: &FeatureSequence,
) -> ReprResult<FeatureSequence> {
    Ok(extract_layers(cfg, params, seq)?.last_sequence())
}

/// Learnable softmax-weighted sum over encoder layers with a global scale:
/// out = gamma * sum_l softmax(logits)[l] * layer_l. Logits and gamma train
/// jointly with whatever probe consumes the mix.
#[derive(Clone, Debug)]
pub struct WeightedSumMixer {
    pub layer_logits: Vec<f32>,
    pub gamma: f32,
}

impl WeightedSumMixer {
    /// Uniform start: zero logits, unit scale.
    pub fn new(n_layers: usize) -> ReprResult<Self> {
        if n_layers == 0 {
            return Err(ReprError::NoLayers);
        }
        Ok(WeightedSumMixer { layer_logits: vec![0.0; n_layers], gamma: 1.0 })
    }

    pub fn n_layers(&self) -> usize {
        self.layer_logits.len()
    }

    /// Softmax of the logits, accumulated in f64. Always sums to 1.
    pub fn weights(&self) -> Vec<f32> {
        let mx = self.layer_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = self.layer_logits.iter().map(|&l| f64::from(l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|&e| (e / z) as f32).collect()
    }

    /// Plain (non-differentiable) combination for extraction pipelines.
    pub fn combine(&self, stack: &LayerStack) -> ReprResult<FeatureSequence> {
        if stack.n_layers() != self.n_layers() {
            return Err(ReprError::LayerCount { expected: self.n_layers(), found: stack.n_layers() });
        }
        let w = self.weights();
        let mut frames = vec![0.0f32; stack.t * stack.d];
        for (l, layer) in stack.layers.iter().enumerate() {
            for (acc, &v) in frames.iter_mut().zip(layer) {
                *acc += w[l] * v;
            }
        }
        for v in &mut frames {
            *v *= self.gamma;
        }
        Ok(stack.as_sequence(frames))
    }

    /// Register the mixer's parameters under `mixer.logits` / `mixer.gamma`
    /// so a probe optimizer updates them alongside its own weights.
    pub fn to_params(&self, params: &mut ParamSet) {
        params.insert("mixer.logits", vec![1, self.n_layers()], self.layer_logits.clone());
        params.insert("mixer.gamma", vec![1], vec![self.gamma]);
    }

    pub fn from_params(params: &ParamSet) -> Option<Self> {
        let logits = params.get("mixer.logits")?;
        let gamma = params.get("mixer.gamma")?;
        Some(WeightedSumMixer { layer_logits: logits.data.clone(), gamma: gamma.data[0] })
    }
}

/// Differentiable mixer graph: softmax the logits tensor, then combine the
/// layer tensors. `logits` is [1, n_layers]; `gamma` one element.
pub fn mix_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    layers: &[TensorId],
    logits: TensorId,
    gamma: TensorId,
) -> Result<TensorId, TensorError> {
    let w = tape.softmax_rows(logits)?;
    tape.weighted_combine(layers, w, gamma)
}

/// Extract a representation per utterance and write one MAMF file each,
/// named after the (sanitized) utterance id. With a mixer the output is its
/// weighted combination; without, the last layer. Returns the paths.
pub fn dump_representations(
    dir: &Path,
    cfg: &EncoderConfig,
    params: &ParamSet,
    seqs: &[FeatureSequence],
    mixer: Option<&WeightedSumMixer>,
) -> ReprResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| ReprError::Io { path: dir.to_path_buf(), source })?;
    let mut paths = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let stack = extract_layers(cfg, params, seq)?;
        let repr = match mixer {
            Some(m) => m.combine(&stack)?,
            None => stack.last_sequence(),
        };
        let path = dir.join(format!("{}.mamf", sanitize(&seq.utterance_id)));
        write_mamf(&path, &repr)?;
        paths.push(path);
    }
    Ok(paths)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::read_mamf;
    use crate::model::init_weights;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 16,
            ff_dim: 32,
            heads: 2,
            layers: 2,
            downsample: 1,
            consecutive: 3,
            input_dim: 8,
            target_dim: 8,
            // Nonzero on purpose: extraction must ignore it.
            dropout: 0.5,
            target_kind: FeatureKind::Mel,
            max_seq_len: 64,
        }
    }

    fn toy(id: &str, t: usize) -> FeatureSequence {
        let d = 8;
        FeatureSequence {
            frames: (0..t * d).map(|i| (i as f32 * 0.37).sin()).collect(),
            t,
            d,
            kind: FeatureKind::Mel,
            sample_rate_hz: 16_000,
            hop_ms: 10.0,
            stack_factor: 1,
            utterance_id: id.into(),
        }
    }

    #[test]
    fn extraction_is_deterministic_despite_dropout_config() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 3);
        let seq = toy("u", 12);
        let a = extract_last(&cfg, &params, &seq).unwrap();
        let b = extract_last(&cfg, &params, &seq).unwrap();
        assert_eq!(a.t, 12);
        assert_eq!(a.d, 16);
        assert_eq!(a.kind, FeatureKind::Repr);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn saturated_mixer_matches_last_layer() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 7);
        let seq = toy("u", 10);
        let stack = extract_layers(&cfg, &params, &seq).unwrap();
        let mixer = WeightedSumMixer { layer_logits: vec![-20.0, 20.0], gamma: 1.0 };
        let w = mixer.weights();
        assert!((w.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        let mixed = mixer.combine(&stack).unwrap();
        let last = stack.last_sequence();
        for (a, b) in mixed.frames.iter().zip(&last.frames) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_mixer_averages_layers() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 9);
        let stack = extract_layers(&cfg, &params, &toy("u", 6)).unwrap();
        let mixed = WeightedSumMixer::new(2).unwrap().combine(&stack).unwrap();
        for i in 0..stack.t * stack.d {
            let mean = 0.5 * (stack.layers[0][i] + stack.layers[1][i]);
            assert!((mixed.frames[i] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_scales_and_zero_gamma_blanks() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 11);
        let stack = extract_layers(&cfg, &params, &toy("u", 5)).unwrap();
        let base = WeightedSumMixer { layer_logits: vec![0.4, -0.2], gamma: 1.0 };
        let doubled = WeightedSumMixer { gamma: 2.0, ..base.clone() };
        let zeroed = WeightedSumMixer { gamma: 0.0, ..base.clone() };
        let a = base.combine(&stack).unwrap();
        let b = doubled.combine(&stack).unwrap();
        let z = zeroed.combine(&stack).unwrap();
        for i in 0..a.frames.len() {
            assert_eq!((2.0 * a.frames[i]).to_bits(), b.frames[i].to_bits());
            assert_eq!(z.frames[i], 0.0);
        }
    }

    #[test]
    fn mixer_is_layer_permutation_equivariant() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 13);
        let stack = extract_layers(&cfg, &params, &toy("u", 4)).unwrap();
        let swapped = LayerStack {
            layers: vec![stack.layers[1].clone(), stack.layers[0].clone()],
            ..extract_layers(&cfg, &params, &toy("u", 4)).unwrap()
        };
        let m = WeightedSumMixer { layer_logits: vec![0.3, -0.7], gamma: 1.3 };
        let ms = WeightedSumMixer { layer_logits: vec![-0.7, 0.3], gamma: 1.3 };
        let a = m.combine(&stack).unwrap();
        let b = ms.combine(&swapped).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn long_utterances_chunk_and_concatenate() {
        let cfg = EncoderConfig { max_seq_len: 8, ..tiny_cfg() };
        let params = init_weights(&cfg, 17);
        let seq = toy("long", 20);
        let full = extract_last(&cfg, &params, &seq).unwrap();
        assert_eq!(full.t, 20);
        // First balanced chunk of 20 over max 8 is 7 rows; extracting that
        // slice alone must reproduce the first 7 output rows exactly.
        let head = FeatureSequence {
            frames: seq.frames[..7 * 8].to_vec(),
            t: 7,
            utterance_id: "head".into(),
            ..seq.clone()
        };
        let head_out = extract_last(&cfg, &params, &head).unwrap();
        for (a, b) in full.frames[..7 * 16].iter().zip(&head_out.frames) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mix_on_tape_matches_plain_combine() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 19);
        let stack = extract_layers(&cfg, &params, &toy("u", 6)).unwrap();
        let mixer = WeightedSumMixer { layer_logits: vec![0.9, -0.4], gamma: 0.8 };
        let plain = mixer.combine(&stack).unwrap();

        let mut tape = Tape::<f32>::new();
        let shape = vec![stack.t, stack.d];
        let ids: Vec<_> = stack
            .layers
            .iter()
            .map(|l| tape.constant(l.clone(), shape.clone()))
            .collect();
        let logits = tape.push_param(mixer.layer_logits.clone(), vec![1, 2]);
        let gamma = tape.push_param(vec![mixer.gamma], vec![1]);
        let mixed = mix_on_tape(&mut tape, &ids, logits, gamma).unwrap();
        for (a, b) in tape.data(mixed).iter().zip(&plain.frames) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn dump_round_trips_bitwise() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 23);
        let seqs = vec![toy("utt/one", 6), toy("utt/two", 9)];
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_representations(dir.path(), &cfg, &params, &seqs, None).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[0].ends_with("utt_one.mamf"));
        let back = read_mamf(&paths[1]).unwrap();
        assert_eq!(back.kind, FeatureKind::Repr);
        let direct = extract_last(&cfg, &params, &seqs[1]).unwrap();
        assert_eq!(back.t, direct.t);
        for (a, b) in back.frames.iter().zip(&direct.frames) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Re-dumping produces byte-identical files.
        let before = std::fs::read(&paths[0]).unwrap();
        dump_representations(dir.path(), &cfg, &params, &seqs, None).unwrap();
        assert_eq!(before, std::fs::read(&paths[0]).unwrap());
    }

    #[test]
    fn dimension_and_layer_count_errors() {
        let cfg = tiny_cfg();
        let params = init_weights(&cfg, 29);
        let bad = FeatureSequence { d: 5, frames: vec![0.0; 20], t: 4, ..toy("bad", 4) };
        assert!(matches!(
            extract_layers(&cfg, &params, &bad),
            Err(ReprError::InputDim { .. })
        ));
        let stack = extract_layers(&cfg, &params, &toy("u", 4)).unwrap();
        let wrong = WeightedSumMixer::new(3).unwrap();
        assert!(matches!(wrong.combine(&stack), Err(ReprError::LayerCount { .. })));
    }
}
