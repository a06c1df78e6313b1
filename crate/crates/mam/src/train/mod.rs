//! Pre-training loop and its moving parts: warmup/linear-decay schedule,
//! bias-corrected Adam with global-norm clipping, deterministic length
//! bucketing, loss logging and checkpointing.
//!
//! Every source of randomness is derived from (seed, epoch, step, purpose),
//! never from RNG state carried across steps, so a resumed run replays the
//! exact step sequence of an uninterrupted one.

pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::features::FeatureSequence;
use crate::masking::{make_batch_with_targets, MaskError, MaskPolicy, MaskedBatch};
use crate::model::{
    bind, encode, init_weights, predict_frames, EncoderConfig, ModelError, ParamSet,
};
use crate::seed;
use crate::tensor::{Tape, TensorError};
use checkpoint::{Checkpoint, CkptError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("utterance {id}: {detail}")]
    BadUtterance { id: String, detail: String },
    #[error("step {step}: non-finite gradient in tensor `{name}`; aborting")]
    NonFiniteGrad { step: u64, name: String },
    #[error("step {step}: loss is not finite")]
    NonFiniteLoss { step: u64 },
    #[error("no gradient produced for tensor `{0}`")]
    MissingGrad(String),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("resume checkpoint has no optimizer moments; cannot continue training from it")]
    ResumeWithoutOptimizer,
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
}

impl TrainSchedule {
    /// Published pre-training regime: 500k steps, 7% warmup to 4e-4.
    pub fn pretrain_default() -> Self {
        TrainSchedule {
            total_steps: 500_000,
            warmup_fraction: 0.07,
            peak_lr: 4e-4,
            batch_size: 6,
            dropout: 0.1,
            grad_clip: Some(1.0),
        }
    }

    /// Fine-tuning keeps the pre-training shape with a 4e-3 peak.
    pub fn finetune_default(total_steps: u64) -> Self {
        TrainSchedule { total_steps, peak_lr: 4e-3, ..Self::pretrain_default() }
    }

    pub fn validate(&self) -> TrainResult<()> {
        if self.total_steps == 0 {
            return Err(TrainError::BadSchedule("total_steps must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(TrainError::BadSchedule(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(TrainError::BadSchedule("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadSchedule("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadSchedule(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(TrainError::BadSchedule("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.total_steps as f64 * self.warmup_fraction).round() as u64).max(1)
    }
}

/// Piecewise-linear learning rate: 0 → peak over the warmup steps, then
/// peak → 0 at total_steps. Exact at the boundary (step == warmup gives
/// peak_lr with no rounding).
pub fn lr_at(step: u64, sched: &TrainSchedule) -> TrainResult<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(TrainError::StepOutOfRange { step, total: sched.total_steps });
    }
    let w = sched.warmup_steps();
    if step <= w {
        Ok(sched.peak_lr * (step as f64 / w as f64))
    } else {
        Ok(sched.peak_lr * ((sched.total_steps - step) as f64 / (sched.total_steps - w) as f64))
    }
}

/// Adam moments plus the shared step counter. Moments are f32 like the
/// parameters, so checkpoints restore the optimizer bitwise.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), p.shape.clone(), vec![0.0; p.data.len()]);
            v.insert(name.clone(), p.shape.clone(), vec![0.0; p.data.len()]);
        }
        OptimizerState { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> TrainResult<Self> {
        if !ck.has_optimizer() {
            return Err(TrainError::ResumeWithoutOptimizer);
        }
        Ok(OptimizerState {
            m: ck.opt_m.clone(),
            v: ck.opt_v.clone(),
            step: ck.step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// One bias-corrected Adam update over every named parameter, with
/// optional global-norm clipping. Returns the pre-clip gradient norm.
/// Any non-finite gradient aborts with the offending tensor's name.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimizerState,
    lr: f64,
    clip: Option<f64>,
) -> TrainResult<f64> {
    let step = state.step + 1;
    let mut sq_sum = 0.0f64;
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
        debug_assert_eq!(g.shape, p.shape, "{name}");
        for &gv in &g.data {
            if !gv.is_finite() {
                return Err(TrainError::NonFiniteGrad { step, name: name.clone() });
            }
            sq_sum += gv as f64 * gv as f64;
        }
    }
    let norm = sq_sum.sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    let bc1 = 1.0 - state.beta1.powi(step as i32);
    let bc2 = 1.0 - state.beta2.powi(step as i32);
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    for (name, p) in params.iter_mut() {
        let g = &grads.get(name).unwrap().data;
        let m = &mut state.m.get_mut(name).unwrap().data;
        let v = &mut state.v.get_mut(name).unwrap().data;
        for i in 0..p.data.len() {
            let gv = (g[i] as f64 * scale) as f32;
            m[i] = b1 * m[i] + (1.0 - b1) * gv;
            v[i] = b2 * v[i] + (1.0 - b2) * gv * gv;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            p.data[i] -= (lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
    state.step = step;
    Ok(norm)
}

/// Deterministic length bucketing: indices sorted by (length, index) are
/// chunked into batches, and the chunk order is shuffled per epoch. Every
/// index appears in exactly one batch.
pub fn plan_batches(lengths: &[usize], batch_size: usize, seed_value: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    let mut rng = seed::rng_for(&[seed_value, epoch, seed::fnv1a("batches")]);
    batches.shuffle(&mut rng);
    batches
}

/// Balanced chunk boundaries: sizes within one step of each other, none
/// above `max_len`, covering 0..t in order.
fn chunk_bounds(t: usize, max_len: usize) -> Vec<(usize, usize)> {
    if t <= max_len {
        return vec![(0, t)];
    }
    let n_chunks = t.div_ceil(max_len);
    let base = t / n_chunks;
    let extra = t % n_chunks;
    let mut out = Vec::with_capacity(n_chunks);
    let mut start = 0usize;
    for k in 0..n_chunks {
        let len = base + usize::from(k < extra);
        out.push((start, len));
        start += len;
    }
    out
}

/// Split one sequence into balanced chunks renamed `{id}#k`; sequences
/// already within `max_len` come back unchanged.
pub fn chunk_sequence(seq: &FeatureSequence, max_len: usize) -> Vec<FeatureSequence> {
    let bounds = chunk_bounds(seq.t, max_len);
    if bounds.len() == 1 {
        return vec![seq.clone()];
    }
    bounds
        .iter()
        .enumerate()
        .map(|(k, &(start, len))| slice_seq(seq, start, len, &format!("{}#{k}", seq.utterance_id)))
        .collect()
}

/// Chunk input/target pairs identically so they stay aligned.
pub fn chunk_pairs(
    inputs: Vec<FeatureSequence>,
    targets: Vec<FeatureSequence>,
    max_len: usize,
) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
    let mut out_i = Vec::with_capacity(inputs.len());
    let mut out_t = Vec::with_capacity(targets.len());
    for (inp, tgt) in inputs.into_iter().zip(targets) {
        let bounds = chunk_bounds(inp.t, max_len);
        if bounds.len() == 1 {
            out_i.push(inp);
            out_t.push(tgt);
            continue;
        }
        for (k, &(start, len)) in bounds.iter().enumerate() {
            let id = format!("{}#{k}", inp.utterance_id);
            out_i.push(slice_seq(&inp, start, len, &id));
            out_t.push(slice_seq(&tgt, start, len, &id));
        }
    }
    (out_i, out_t)
}

fn slice_seq(seq: &FeatureSequence, start: usize, len: usize, id: &str) -> FeatureSequence {
    FeatureSequence {
        frames: seq.frames[start * seq.d..(start + len) * seq.d].to_vec(),
        t: len,
        d: seq.d,
        kind: seq.kind,
        sample_rate_hz: seq.sample_rate_hz,
        hop_ms: seq.hop_ms,
        stack_factor: seq.stack_factor,
        utterance_id: id.to_string(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub grad_norm: f64,
}

/// Loss log CSV: `step,lr,loss,grad_norm`. Float formatting uses Rust's
/// shortest round-trip representation, so traces compare exactly. Written
/// under a `.tmp` suffix, then renamed into place.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> TrainResult<()> {
    let io_err = |source| TrainError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err)?);
        writeln!(f, "step,lr,loss,grad_norm").map_err(io_err)?;
        for r in rows {
            writeln!(f, "{},{},{},{}", r.step, r.lr, r.loss, r.grad_norm).map_err(io_err)?;
        }
        f.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    /// Where checkpoints and the loss log land; None skips artifacts.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub resume: Option<Checkpoint>,
}

impl RunConfig {
    pub fn in_memory(seed_value: u64) -> Self {
        RunConfig { seed: seed_value, out_dir: None, checkpoint_interval: 0, resume: None }
    }
}

pub struct PretrainOutputs {
    pub params: ParamSet,
    pub opt: OptimizerState,
    pub log: Vec<LossRow>,
}

/// Run masked-acoustic-model pre-training over a feature corpus.
/// `targets` defaults to the inputs (same-kind reconstruction); pass a
/// parallel list for a different target representation.
pub fn pretrain(
    inputs: &[FeatureSequence],
    targets: Option<&[FeatureSequence]>,
    cfg: &EncoderConfig,
    policy: &MaskPolicy,
    sched: &TrainSchedule,
    run: RunConfig,
) -> TrainResult<PretrainOutputs> {
    cfg.validate()?;
    policy.validate()?;
    sched.validate()?;
    if inputs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let raw_targets: Vec<FeatureSequence> = match targets {
        Some(t) => {
            assert_eq!(t.len(), inputs.len(), "inputs and targets must pair up");
            t.to_vec()
        }
        None => inputs.to_vec(),
    };
    let (ins, tgs) = chunk_pairs(inputs.to_vec(), raw_targets, cfg.max_seq_len);
    let min_t = policy.consecutive.max(2);
    for (i, tgt) in ins.iter().zip(&tgs) {
        if i.t < min_t {
            return Err(TrainError::BadUtterance {
                id: i.utterance_id.clone(),
                detail: format!("{} steps is shorter than the minimum {min_t}", i.t),
            });
        }
        if i.d != cfg.input_dim {
            return Err(TrainError::BadUtterance {
                id: i.utterance_id.clone(),
                detail: format!("feature dim {} but model expects {}", i.d, cfg.input_dim),
            });
        }
        if tgt.d != cfg.target_dim {
            return Err(TrainError::BadUtterance {
                id: i.utterance_id.clone(),
                detail: format!("target dim {} but model expects {}", tgt.d, cfg.target_dim),
            });
        }
    }

    // The schedule's dropout governs the run.
    let cfg = EncoderConfig { dropout: sched.dropout, consecutive: policy.consecutive, ..cfg.clone() };

    let (mut params, mut opt, start_step) = match run.resume {
        Some(ck) => {
            ck.validate_model(&cfg)?;
            let opt = OptimizerState::from_checkpoint(&ck)?;
            (ck.params, opt, ck.step)
        }
        None => {
            let p = init_weights(&cfg, run.seed);
            let o = OptimizerState::new(&p);
            (p, o, 0)
        }
    };

    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.clone(), source })?;
    }

    let lengths: Vec<usize> = ins.iter().map(|s| s.t).collect();
    let batches_per_epoch = ins.len().div_ceil(sched.batch_size) as u64;
    let mut plan: Vec<Vec<usize>> = Vec::new();
    let mut plan_epoch = u64::MAX;
    let mut log = Vec::with_capacity((sched.total_steps - start_step) as usize);

    for step0 in start_step..sched.total_steps {
        let step = step0 + 1;
        let epoch = step0 / batches_per_epoch;
        let slot = (step0 % batches_per_epoch) as usize;
        if epoch != plan_epoch {
            plan = plan_batches(&lengths, sched.batch_size, run.seed, epoch);
            plan_epoch = epoch;
        }
        let batch_inputs: Vec<&FeatureSequence> = plan[slot].iter().map(|&i| &ins[i]).collect();
        let batch_targets: Vec<&FeatureSequence> = plan[slot].iter().map(|&i| &tgs[i]).collect();
        let epoch_seed = seed::mix(&[run.seed, epoch, seed::fnv1a("mask")]);
        let batch = make_batch_with_targets(&batch_inputs, &batch_targets, policy, epoch_seed)?;

        let (loss_val, grads) = forward_backward(&cfg, &params, &batch, run.seed, step)?;
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let lr = lr_at(step, sched)?;
        let grad_norm = adam_step(&mut params, &grads, &mut opt, lr, sched.grad_clip)?;
        log.push(LossRow { step, lr, loss: loss_val, grad_norm });

        if let Some(dir) = &run.out_dir {
            if run.checkpoint_interval > 0 && step % run.checkpoint_interval == 0 {
                let path = dir.join(format!("ckpt-{step:07}.mamc"));
                checkpoint::save(&path, step, &params, Some((&opt.m, &opt.v)))?;
                write_loss_csv(&dir.join("loss.csv"), &log)?;
            }
        }
    }

    if let Some(dir) = &run.out_dir {
        checkpoint::save(
            &dir.join("ckpt-final.mamc"),
            sched.total_steps,
            &params,
            Some((&opt.m, &opt.v)),
        )?;
        write_loss_csv(&dir.join("loss.csv"), &log)?;
    }
    Ok(PretrainOutputs { params, opt, log })
}

/// One training step's graph: encode → predict → masked L1, then backward.
/// Returns the loss and a gradient set covering every parameter.
fn forward_backward(
    cfg: &EncoderConfig,
    params: &ParamSet,
    batch: &MaskedBatch,
    seed_value: u64,
    step: u64,
) -> TrainResult<(f32, ParamSet)> {
    let mut tape = Tape::<f32>::new();
    let bound = bind(&mut tape, params);
    let rows = batch.batch * batch.t;
    let x = tape.constant(batch.inputs.clone(), vec![rows, batch.d_in]);
    let mut drng = seed::rng_for(&[seed_value, step, seed::fnv1a("dropout")]);
    let enc = encode(
        &mut tape,
        cfg,
        &bound,
        x,
        batch.batch,
        batch.t,
        &batch.lengths,
        true,
        &mut drng,
    )?;
    let pred = predict_frames(&mut tape, cfg, &bound, enc.last())?;
    let target = tape.constant(batch.targets.clone(), vec![rows, batch.d_target]);
    let loss = tape.masked_l1_loss(pred, target, &batch.select_mask)?;
    let loss_val = tape.scalar(loss);
    tape.backward(loss)?;
    let mut grads = ParamSet::new();
    for (name, &id) in bound.iter() {
        grads.insert(name.clone(), tape.shape(id).to_vec(), tape.grad_or_zeros(id));
    }
    Ok((loss_val, grads))
}
