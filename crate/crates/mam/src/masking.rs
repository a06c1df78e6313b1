//! Masked acoustic modeling data policy: block selection of ~15% of the
//! frames, utterance-wise 80/10/10 alteration, dynamic per-epoch masks,
//! padded batch assembly.

use rand::Rng;

use crate::features::FeatureSequence;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("sequence of {t} steps is shorter than one block of {c}")]
    TooShort { t: usize, c: usize },
    #[error("selection is empty; nothing to alter")]
    EmptySelection,
    #[error("cannot build a batch from an empty utterance list")]
    EmptyBatch,
    #[error("invalid mask policy: {0}")]
    BadPolicy(String),
    #[error("utterance {id}: {detail}")]
    Misaligned { id: String, detail: String },
}

pub type MaskResult<T> = Result<T, MaskError>;

#[derive(Clone, Debug)]
pub struct MaskPolicy {
    pub mask_proportion: f64,
    /// Block length C_num, in post-stacking steps.
    pub consecutive: usize,
    pub p_zero: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            mask_proportion: 0.15,
            consecutive: 7,
            p_zero: 0.80,
            p_random: 0.10,
            p_keep: 0.10,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> MaskResult<()> {
        if !(self.mask_proportion > 0.0 && self.mask_proportion < 1.0) {
            return Err(MaskError::BadPolicy(format!(
                "mask_proportion {} outside (0, 1)",
                self.mask_proportion
            )));
        }
        if self.consecutive == 0 {
            return Err(MaskError::BadPolicy("consecutive must be at least 1".into()));
        }
        let probs = [self.p_zero, self.p_random, self.p_keep];
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(MaskError::BadPolicy("branch probabilities outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MaskError::BadPolicy(format!("branch probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Which alteration the utterance-wise sub-random process took.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AlterBranch {
    Zero,
    RandomReplace,
    Keep,
}

/// Mark `max(1, round(p·t/C))` blocks of `C` consecutive steps, with block
/// starts drawn uniformly without replacement; overlapping blocks merge.
pub fn select_positions<R: Rng>(t_len: usize, policy: &MaskPolicy, rng: &mut R) -> MaskResult<Vec<bool>> {
    let c = policy.consecutive;
    if t_len < c {
        return Err(MaskError::TooShort { t: t_len, c });
    }
    let n_starts = t_len - c + 1;
    let want = (policy.mask_proportion * t_len as f64 / c as f64).round() as usize;
    let n_blocks = want.max(1).min(n_starts);
    let mut mask = vec![false; t_len];
    for start in rand::seq::index::sample(rng, n_starts, n_blocks) {
        for slot in &mut mask[start..start + c] {
            *slot = true;
        }
    }
    Ok(mask)
}

/// Apply the utterance-wise sub-random alteration: one branch drawn per
/// call covering every selected frame. Unselected frames are returned
/// bit-for-bit untouched.
pub fn apply_sub_random<R: Rng>(
    frames: &[f32],
    t: usize,
    d: usize,
    select: &[bool],
    policy: &MaskPolicy,
    rng: &mut R,
) -> MaskResult<(Vec<f32>, AlterBranch)> {
    assert_eq!(frames.len(), t * d, "frame buffer size mismatch");
    assert_eq!(select.len(), t, "selection length mismatch");
    if !select.iter().any(|&s| s) {
        return Err(MaskError::EmptySelection);
    }
    let u: f64 = rng.random();
    let branch = if u < policy.p_zero {
        AlterBranch::Zero
    } else if u < policy.p_zero + policy.p_random {
        AlterBranch::RandomReplace
    } else {
        AlterBranch::Keep
    };
    let mut out = frames.to_vec();
    match branch {
        AlterBranch::Zero => {
            for (i, &sel) in select.iter().enumerate() {
                if sel {
                    out[i * d..(i + 1) * d].fill(0.0);
                }
            }
        }
        AlterBranch::RandomReplace => {
            // Each selected frame is overwritten by a frame drawn uniformly
            // from the same utterance (pre-alteration content).
            for (i, &sel) in select.iter().enumerate() {
                if sel {
                    let src = rng.random_range(0..t);
                    out[i * d..(i + 1) * d].copy_from_slice(&frames[src * d..(src + 1) * d]);
                }
            }
        }
        AlterBranch::Keep => {}
    }
    Ok((out, branch))
}

/// A padded mini-batch ready for the encoder. `inputs` hold the altered
/// frames, `targets` the pre-alteration ground truth (possibly a different
/// feature kind), both zero-padded to the longest utterance.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    /// True where the frame was chosen for alteration (never at pads).
    pub select_mask: Vec<bool>,
    /// True at padded positions.
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub t: usize,
    pub d_in: usize,
    pub d_target: usize,
    pub lengths: Vec<usize>,
    pub utterance_ids: Vec<String>,
    pub branches: Vec<AlterBranch>,
}

impl MaskedBatch {
    /// Select flags flattened per row of the padded [B·T] grid.
    pub fn select_rows(&self) -> &[bool] {
        &self.select_mask
    }
}

/// Build a batch where targets are the inputs themselves (same feature
/// kind reconstruction).
pub fn make_batch(seqs: &[FeatureSequence], policy: &MaskPolicy, epoch_seed: u64) -> MaskResult<MaskedBatch> {
    let targets: Vec<&FeatureSequence> = seqs.iter().collect();
    let inputs: Vec<&FeatureSequence> = seqs.iter().collect();
    make_batch_with_targets(&inputs, &targets, policy, epoch_seed)
}

/// Build a batch with explicit target sequences (e.g. linear-scale targets
/// for Mel inputs). Masks depend only on `(epoch_seed, utterance_id)`, so
/// every epoch re-rolls them while a fixed pair stays reproducible and the
/// batch order does not matter.
pub fn make_batch_with_targets(
    inputs: &[&FeatureSequence],
    targets: &[&FeatureSequence],
    policy: &MaskPolicy,
    epoch_seed: u64,
) -> MaskResult<MaskedBatch> {
    policy.validate()?;
    if inputs.is_empty() {
        return Err(MaskError::EmptyBatch);
    }
    assert_eq!(inputs.len(), targets.len(), "input/target list length mismatch");
    let d_in = inputs[0].d;
    let d_target = targets[0].d;
    for (i, tgt) in inputs.iter().zip(targets) {
        if i.d != d_in || tgt.d != d_target {
            return Err(MaskError::Misaligned {
                id: i.utterance_id.clone(),
                detail: "feature dimension differs across the batch".into(),
            });
        }
        if i.t != tgt.t || i.utterance_id != tgt.utterance_id {
            return Err(MaskError::Misaligned {
                id: i.utterance_id.clone(),
                detail: format!(
                    "input ({} steps) and target ({} steps, id {}) do not align",
                    i.t, tgt.t, tgt.utterance_id
                ),
            });
        }
    }

    let batch = inputs.len();
    let t_max = inputs.iter().map(|s| s.t).max().unwrap();
    let mut out = MaskedBatch {
        inputs: vec![0.0; batch * t_max * d_in],
        targets: vec![0.0; batch * t_max * d_target],
        select_mask: vec![false; batch * t_max],
        pad_mask: vec![false; batch * t_max],
        batch,
        t: t_max,
        d_in,
        d_target,
        lengths: inputs.iter().map(|s| s.t).collect(),
        utterance_ids: inputs.iter().map(|s| s.utterance_id.clone()).collect(),
        branches: Vec::with_capacity(batch),
    };

    for (b, (seq, tgt)) in inputs.iter().zip(targets).enumerate() {
        let mut rng = seed::rng_for(&[epoch_seed, seed::fnv1a(&seq.utterance_id)]);
        let select = select_positions(seq.t, policy, &mut rng)?;
        let (altered, branch) = apply_sub_random(&seq.frames, seq.t, seq.d, &select, policy, &mut rng)?;
        out.branches.push(branch);
        out.inputs[b * t_max * d_in..b * t_max * d_in + seq.t * d_in].copy_from_slice(&altered);
        out.targets[b * t_max * d_target..b * t_max * d_target + tgt.t * d_target]
            .copy_from_slice(&tgt.frames);
        for (i, &sel) in select.iter().enumerate() {
            out.select_mask[b * t_max + i] = sel;
        }
        for i in seq.t..t_max {
            out.pad_mask[b * t_max + i] = true;
        }
    }
    Ok(out)
}
