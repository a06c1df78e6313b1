//! Downstream evaluation protocol: linear frame-level classification,
//! one-layer RNN utterance-level classification, low-resource label-budget
//! sweeps, and full-encoder fine-tuning.
//!
//! Fairness rule: every probe run is built from one shared ProbeConfig, so
//! competing input kinds (raw features, last-layer representations, learned
//! weighted sums) differ only in input dimension. All splits, budgets and
//! initializations derive from the config seed and are nested/reproducible.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::features::{FeatureKind, FeatureSequence};
use crate::model::{bind, encode, Bound, EncoderConfig, ModelError, ParamSet};
use crate::repr::{extract_last, mix_on_tape, LayerStack, ReprError, WeightedSumMixer};
use crate::seed;
use crate::tensor::{Tape, TensorError, TensorId};
use crate::train::{adam_step, lr_at, LossRow, OptimizerState, TrainError, TrainSchedule};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("label parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("utterance {id} has no labels")]
    MissingLabels { id: String },
    #[error("utterance {id}: {found} label steps but features have {expected}")]
    LabelLength { id: String, expected: usize, found: usize },
    #[error("budget {0} outside (0, 1]")]
    BadBudget(f64),
    #[error("budgets must be ascending, unique and within (0, 1]")]
    BadBudgetList,
    #[error("need at least 2 labeled utterances to split train/test, found {0}")]
    TooFewUtterances(usize),
    #[error("utterance classification needs at least 2 classes, found {0}")]
    SingleClass(usize),
    #[error("probe input is empty")]
    EmptyInput,
    #[error("inconsistent probe input: {0}")]
    Inconsistent(String),
    #[error("nothing to score")]
    EmptyEvaluation,
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid probe config: {0}")]
    BadConfig(String),
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
    Train(#[from] TrainError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

pub type ProbeResult<T> = Result<T, ProbeError>;

// ── label sets ──────────────────────────────────────────────────────────

/// Per-utterance frame labels on the 10 ms pre-stacking grid.
#[derive(Clone, Debug)]
pub struct FrameLabelSet {
    pub labels: BTreeMap<String, Vec<usize>>,
    pub n_classes: usize,
}

impl FrameLabelSet {
    pub fn new(labels: BTreeMap<String, Vec<usize>>) -> Self {
        let n_classes = labels.values().flatten().max().map_or(0, |&m| m + 1);
        FrameLabelSet { labels, n_classes }
    }

    /// CSV rows `utterance_id,frame_index,class_id`; a header row is
    /// skipped. Frame indices must be dense 0..n per utterance.
    pub fn parse_csv(text: &str) -> ProbeResult<Self> {
        let mut raw: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("utterance_id") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(ProbeError::Parse {
                    line: i + 1,
                    detail: format!("expected 3 comma-separated fields, got {}", parts.len()),
                });
            }
            let idx: usize = parts[1].trim().parse().map_err(|_| ProbeError::Parse {
                line: i + 1,
                detail: format!("bad frame_index `{}`", parts[1]),
            })?;
            let class: usize = parts[2].trim().parse().map_err(|_| ProbeError::Parse {
                line: i + 1,
                detail: format!("bad class_id `{}`", parts[2]),
            })?;
            raw.entry(parts[0].trim().to_string()).or_default().push((idx, class));
        }
        let mut labels = BTreeMap::new();
        for (id, mut rows) in raw {
            rows.sort_unstable();
            for (want, &(got, _)) in rows.iter().enumerate() {
                if got != want {
                    return Err(ProbeError::Parse {
                        line: 0,
                        detail: format!(
                            "utterance {id}: frame indices must be dense from 0, found {got} where {want} expected"
                        ),
                    });
                }
            }
            labels.insert(id, rows.into_iter().map(|(_, c)| c).collect());
        }
        if labels.is_empty() {
            return Err(ProbeError::EmptyInput);
        }
        Ok(Self::new(labels))
    }

    pub fn read_csv(path: &Path) -> ProbeResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProbeError::Io { path: path.to_path_buf(), source })?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance_id,frame_index,class_id\n");
        for (id, seq) in &self.labels {
            for (i, c) in seq.iter().enumerate() {
                out.push_str(&format!("{id},{i},{c}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> ProbeResult<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|source| ProbeError::Io { path: path.to_path_buf(), source })
    }

    /// Labels aligned to a (possibly stacked) feature sequence: majority
    /// vote within each stacked step, ties to the smallest class id.
    pub fn aligned(&self, seq: &FeatureSequence) -> ProbeResult<Vec<usize>> {
        let base = self
            .labels
            .get(&seq.utterance_id)
            .ok_or_else(|| ProbeError::MissingLabels { id: seq.utterance_id.clone() })?;
        let r = seq.stack_factor.max(1);
        let steps = base.len().div_ceil(r);
        if steps != seq.t {
            return Err(ProbeError::LabelLength {
                id: seq.utterance_id.clone(),
                expected: seq.t,
                found: steps,
            });
        }
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let window = &base[k * r..((k + 1) * r).min(base.len())];
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &c in window {
                *counts.entry(c).or_insert(0) += 1;
            }
            // BTreeMap iterates ascending, so keeping the first maximum
            // breaks ties toward the smallest class id.
            let best = counts
                .iter()
                .fold((usize::MAX, 0usize), |acc, (&c, &n)| if n > acc.1 { (c, n) } else { acc })
                .0;
            out.push(best);
        }
        Ok(out)
    }
}

/// One class per utterance.
#[derive(Clone, Debug)]
pub struct UtteranceLabelSet {
    pub labels: BTreeMap<String, usize>,
    pub n_classes: usize,
}

impl UtteranceLabelSet {
    pub fn new(labels: BTreeMap<String, usize>) -> Self {
        let n_classes = labels.values().max().map_or(0, |&m| m + 1);
        UtteranceLabelSet { labels, n_classes }
    }

    /// CSV rows `utterance_id,class_id`; a header row is skipped.
    pub fn parse_csv(text: &str) -> ProbeResult<Self> {
        let mut labels = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("utterance_id") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 2 {
                return Err(ProbeError::Parse {
                    line: i + 1,
                    detail: format!("expected 2 comma-separated fields, got {}", parts.len()),
                });
            }
            let class: usize = parts[1].trim().parse().map_err(|_| ProbeError::Parse {
                line: i + 1,
                detail: format!("bad class_id `{}`", parts[1]),
            })?;
            if labels.insert(parts[0].trim().to_string(), class).is_some() {
                return Err(ProbeError::Parse {
                    line: i + 1,
                    detail: format!("duplicate utterance `{}`", parts[0]),
                });
            }
        }
        if labels.is_empty() {
            return Err(ProbeError::EmptyInput);
        }
        Ok(Self::new(labels))
    }

    pub fn read_csv(path: &Path) -> ProbeResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProbeError::Io { path: path.to_path_buf(), source })?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance_id,class_id\n");
        for (id, c) in &self.labels {
            out.push_str(&format!("{id},{c}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> ProbeResult<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|source| ProbeError::Io { path: path.to_path_buf(), source })
    }
}

// ── reports ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub input_kind: String,
    pub task: String,
    pub budget: f64,
    pub accuracy: f64,
    pub seed: u64,
    pub split: String,
}

/// Report CSV: `input_kind,task,budget,accuracy,seed`.
pub fn write_report_csv(path: &Path, rows: &[ProbeReport]) -> ProbeResult<()> {
    let io_err = |source| ProbeError::Io { path: path.to_path_buf(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "input_kind,task,budget,accuracy,seed").map_err(io_err)?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.input_kind, r.task, r.budget, r.accuracy, r.seed)
            .map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Exact-match fraction.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> ProbeResult<f64> {
    if predictions.len() != labels.len() {
        return Err(ProbeError::LengthMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

// ── probe configuration and inputs ──────────────────────────────────────

/// One recipe for every probe run, whatever the input kind. Only the input
/// dimension (read off the data) differs between competing runs.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Early stop after this many evaluations without improvement.
    pub patience: usize,
    pub batch_frames: usize,
    pub batch_utterances: usize,
    pub rnn_width: usize,
    /// false → last hidden state readout; true → mean over time.
    pub mean_pool: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            max_epochs: 40,
            patience: 5,
            batch_frames: 256,
            batch_utterances: 8,
            rnn_width: 256,
            mean_pool: false,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> ProbeResult<()> {
        if self.lr <= 0.0 {
            return Err(ProbeError::BadConfig("lr must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(ProbeError::BadConfig("max_epochs and patience must be positive".into()));
        }
        if self.batch_frames == 0 || self.batch_utterances == 0 || self.rnn_width == 0 {
            return Err(ProbeError::BadConfig("batch sizes and rnn_width must be positive".into()));
        }
        Ok(())
    }
}

/// What a probe consumes: fixed per-frame vectors (raw features or an
/// already-extracted representation), or frozen layer stacks whose softmax
/// weighting trains jointly with the probe.
pub enum ProbeInput<'a> {
    Fixed(&'a [FeatureSequence]),
    Mixed(&'a [LayerStack]),
}

impl ProbeInput<'_> {
    pub fn kind_label(&self) -> &'static str {
        match self {
            ProbeInput::Fixed(seqs) => match seqs.first().map(|s| s.kind) {
                Some(FeatureKind::Mel) => "mel",
                Some(FeatureKind::Linear) => "linear",
                _ => "repr-last",
            },
            ProbeInput::Mixed(_) => "repr-weighted",
        }
    }

    fn len(&self) -> usize {
        match self {
            ProbeInput::Fixed(s) => s.len(),
            ProbeInput::Mixed(s) => s.len(),
        }
    }

    /// Output dimension after (optional) mixing.
    fn dim(&self) -> usize {
        match self {
            ProbeInput::Fixed(s) => s[0].d,
            ProbeInput::Mixed(s) => s[0].d,
        }
    }

    fn n_feeds(&self) -> usize {
        match self {
            ProbeInput::Fixed(_) => 1,
            ProbeInput::Mixed(s) => s[0].n_layers(),
        }
    }

    fn id(&self, i: usize) -> &str {
        match self {
            ProbeInput::Fixed(s) => &s[i].utterance_id,
            ProbeInput::Mixed(s) => &s[i].utterance_id,
        }
    }

    fn t(&self, i: usize) -> usize {
        match self {
            ProbeInput::Fixed(s) => s[i].t,
            ProbeInput::Mixed(s) => s[i].t,
        }
    }

    /// Per-feed frame matrices of item i, each t*d row-major.
    fn feeds(&self, i: usize) -> Vec<&[f32]> {
        match self {
            ProbeInput::Fixed(s) => vec![&s[i].frames],
            ProbeInput::Mixed(s) => s[i].layers.iter().map(|l| l.as_slice()).collect(),
        }
    }

    /// A sequence view of item i sufficient for label alignment.
    fn meta(&self, i: usize) -> (usize, usize) {
        // (t, stack_factor)
        match self {
            ProbeInput::Fixed(s) => (s[i].t, s[i].stack_factor),
            ProbeInput::Mixed(s) => (s[i].t, s[i].stack_factor),
        }
    }

    fn validate(&self) -> ProbeResult<BTreeMap<String, usize>> {
        if self.len() == 0 {
            return Err(ProbeError::EmptyInput);
        }
        let d = self.dim();
        let feeds = self.n_feeds();
        let mut index = BTreeMap::new();
        for i in 0..self.len() {
            let dim_i = match self {
                ProbeInput::Fixed(s) => s[i].d,
                ProbeInput::Mixed(s) => s[i].d,
            };
            if dim_i != d {
                return Err(ProbeError::Inconsistent(format!(
                    "utterance {} has dim {dim_i}, expected {d}",
                    self.id(i)
                )));
            }
            if let ProbeInput::Mixed(s) = self {
                if s[i].n_layers() != feeds {
                    return Err(ProbeError::Inconsistent(format!(
                        "utterance {} has {} layers, expected {feeds}",
                        self.id(i),
                        s[i].n_layers()
                    )));
                }
            }
            if index.insert(self.id(i).to_string(), i).is_some() {
                return Err(ProbeError::Inconsistent(format!(
                    "duplicate utterance id {}",
                    self.id(i)
                )));
            }
        }
        Ok(index)
    }
}

// ── splits and budgets ──────────────────────────────────────────────────

/// Seeded 9:1 utterance split. Pool order does not matter: ids are sorted
/// before the seeded shuffle.
pub(crate) fn split_9_1(pool: &[String], seed_value: u64) -> ProbeResult<(Vec<String>, Vec<String>)> {
    if pool.len() < 2 {
        return Err(ProbeError::TooFewUtterances(pool.len()));
    }
    let mut ids: Vec<String> = pool.to_vec();
    ids.sort();
    let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("split")]);
    ids.shuffle(&mut rng);
    let n_test = ((pool.len() as f64 * 0.1).round() as usize).max(1);
    let test = ids.split_off(ids.len() - n_test);
    Ok((ids, test))
}

/// Stratified 9:1: split each class separately so every class keeps at
/// least one training member (single-member classes stay in train).
pub(crate) fn split_9_1_stratified(
    pool: &[String],
    classes: &BTreeMap<String, usize>,
    seed_value: u64,
) -> ProbeResult<(Vec<String>, Vec<String>)> {
    if pool.len() < 2 {
        return Err(ProbeError::TooFewUtterances(pool.len()));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for id in pool {
        by_class.entry(classes[id]).or_default().push(id.clone());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class {
        members.sort();
        let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("split-strat"), class as u64]);
        members.shuffle(&mut rng);
        let n_test = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * 0.1).round() as usize).clamp(1, members.len() - 1)
        };
        let split = members.split_off(members.len() - n_test);
        test.extend(split);
        train.extend(members);
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

/// Nested seeded label budgets: n_b = max(1, round(b * N)) utterances from
/// a seeded permutation, so a smaller budget's set is a prefix (subset) of
/// a larger one's.
pub fn select_budget(pool: &[String], budget: f64, seed_value: u64) -> ProbeResult<Vec<String>> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(ProbeError::BadBudget(budget));
    }
    if pool.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let mut ids: Vec<String> = pool.to_vec();
    ids.sort();
    let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("budget")]);
    ids.shuffle(&mut rng);
    let n = ((budget * pool.len() as f64).round() as usize).clamp(1, pool.len());
    ids.truncate(n);
    Ok(ids)
}

/// Validation carve-out from a training set: roughly 10%, at least one
/// utterance, but never at the cost of an empty fit set; tiny sets
/// evaluate on themselves.
fn carve_validation(train: &[String], seed_value: u64) -> (Vec<String>, Vec<String>) {
    if train.len() < 3 {
        return (train.to_vec(), train.to_vec());
    }
    let mut ids = train.to_vec();
    ids.sort();
    let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("val")]);
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * 0.1).round() as usize).max(1);
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

// ── shared frame machinery ──────────────────────────────────────────────

/// Frames gathered across utterances: one matrix per feed (a single matrix
/// for fixed inputs, one per encoder layer for mixer inputs).
struct Gathered {
    xs: Vec<Vec<f32>>,
    y: Vec<usize>,
    n: usize,
    d: usize,
}

fn gather_frames(
    input: &ProbeInput,
    index: &BTreeMap<String, usize>,
    ids: &[String],
    labels: &FrameLabelSet,
) -> ProbeResult<Gathered> {
    let d = input.dim();
    let feeds = input.n_feeds();
    let mut xs: Vec<Vec<f32>> = (0..feeds).map(|_| Vec::new()).collect();
    let mut y = Vec::new();
    for id in ids {
        let &i = index.get(id).ok_or_else(|| ProbeError::MissingLabels { id: id.clone() })?;
        let (t, stack_factor) = input.meta(i);
        let view = FeatureSequence {
            frames: Vec::new(),
            t,
            d,
            kind: FeatureKind::Repr,
            sample_rate_hz: 16_000,
            hop_ms: 10.0,
            stack_factor,
            utterance_id: id.clone(),
        };
        let aligned = labels.aligned(&view)?;
        for (f, m) in input.feeds(i).into_iter().enumerate() {
            xs[f].extend_from_slice(m);
        }
        y.extend(aligned);
    }
    let n = y.len();
    Ok(Gathered { xs, y, n, d })
}

/// Collapse feeds into one n×d matrix using the mixer parameters when
/// present (weights from the current `mixer.logits` / `mixer.gamma`).
fn combine_feeds(g: &Gathered, params: &ParamSet) -> Vec<f32> {
    if g.xs.len() == 1 {
        return g.xs[0].clone();
    }
    let mixer = WeightedSumMixer::from_params(params)
        .expect("mixer params present for multi-feed input");
    let w = mixer.weights();
    let mut out = vec![0.0f32; g.n * g.d];
    for (l, x) in g.xs.iter().enumerate() {
        for (acc, &v) in out.iter_mut().zip(x) {
            *acc += w[l] * v;
        }
    }
    for v in &mut out {
        *v *= mixer.gamma;
    }
    out
}

/// Logits of a linear classifier over gathered frames, argmaxed per row.
/// Ties break to the smallest class index.
fn classify_frames(g: &Gathered, params: &ParamSet) -> ProbeResult<Vec<usize>> {
    let x = combine_feeds(g, params);
    let mut tape = Tape::<f32>::new();
    let xb = tape.constant(x, vec![g.n, g.d]);
    let w = params.get("clf.w").unwrap();
    let b = params.get("clf.b").unwrap();
    let wid = tape.constant(w.data.clone(), w.shape.clone());
    let bid = tape.constant(b.data.clone(), b.shape.clone());
    let logits = tape.matmul(xb, wid)?;
    let logits = tape.add_bias(logits, bid)?;
    let classes = w.shape[1];
    Ok(argmax_rows(tape.data(logits), classes))
}

fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn collect_grads(tape: &Tape<f32>, bound: &Bound) -> ParamSet {
    let mut grads = ParamSet::new();
    for (name, &id) in bound.iter() {
        grads.insert(name.clone(), tape.shape(id).to_vec(), tape.grad_or_zeros(id));
    }
    grads
}

// ── linear frame probe ──────────────────────────────────────────────────

/// Everything a probe run produces: the report plus the trained weights
/// (and mixer, when the input was a layer stack).
pub struct ProbeArtifacts {
    pub report: ProbeReport,
    pub params: ParamSet,
    pub mixer: Option<WeightedSumMixer>,
}

/// Train a single linear layer with softmax cross-entropy over the frames
/// of a label budget, early-stopping on a held-out sliver of the training
/// utterances, and report exact-match accuracy on the test split.
///
/// Protocol: seeded 9:1 utterance split first; the budget then selects
/// max(1, round(b*N)) of the training utterances (nested across budgets),
/// so every budget faces the same test set.
pub fn train_linear_frame_probe(
    input: &ProbeInput,
    labels: &FrameLabelSet,
    budget: f64,
    cfg: &ProbeConfig,
) -> ProbeResult<ProbeArtifacts> {
    cfg.validate()?;
    let index = input.validate()?;
    let pool: Vec<String> = index.keys().cloned().collect();
    for id in &pool {
        if !labels.labels.contains_key(id) {
            return Err(ProbeError::MissingLabels { id: id.clone() });
        }
    }
    let classes = labels.n_classes.max(2);
    let (train_ids, test_ids) = split_9_1(&pool, cfg.seed)?;
    let selected = select_budget(&train_ids, budget, cfg.seed)?;
    let (fit_ids, val_ids) = carve_validation(&selected, cfg.seed);

    let fit = gather_frames(input, &index, &fit_ids, labels)?;
    let val = gather_frames(input, &index, &val_ids, labels)?;
    let test = gather_frames(input, &index, &test_ids, labels)?;

    let mut params = ParamSet::new();
    params.insert("clf.w", vec![input.dim(), classes], vec![0.0; input.dim() * classes]);
    params.insert("clf.b", vec![classes], vec![0.0; classes]);
    let mixing = input.n_feeds() > 1;
    if mixing {
        WeightedSumMixer::new(input.n_feeds())
            .expect("n_feeds >= 1")
            .to_params(&mut params);
    }
    let mut opt = OptimizerState::new(&params);

    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..fit.n).collect();
        let mut rng = seed::rng_for(&[cfg.seed, seed::fnv1a("probe-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_frames) {
            let mut tape = Tape::<f32>::new();
            let bound = bind(&mut tape, &params);
            let feed_ids: Vec<TensorId> = fit
                .xs
                .iter()
                .map(|x| {
                    let mut rows = Vec::with_capacity(chunk.len() * fit.d);
                    for &i in chunk {
                        rows.extend_from_slice(&x[i * fit.d..(i + 1) * fit.d]);
                    }
                    tape.constant(rows, vec![chunk.len(), fit.d])
                })
                .collect();
            let xb = if mixing {
                mix_on_tape(
                    &mut tape,
                    &feed_ids,
                    bound.get("mixer.logits")?,
                    bound.get("mixer.gamma")?,
                )?
            } else {
                feed_ids[0]
            };
            let logits = tape.matmul(xb, bound.get("clf.w")?)?;
            let logits = tape.add_bias(logits, bound.get("clf.b")?)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| fit.y[i]).collect();
            let loss = tape.cross_entropy_mean(logits, &yb, None)?;
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bound);
            adam_step(&mut params, &grads, &mut opt, cfg.lr, None)?;
        }
        let acc = evaluate_accuracy(&classify_frames(&val, &params)?, &val.y)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    let accuracy = evaluate_accuracy(&classify_frames(&test, &params)?, &test.y)?;
    let mixer = mixing.then(|| WeightedSumMixer::from_params(&params).unwrap());
    Ok(ProbeArtifacts {
        report: ProbeReport {
            input_kind: input.kind_label().to_string(),
            task: "frame-linear".to_string(),
            budget,
            accuracy,
            seed: cfg.seed,
            split: format!(
                "fit {}+val {}/test {} utterances",
                fit_ids.len(),
                val_ids.len(),
                test_ids.len()
            ),
        },
        params,
        mixer,
    })
}

/// Run the frame probe over ascending budgets with nested utterance
/// subsets; one report per budget against a shared test split.
pub fn low_resource_sweep(
    input: &ProbeInput,
    labels: &FrameLabelSet,
    budgets: &[f64],
    cfg: &ProbeConfig,
) -> ProbeResult<Vec<ProbeReport>> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProbeError::BadBudgetList);
    }
    budgets
        .iter()
        .map(|&b| {
            if !(b > 0.0 && b <= 1.0) {
                return Err(ProbeError::BadBudgetList);
            }
            Ok(train_linear_frame_probe(input, labels, b, cfg)?.report)
        })
        .collect()
}

// ── RNN utterance probe ─────────────────────────────────────────────────

fn rnn_param_names(d: usize, width: usize, classes: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("rnn.wx", vec![d, width]),
        ("rnn.wh", vec![width, width]),
        ("rnn.b", vec![width]),
        ("clf.w", vec![width, classes]),
        ("clf.b", vec![classes]),
    ]
}

fn init_rnn_params(d: usize, width: usize, classes: usize, seed_value: u64) -> ParamSet {
    let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("probe-init")]);
    let mut params = ParamSet::new();
    for (name, shape) in rnn_param_names(d, width, classes) {
        let n: usize = shape.iter().product();
        let data = if name.starts_with("clf") || name == "rnn.b" {
            vec![0.0; n]
        } else {
            // Small recurrent init keeps tanh out of saturation at start.
            let std = if name == "rnn.wh" { 0.05 } else { 0.1 };
            let dist = Normal::new(0.0f64, std).unwrap();
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        };
        params.insert(name, shape, data);
    }
    params
}

/// One utterance's RNN readout logits [1, classes] on the tape.
fn rnn_logits(
    tape: &mut Tape<f32>,
    bound: &Bound,
    feeds: &[&[f32]],
    t: usize,
    d: usize,
    width: usize,
    mixing: bool,
    mean_pool: bool,
) -> ProbeResult<TensorId> {
    let feed_ids: Vec<TensorId> = feeds
        .iter()
        .map(|m| tape.constant(m.to_vec(), vec![t, d]))
        .collect();
    let x = if mixing {
        mix_on_tape(tape, &feed_ids, bound.get("mixer.logits")?, bound.get("mixer.gamma")?)?
    } else {
        feed_ids[0]
    };
    let wx = bound.get("rnn.wx")?;
    let wh = bound.get("rnn.wh")?;
    let bh = bound.get("rnn.b")?;
    let mut h = tape.constant(vec![0.0; width], vec![1, width]);
    let mut pooled: Option<TensorId> = None;
    for step in 0..t {
        let xt = tape.slice_rows(x, step, 1)?;
        let a = tape.matmul(xt, wx)?;
        let r = tape.matmul(h, wh)?;
        let s = tape.add(a, r)?;
        let s = tape.add_bias(s, bh)?;
        h = tape.tanh(s);
        if mean_pool {
            pooled = Some(match pooled {
                Some(p) => tape.add(p, h)?,
                None => h,
            });
        }
    }
    let readout = if mean_pool {
        tape.scale(pooled.unwrap(), 1.0 / t as f32)
    } else {
        h
    };
    let logits = tape.matmul(readout, bound.get("clf.w")?)?;
    Ok(tape.add_bias(logits, bound.get("clf.b")?)?)
}

fn rnn_predict(
    input: &ProbeInput,
    index: &BTreeMap<String, usize>,
    ids: &[String],
    params: &ParamSet,
    cfg: &ProbeConfig,
    classes: usize,
) -> ProbeResult<Vec<usize>> {
    let mixing = input.n_feeds() > 1;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let &i = index.get(id).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, params);
        let logits = rnn_logits(
            &mut tape,
            &bound,
            &input.feeds(i),
            input.t(i),
            input.dim(),
            cfg.rnn_width,
            mixing,
            cfg.mean_pool,
        )?;
        out.push(argmax_rows(tape.data(logits), classes)[0]);
    }
    Ok(out)
}

/// Train a one-layer Elman RNN classifier (tanh, configurable last-state or
/// mean-pool readout) over whole utterances. Splits 9:1 seeded; if any
/// class misses the train side, re-splits with per-class stratification.
pub fn train_rnn_utterance_probe(
    input: &ProbeInput,
    labels: &UtteranceLabelSet,
    cfg: &ProbeConfig,
) -> ProbeResult<ProbeArtifacts> {
    cfg.validate()?;
    let index = input.validate()?;
    let pool: Vec<String> = index.keys().cloned().collect();
    for id in &pool {
        if !labels.labels.contains_key(id) {
            return Err(ProbeError::MissingLabels { id: id.clone() });
        }
    }
    let present: std::collections::BTreeSet<usize> =
        pool.iter().map(|id| labels.labels[id]).collect();
    if present.len() < 2 {
        return Err(ProbeError::SingleClass(present.len()));
    }
    let classes = labels.n_classes.max(2);

    let (mut train_ids, mut test_ids) = split_9_1(&pool, cfg.seed)?;
    let train_classes: std::collections::BTreeSet<usize> =
        train_ids.iter().map(|id| labels.labels[id]).collect();
    if train_classes.len() < present.len() {
        (train_ids, test_ids) = split_9_1_stratified(&pool, &labels.labels, cfg.seed)?;
    }
    let (fit_ids, val_ids) = carve_validation(&train_ids, cfg.seed);

    let mixing = input.n_feeds() > 1;
    let mut params = init_rnn_params(input.dim(), cfg.rnn_width, classes, cfg.seed);
    if mixing {
        WeightedSumMixer::new(input.n_feeds()).expect("n_feeds >= 1").to_params(&mut params);
    }
    let mut opt = OptimizerState::new(&params);

    let val_y: Vec<usize> = val_ids.iter().map(|id| labels.labels[id]).collect();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order = fit_ids.clone();
        let mut rng = seed::rng_for(&[cfg.seed, seed::fnv1a("probe-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_utterances) {
            let mut tape = Tape::<f32>::new();
            let bound = bind(&mut tape, &params);
            let mut loss_acc: Option<TensorId> = None;
            for id in chunk {
                let &i = index.get(id).unwrap();
                let logits = rnn_logits(
                    &mut tape,
                    &bound,
                    &input.feeds(i),
                    input.t(i),
                    input.dim(),
                    cfg.rnn_width,
                    mixing,
                    cfg.mean_pool,
                )?;
                let li = tape.cross_entropy_mean(logits, &[labels.labels[id]], None)?;
                loss_acc = Some(match loss_acc {
                    Some(acc) => tape.add(acc, li)?,
                    None => li,
                });
            }
            let loss = tape.scale(loss_acc.unwrap(), 1.0 / chunk.len() as f32);
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bound);
            adam_step(&mut params, &grads, &mut opt, cfg.lr, None)?;
        }
        let preds = rnn_predict(input, &index, &val_ids, &params, cfg, classes)?;
        let acc = evaluate_accuracy(&preds, &val_y)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    let test_y: Vec<usize> = test_ids.iter().map(|id| labels.labels[id]).collect();
    let preds = rnn_predict(input, &index, &test_ids, &params, cfg, classes)?;
    let accuracy = evaluate_accuracy(&preds, &test_y)?;
    let mixer = mixing.then(|| WeightedSumMixer::from_params(&params).unwrap());
    Ok(ProbeArtifacts {
        report: ProbeReport {
            input_kind: input.kind_label().to_string(),
            task: "utterance-rnn".to_string(),
            budget: 1.0,
            accuracy,
            seed: cfg.seed,
            split: format!(
                "fit {}+val {}/test {} utterances",
                fit_ids.len(),
                val_ids.len(),
                test_ids.len()
            ),
        },
        params,
        mixer,
    })
}

// ── fine-tuning ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub epochs: usize,
    /// Multiplier on the encoder group's learning rate; 0 freezes the
    /// encoder exactly (no moment updates either).
    pub encoder_lr_scale: f64,
    pub peak_lr: f64,
    pub batch_utterances: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions { epochs: 2, encoder_lr_scale: 1.0, peak_lr: 4e-3, batch_utterances: 6 }
    }
}

pub struct FinetuneOutputs {
    pub report: ProbeReport,
    pub encoder_params: ParamSet,
    pub classifier: ParamSet,
    pub log: Vec<LossRow>,
}

/// Fine-tune the pre-trained encoder jointly with a randomly initialized
/// linear frame classifier: no masking; the classification loss
/// backpropagates through the whole encoder. Uses the same seeded 9:1
/// split as the frozen probes, so results pair up.
pub fn finetune_frame_probe(
    enc_cfg: &EncoderConfig,
    pretrained: &ParamSet,
    features: &[FeatureSequence],
    labels: &FrameLabelSet,
    cfg: &ProbeConfig,
    opts: &FinetuneOptions,
) -> ProbeResult<FinetuneOutputs> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if opts.epochs == 0 || opts.batch_utterances == 0 {
        return Err(ProbeError::BadConfig("epochs and batch_utterances must be positive".into()));
    }
    if !(opts.encoder_lr_scale >= 0.0) {
        return Err(ProbeError::BadConfig("encoder_lr_scale must be >= 0".into()));
    }
    let input = ProbeInput::Fixed(features);
    let index = input.validate()?;
    for seq in features {
        if seq.d != enc_cfg.input_dim {
            return Err(ProbeError::Inconsistent(format!(
                "utterance {} has dim {}, encoder expects {}",
                seq.utterance_id, seq.d, enc_cfg.input_dim
            )));
        }
        if !labels.labels.contains_key(&seq.utterance_id) {
            return Err(ProbeError::MissingLabels { id: seq.utterance_id.clone() });
        }
    }
    let classes = labels.n_classes.max(2);
    let pool: Vec<String> = index.keys().cloned().collect();
    let (train_ids, test_ids) = split_9_1(&pool, cfg.seed)?;

    let mut enc_params = pretrained.clone();
    let mut clf = ParamSet::new();
    // Random classifier init per the protocol; zeros would also be valid
    // but "randomly initialized downstream" is the contract.
    let mut rng = seed::rng_for(&[cfg.seed, seed::fnv1a("ft-init")]);
    let dist = Normal::new(0.0f64, 0.02).unwrap();
    clf.insert(
        "clf.w",
        vec![enc_cfg.hidden_dim, classes],
        (0..enc_cfg.hidden_dim * classes).map(|_| dist.sample(&mut rng) as f32).collect(),
    );
    clf.insert("clf.b", vec![classes], vec![0.0; classes]);
    let mut enc_opt = OptimizerState::new(&enc_params);
    let mut clf_opt = OptimizerState::new(&clf);

    let lengths: Vec<usize> = train_ids.iter().map(|id| input.t(index[id])).collect();
    let steps_per_epoch = train_ids.len().div_ceil(opts.batch_utterances) as u64;
    let total_steps = steps_per_epoch * opts.epochs as u64;
    let sched = TrainSchedule {
        total_steps,
        peak_lr: opts.peak_lr,
        batch_size: opts.batch_utterances,
        dropout: enc_cfg.dropout,
        ..TrainSchedule::pretrain_default()
    };

    let mut log = Vec::with_capacity(total_steps as usize);
    let mut plan: Vec<Vec<usize>> = Vec::new();
    let mut plan_epoch = u64::MAX;
    for step0 in 0..total_steps {
        let step = step0 + 1;
        let epoch = step0 / steps_per_epoch;
        let slot = (step0 % steps_per_epoch) as usize;
        if epoch != plan_epoch {
            plan = crate::train::plan_batches(&lengths, opts.batch_utterances, cfg.seed, epoch);
            plan_epoch = epoch;
        }
        let batch_ids: Vec<&String> = plan[slot].iter().map(|&k| &train_ids[k]).collect();

        let t_max = batch_ids.iter().map(|id| input.t(index[id.as_str()])).max().unwrap();
        let b = batch_ids.len();
        let d = enc_cfg.input_dim;
        let mut xb = vec![0.0f32; b * t_max * d];
        let mut yb = vec![0usize; b * t_max];
        let mut mask = vec![false; b * t_max];
        let mut lens = Vec::with_capacity(b);
        for (bi, id) in batch_ids.iter().enumerate() {
            let i = index[id.as_str()];
            let seq = &features[i];
            let aligned = labels.aligned(seq)?;
            xb[bi * t_max * d..bi * t_max * d + seq.t * d].copy_from_slice(&seq.frames);
            for (k, &c) in aligned.iter().enumerate() {
                yb[bi * t_max + k] = c;
                mask[bi * t_max + k] = true;
            }
            lens.push(seq.t);
        }

        let mut tape = Tape::<f32>::new();
        let enc_bound = bind(&mut tape, &enc_params);
        let clf_bound = bind(&mut tape, &clf);
        let x = tape.constant(xb, vec![b * t_max, d]);
        let mut drng = seed::rng_for(&[cfg.seed, step, seed::fnv1a("ft-dropout")]);
        let enc = encode(&mut tape, enc_cfg, &enc_bound, x, b, t_max, &lens, true, &mut drng)?;
        let logits = tape.matmul(enc.last(), clf_bound.get("clf.w")?)?;
        let logits = tape.add_bias(logits, clf_bound.get("clf.b")?)?;
        let loss = tape.cross_entropy_mean(logits, &yb, Some(&mask))?;
        let loss_val = tape.scalar(loss);
        tape.backward(loss)?;

        let clf_grads = collect_grads(&tape, &clf_bound);
        let lr = lr_at(step, &sched)?;
        let mut sq = 0.0f64;
        if opts.encoder_lr_scale > 0.0 {
            let enc_grads = collect_grads(&tape, &enc_bound);
            let n =
                adam_step(&mut enc_params, &enc_grads, &mut enc_opt, lr * opts.encoder_lr_scale, Some(1.0))?;
            sq += n * n;
        }
        let n = adam_step(&mut clf, &clf_grads, &mut clf_opt, lr, Some(1.0))?;
        sq += n * n;
        log.push(LossRow { step, lr, loss: loss_val, grad_norm: sq.sqrt() });
    }

    // Test accuracy with the fine-tuned encoder in eval mode.
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for id in &test_ids {
        let seq = &features[index[id]];
        let hidden = extract_last(enc_cfg, &enc_params, seq)?;
        let g = Gathered {
            xs: vec![hidden.frames],
            y: labels.aligned(seq)?,
            n: hidden.t,
            d: hidden.d,
        };
        preds.extend(classify_frames(&g, &clf)?);
        truth.extend(g.y);
    }
    let accuracy = evaluate_accuracy(&preds, &truth)?;
    Ok(FinetuneOutputs {
        report: ProbeReport {
            input_kind: "finetune".to_string(),
            task: "frame-linear".to_string(),
            budget: 1.0,
            accuracy,
            seed: cfg.seed,
            split: format!("train {}/test {} utterances", train_ids.len(), test_ids.len()),
        },
        encoder_params: enc_params,
        classifier: clf,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::repr::extract_layers;
    use rand::Rng;

    // ── label plumbing ──

    #[test]
    fn frame_labels_round_trip_and_reject_gaps() {
        let text = "utterance_id,frame_index,class_id\nb,0,2\na,1,1\na,0,0\n";
        let set = FrameLabelSet::parse_csv(text).unwrap();
        assert_eq!(set.labels["a"], vec![0, 1]);
        assert_eq!(set.labels["b"], vec![2]);
        assert_eq!(set.n_classes, 3);
        let again = FrameLabelSet::parse_csv(&set.to_csv()).unwrap();
        assert_eq!(again.labels, set.labels);

        assert!(FrameLabelSet::parse_csv("a,0,1\na,2,1\n").is_err(), "gap must fail");
        assert!(FrameLabelSet::parse_csv("a,0\n").is_err(), "missing field must fail");
        assert!(FrameLabelSet::parse_csv("").is_err(), "empty must fail");
    }

    #[test]
    fn utterance_labels_round_trip_and_reject_duplicates() {
        let set = UtteranceLabelSet::parse_csv("utterance_id,class_id\nu1,0\nu2,3\n").unwrap();
        assert_eq!(set.labels["u2"], 3);
        assert_eq!(set.n_classes, 4);
        let again = UtteranceLabelSet::parse_csv(&set.to_csv()).unwrap();
        assert_eq!(again.labels, set.labels);
        assert!(UtteranceLabelSet::parse_csv("u1,0\nu1,1\n").is_err());
    }

    fn seq_of(id: &str, t: usize, d: usize, stack: usize, fill: impl FnMut(usize) -> f32) -> FeatureSequence {
        FeatureSequence {
            frames: (0..t * d).map(fill).collect(),
            t,
            d,
            kind: FeatureKind::Mel,
            sample_rate_hz: 16_000,
            hop_ms: 10.0,
            stack_factor: stack,
            utterance_id: id.into(),
        }
    }

    #[test]
    fn alignment_majority_votes_within_stacked_steps() {
        let mut labels = BTreeMap::new();
        labels.insert("u".to_string(), vec![0, 0, 1, 1, 1, 1, 2, 2]);
        let set = FrameLabelSet::new(labels);
        // stack 3: windows [0,0,1] [1,1,1] [2,2] → 0,1,2
        let seq = seq_of("u", 3, 4, 3, |_| 0.0);
        assert_eq!(set.aligned(&seq).unwrap(), vec![0, 1, 2]);
        // stack 2 tie [0,1] → smallest id 0
        let mut l2 = BTreeMap::new();
        l2.insert("u".to_string(), vec![1, 0]);
        let tied = FrameLabelSet::new(l2);
        let seq2 = seq_of("u", 1, 4, 2, |_| 0.0);
        assert_eq!(tied.aligned(&seq2).unwrap(), vec![0]);
        // wrong feature length
        let bad = seq_of("u", 5, 4, 3, |_| 0.0);
        assert!(matches!(set.aligned(&bad), Err(ProbeError::LabelLength { .. })));
        // unknown utterance
        let missing = seq_of("nope", 3, 4, 3, |_| 0.0);
        assert!(matches!(set.aligned(&missing), Err(ProbeError::MissingLabels { .. })));
    }

    #[test]
    fn accuracy_is_exact_match_fraction() {
        assert_eq!(evaluate_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(evaluate_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            evaluate_accuracy(&[1], &[1, 2]),
            Err(ProbeError::LengthMismatch { .. })
        ));
        assert!(matches!(evaluate_accuracy(&[], &[]), Err(ProbeError::EmptyEvaluation)));
    }

    // ── budgets and splits ──

    fn id_pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("utt{i:04}")).collect()
    }

    #[test]
    fn budget_arithmetic_matches_rounding_rule() {
        let pool = id_pool(1000);
        assert_eq!(select_budget(&pool, 1.0, 7).unwrap().len(), 1000);
        assert_eq!(select_budget(&pool, 0.001, 7).unwrap().len(), 1);
        assert_eq!(select_budget(&pool, 0.0104, 7).unwrap().len(), 10);
        assert!(select_budget(&pool, 0.0, 7).is_err());
        assert!(select_budget(&pool, 1.5, 7).is_err());
    }

    #[test]
    fn budgets_nest_and_reproduce() {
        let pool = id_pool(200);
        let mut prev: Vec<String> = Vec::new();
        for b in [0.005, 0.05, 0.5, 1.0] {
            let sel = select_budget(&pool, b, 99).unwrap();
            let again = select_budget(&pool, b, 99).unwrap();
            assert_eq!(sel, again);
            assert!(sel.len() >= prev.len());
            let set: std::collections::BTreeSet<&String> = sel.iter().collect();
            assert!(prev.iter().all(|id| set.contains(id)), "budget {b} not nested");
            prev = sel;
        }
        // Different seed picks a different prefix (overwhelmingly likely).
        assert_ne!(select_budget(&pool, 0.05, 1).unwrap(), select_budget(&pool, 0.05, 2).unwrap());
    }

    #[test]
    fn split_is_nine_to_one_disjoint_and_order_insensitive() {
        let pool = id_pool(20);
        let (train, test) = split_9_1(&pool, 3).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(test.len(), 2);
        let mut all: Vec<String> = train.iter().chain(&test).cloned().collect();
        all.sort();
        let mut want = pool.clone();
        want.sort();
        assert_eq!(all, want);
        let mut reversed = pool.clone();
        reversed.reverse();
        let (train2, test2) = split_9_1(&reversed, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(split_9_1(&pool[..1], 3).is_err());
    }

    #[test]
    fn stratified_split_keeps_every_class_in_train() {
        let mut classes = BTreeMap::new();
        let mut pool = Vec::new();
        for i in 0..19 {
            let id = format!("a{i:02}");
            classes.insert(id.clone(), 0);
            pool.push(id);
        }
        classes.insert("lone".to_string(), 1);
        pool.push("lone".to_string());
        for seed_value in 0..10 {
            let (train, test) = split_9_1_stratified(&pool, &classes, seed_value).unwrap();
            assert!(train.contains(&"lone".to_string()), "single-member class left train");
            assert!(!test.is_empty());
            let train_classes: std::collections::BTreeSet<usize> =
                train.iter().map(|id| classes[id]).collect();
            assert_eq!(train_classes.len(), 2);
        }
    }

    // ── linear frame probe ──

    /// Four linearly separable frame classes: class c puts a +2 bump on
    /// coordinates {2c, 2c+1} plus small seeded noise.
    fn separable_corpus(
        n_utts: usize,
        t: usize,
        seed_value: u64,
    ) -> (Vec<FeatureSequence>, FrameLabelSet) {
        let d = 8;
        let mut rng = seed::rng_for(&[seed_value, seed::fnv1a("sep")]);
        let mut seqs = Vec::new();
        let mut labels = BTreeMap::new();
        for u in 0..n_utts {
            let mut frames = vec![0.0f32; t * d];
            let mut labs = Vec::with_capacity(t);
            for k in 0..t {
                let c = rng.random_range(0..4usize);
                labs.push(c);
                for j in 0..d {
                    frames[k * d + j] = rng.random_range(-0.3..0.3);
                }
                frames[k * d + 2 * c] += 2.0;
                frames[k * d + 2 * c + 1] += 2.0;
            }
            let id = format!("utt{u:03}");
            labels.insert(id.clone(), labs);
            seqs.push(FeatureSequence {
                frames,
                t,
                d,
                kind: FeatureKind::Mel,
                sample_rate_hz: 16_000,
                hop_ms: 10.0,
                stack_factor: 1,
                utterance_id: id,
            });
        }
        (seqs, FrameLabelSet::new(labels))
    }

    #[test]
    fn linear_probe_solves_separable_frames() {
        let (seqs, labels) = separable_corpus(40, 30, 1);
        let cfg = ProbeConfig { seed: 5, ..ProbeConfig::default() };
        let out = train_linear_frame_probe(&ProbeInput::Fixed(&seqs), &labels, 1.0, &cfg).unwrap();
        assert!(out.report.accuracy > 0.95, "accuracy {}", out.report.accuracy);
        assert_eq!(out.report.input_kind, "mel");
        assert!(out.mixer.is_none());
    }

    #[test]
    fn linear_probe_on_random_labels_sits_at_chance() {
        let d = 8;
        let t = 30;
        let mut rng = seed::rng_for(&[42]);
        let mut seqs = Vec::new();
        let mut labels = BTreeMap::new();
        for u in 0..40 {
            let id = format!("utt{u:03}");
            labels.insert(id.clone(), (0..t).map(|_| rng.random_range(0..4usize)).collect());
            seqs.push(seq_of(&id, t, d, 1, |_| rng.random_range(-1.0..1.0f32)));
        }
        let labels = FrameLabelSet::new(labels);
        let cfg = ProbeConfig { seed: 9, max_epochs: 15, ..ProbeConfig::default() };
        let out = train_linear_frame_probe(&ProbeInput::Fixed(&seqs), &labels, 1.0, &cfg).unwrap();
        // 4 test utterances × 30 frames; 3σ binomial band around 0.25.
        let n_test = 4.0 * 30.0f64;
        let sigma = (0.25 * 0.75 / n_test).sqrt();
        assert!(
            (out.report.accuracy - 0.25).abs() < 3.0 * sigma + 1e-9,
            "accuracy {} outside chance band",
            out.report.accuracy
        );
    }

    #[test]
    fn probe_runs_reproduce_bitwise() {
        let (seqs, labels) = separable_corpus(20, 12, 3);
        let cfg = ProbeConfig { seed: 13, max_epochs: 6, ..ProbeConfig::default() };
        let a = train_linear_frame_probe(&ProbeInput::Fixed(&seqs), &labels, 0.5, &cfg).unwrap();
        let b = train_linear_frame_probe(&ProbeInput::Fixed(&seqs), &labels, 0.5, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.accuracy.to_bits(), b.report.accuracy.to_bits());
        for (name, p) in a.params.iter() {
            let q = b.params.get(name).unwrap();
            for (x, y) in p.data.iter().zip(&q.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn mixer_input_trains_and_stays_a_probability_vector() {
        let enc_cfg = EncoderConfig {
            hidden_dim: 16,
            ff_dim: 32,
            heads: 2,
            layers: 2,
            downsample: 1,
            consecutive: 3,
            input_dim: 8,
            target_dim: 8,
            dropout: 0.1,
            target_kind: FeatureKind::Mel,
            max_seq_len: 64,
        };
        let enc_params = init_weights(&enc_cfg, 2);
        let (seqs, labels) = separable_corpus(16, 10, 4);
        let stacks: Vec<LayerStack> =
            seqs.iter().map(|s| extract_layers(&enc_cfg, &enc_params, s).unwrap()).collect();
        let cfg = ProbeConfig { seed: 21, max_epochs: 8, ..ProbeConfig::default() };
        let out = train_linear_frame_probe(&ProbeInput::Mixed(&stacks), &labels, 1.0, &cfg).unwrap();
        assert_eq!(out.report.input_kind, "repr-weighted");
        let mixer = out.mixer.expect("mixer trained");
        let sum: f64 = mixer.weights().iter().map(|&w| w as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "weights sum {sum}");
    }

    #[test]
    fn sweep_reports_every_budget_and_improves_with_labels() {
        let (seqs, labels) = separable_corpus(50, 20, 6);
        let cfg = ProbeConfig { seed: 17, max_epochs: 12, ..ProbeConfig::default() };
        let input = ProbeInput::Fixed(&seqs);
        let reports =
            low_resource_sweep(&input, &labels, &[0.001, 0.01, 0.1, 1.0], &cfg).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports[3].accuracy >= reports[0].accuracy - 0.02);
        assert!(low_resource_sweep(&input, &labels, &[0.5, 0.1], &cfg).is_err());
        assert!(low_resource_sweep(&input, &labels, &[], &cfg).is_err());
    }

    // ── RNN utterance probe ──

    /// Two "speakers" separated by a constant offset on every coordinate.
    fn speaker_corpus(per_class: usize, t: usize) -> (Vec<FeatureSequence>, UtteranceLabelSet) {
        let d = 8;
        let mut rng = seed::rng_for(&[77]);
        let mut seqs = Vec::new();
        let mut labels = BTreeMap::new();
        for u in 0..per_class * 2 {
            let class = u % 2;
            let offset = if class == 0 { -0.8 } else { 0.8 };
            let id = format!("spk{u:03}");
            labels.insert(id.clone(), class);
            seqs.push(seq_of(&id, t, d, 1, |_| offset + rng.random_range(-0.2..0.2f32)));
        }
        (seqs, UtteranceLabelSet::new(labels))
    }

    fn rnn_cfg(seed_value: u64) -> ProbeConfig {
        ProbeConfig { seed: seed_value, rnn_width: 32, max_epochs: 25, ..ProbeConfig::default() }
    }

    #[test]
    fn rnn_probe_separates_offset_speakers() {
        let (seqs, labels) = speaker_corpus(12, 15);
        let out =
            train_rnn_utterance_probe(&ProbeInput::Fixed(&seqs), &labels, &rnn_cfg(31)).unwrap();
        assert!(out.report.accuracy > 0.95, "accuracy {}", out.report.accuracy);
        assert_eq!(out.report.task, "utterance-rnn");
    }

    #[test]
    fn rnn_probe_mean_pool_also_separates() {
        let (seqs, labels) = speaker_corpus(12, 15);
        let cfg = ProbeConfig { mean_pool: true, ..rnn_cfg(33) };
        let out = train_rnn_utterance_probe(&ProbeInput::Fixed(&seqs), &labels, &cfg).unwrap();
        assert!(out.report.accuracy > 0.95, "accuracy {}", out.report.accuracy);
    }

    #[test]
    fn rnn_probe_rejects_single_class() {
        let (seqs, _) = speaker_corpus(6, 8);
        let mut labels = BTreeMap::new();
        for s in &seqs {
            labels.insert(s.utterance_id.clone(), 0usize);
        }
        let labels = UtteranceLabelSet::new(labels);
        assert!(matches!(
            train_rnn_utterance_probe(&ProbeInput::Fixed(&seqs), &labels, &rnn_cfg(1)),
            Err(ProbeError::SingleClass(1))
        ));
    }

    #[test]
    fn rnn_probe_on_identical_features_predicts_majority() {
        let d = 8;
        let mut seqs = Vec::new();
        let mut labels = BTreeMap::new();
        for u in 0..24 {
            let id = format!("utt{u:02}");
            // 18 of class 0, 6 of class 1, all features identical.
            labels.insert(id.clone(), usize::from(u % 4 == 3));
            seqs.push(seq_of(&id, 10, d, 1, |i| (i % d) as f32 * 0.1));
        }
        let labels = UtteranceLabelSet::new(labels);
        let cfg = rnn_cfg(3);
        let out = train_rnn_utterance_probe(&ProbeInput::Fixed(&seqs), &labels, &cfg).unwrap();
        // No signal: the model can at best learn the class prior, so test
        // accuracy equals the test share of the training majority class.
        let pool: Vec<String> = seqs.iter().map(|s| s.utterance_id.clone()).collect();
        let (train, test) = {
            let plain = split_9_1(&pool, cfg.seed).unwrap();
            let present: std::collections::BTreeSet<usize> =
                plain.0.iter().map(|id| labels.labels[id]).collect();
            if present.len() < 2 {
                split_9_1_stratified(&pool, &labels.labels, cfg.seed).unwrap()
            } else {
                plain
            }
        };
        let majority = {
            let ones = train.iter().filter(|id| labels.labels[*id] == 1).count();
            usize::from(ones * 2 > train.len())
        };
        let expected = test.iter().filter(|id| labels.labels[*id] == majority).count() as f64
            / test.len() as f64;
        assert!(
            (out.report.accuracy - expected).abs() < 0.35,
            "accuracy {} vs majority rate {expected}",
            out.report.accuracy
        );
    }

    // ── reports and fine-tuning ──

    #[test]
    fn report_csv_has_contracted_columns() {
        let rows = vec![ProbeReport {
            input_kind: "mel".into(),
            task: "frame-linear".into(),
            budget: 0.1,
            accuracy: 0.5,
            seed: 4,
            split: "x".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "input_kind,task,budget,accuracy,seed\nmel,frame-linear,0.1,0.5,4\n");
    }

    #[test]
    fn frozen_finetune_leaves_encoder_untouched() {
        let enc_cfg = EncoderConfig {
            hidden_dim: 16,
            ff_dim: 32,
            heads: 2,
            layers: 1,
            downsample: 1,
            consecutive: 3,
            input_dim: 8,
            target_dim: 8,
            dropout: 0.1,
            target_kind: FeatureKind::Mel,
            max_seq_len: 64,
        };
        let pretrained = init_weights(&enc_cfg, 6);
        let (seqs, labels) = separable_corpus(12, 10, 8);
        let cfg = ProbeConfig { seed: 19, ..ProbeConfig::default() };
        let opts = FinetuneOptions { encoder_lr_scale: 0.0, epochs: 1, ..FinetuneOptions::default() };
        let out =
            finetune_frame_probe(&enc_cfg, &pretrained, &seqs, &labels, &cfg, &opts).unwrap();
        for (name, p) in pretrained.iter() {
            let q = out.encoder_params.get(name).unwrap();
            for (a, b) in p.data.iter().zip(&q.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} changed while frozen");
            }
        }
        assert_eq!(out.log.len(), 2, "1 epoch of 11 train utts at batch 6 = 2 steps");
        assert!(out.log.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
        assert_eq!(out.report.input_kind, "finetune");
    }

    #[test]
    fn finetune_runs_jointly_and_logs_epochs_times_steps() {
        let enc_cfg = EncoderConfig {
            hidden_dim: 16,
            ff_dim: 32,
            heads: 2,
            layers: 1,
            downsample: 1,
            consecutive: 3,
            input_dim: 8,
            target_dim: 8,
            dropout: 0.1,
            target_kind: FeatureKind::Mel,
            max_seq_len: 64,
        };
        let pretrained = init_weights(&enc_cfg, 10);
        let (seqs, labels) = separable_corpus(12, 10, 14);
        let cfg = ProbeConfig { seed: 23, ..ProbeConfig::default() };
        let opts = FinetuneOptions { epochs: 2, ..FinetuneOptions::default() };
        let out =
            finetune_frame_probe(&enc_cfg, &pretrained, &seqs, &labels, &cfg, &opts).unwrap();
        assert_eq!(out.log.len(), 4, "2 epochs × 2 steps per epoch");
        // Joint updates did move the encoder.
        let moved = pretrained.iter().any(|(name, p)| {
            let q = out.encoder_params.get(name).unwrap();
            p.data.iter().zip(&q.data).any(|(a, b)| a != b)
        });
        assert!(moved, "encoder params never changed");
    }
}
