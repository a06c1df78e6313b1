//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is a flat row-major buffer owned by a [`Tape`]. Ops execute
//! eagerly and record enough state to replay the chain rule in reverse.
//! The element type is generic: training runs in `f32`, gradient checking
//! runs the same code in `f64`.
//!
//! A tape lives for one forward/backward round trip and is confined to a
//! single thread; weights live outside the tape and are registered as
//! leaves each step.

pub mod gradcheck;

use std::fmt;

/// Element type for tensor data. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n) with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dims/strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: dimension must be non-zero")]
    ZeroDim { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("masked_l1_loss: no frame selected, loss undefined")]
    EmptySelection,
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropout(f64),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

struct Node<E> {
    data: Vec<E>,
    shape: Vec<usize>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
}

/// One recorded operation: ids plus whatever the backward rule needs.
enum Op<E> {
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Per-slice matmul over a leading batch axis. `transpose_b` multiplies
    /// by Bᵀ, with B stored as [batch, n, k].
    BatchedMatmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
        out: TensorId,
        rows: usize,
        cols: usize,
    },
    Scale {
        x: TensorId,
        out: TensorId,
        factor: E,
    },
    Gelu {
        x: TensorId,
        out: TensorId,
    },
    Tanh {
        x: TensorId,
        out: TensorId,
    },
    /// Inverted dropout: kept entries scaled by 1/(1-p) at train time.
    Dropout {
        x: TensorId,
        out: TensorId,
        keep: Vec<bool>,
        inv_keep_prob: E,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        rows: usize,
        cols: usize,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    /// Row softmax over the last axis, optionally restricted to a per-slice
    /// prefix of valid columns (entries beyond it are exactly zero).
    SoftmaxRows {
        x: TensorId,
        out: TensorId,
        batch: usize,
        rows: usize,
        cols: usize,
        valid: Option<Vec<usize>>,
    },
    SplitHeads {
        x: TensorId,
        out: TensorId,
        batch: usize,
        time: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: TensorId,
        out: TensorId,
        batch: usize,
        time: usize,
        heads: usize,
        head_dim: usize,
    },
    SliceRows {
        x: TensorId,
        out: TensorId,
        start: usize,
        rows: usize,
        cols: usize,
    },
    MeanRows {
        x: TensorId,
        out: TensorId,
        rows: usize,
        cols: usize,
    },
    Sum {
        x: TensorId,
        out: TensorId,
    },
    /// Mean absolute error over the selected rows only; gradient is exactly
    /// zero at unselected rows.
    MaskedL1 {
        pred: TensorId,
        target: TensorId,
        out: TensorId,
        select: Vec<bool>,
        cols: usize,
        n_selected: usize,
    },
    /// Fused log-softmax + NLL, averaged over counted rows.
    CrossEntropyMean {
        logits: TensorId,
        out: TensorId,
        labels: Vec<usize>,
        row_mask: Option<Vec<bool>>,
        rows: usize,
        cols: usize,
        probs: Vec<E>,
        n_counted: usize,
    },
    /// out = gamma * sum_l weights[l] * layers[l]; `mix` caches the
    /// pre-gamma sum for the gamma gradient.
    WeightedCombine {
        layers: Vec<TensorId>,
        weights: TensorId,
        gamma: TensorId,
        out: TensorId,
        mix: Vec<E>,
    },
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Wengert tape: owns all tensors of one forward pass and replays the
/// recorded ops in reverse to accumulate gradients into the leaves.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    ops: Vec<Op<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    fn push_node(&mut self, data: Vec<E>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        assert_eq!(numel(&shape), data.len(), "shape/data length mismatch");
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, needs_grad });
        id
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn param(&mut self, data: &[E], shape: Vec<usize>) -> TensorId {
        self.push_node(data.to_vec(), shape, true)
    }

    /// Same as [`Tape::param`] but takes ownership of the buffer.
    pub fn push_param(&mut self, data: Vec<E>, shape: Vec<usize>) -> TensorId {
        self.push_node(data, shape, true)
    }

    /// Leaf excluded from gradient computation (inputs, targets, constants).
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> TensorId {
        self.push_node(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, id: TensorId) -> E {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated by [`Tape::backward`], if any flowed to `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient for a leaf, densified to zeros when nothing flowed.
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<E> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![E::zero(); self.numel(id)],
        }
    }

    fn record(&mut self, data: Vec<E>, shape: Vec<usize>, needs_grad: bool, op: impl FnOnce(TensorId) -> Op<E>) -> TensorId {
        let out = self.push_node(data, shape, needs_grad);
        let op = op(out);
        #[cfg(debug_assertions)]
        self.check_finite(out, op_name(&op));
        self.ops.push(op);
        out
    }

    #[cfg(debug_assertions)]
    fn check_finite(&self, id: TensorId, op: &'static str) {
        for (i, v) in self.nodes[id.0].data.iter().enumerate() {
            assert!(
                v.is_finite(),
                "non-finite value {v:?} at index {i} produced by op `{op}`"
            );
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(&mut out, self.data(a), self.data(b), m, k, n, false, false, E::zero());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.record(out, vec![m, n], ng, |o| Op::Matmul { a, b, out: o, m, k, n }))
    }

    /// C[batch,m,n] = A[batch,m,k] · B[batch,k,n].
    pub fn batched_matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.batched_matmul_impl(a, b, false)
    }

    /// C[batch,m,n] = A[batch,m,k] · B[batch,n,k]ᵀ (per slice).
    pub fn batched_matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.batched_matmul_impl(a, b, true)
    }

    fn batched_matmul_impl(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> TensorResult<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matmul",
                details: format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                transpose_b,
                E::zero(),
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.record(out, vec![batch, m, n], ng, |o| Op::BatchedMatmul {
            a,
            b,
            out: o,
            batch,
            m,
            k,
            n,
            transpose_b,
        }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("add", a, b, |x, y| x + y, |o, a, b| Op::Add { a, b, out: o })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("sub", a, b, |x, y| x - y, |o, a, b| Op::Sub { a, b, out: o })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.zip_op("mul", a, b, |x, y| x * y, |o, a, b| Op::Mul { a, b, out: o })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(E, E) -> E,
        op: impl FnOnce(TensorId, TensorId, TensorId) -> Op<E>,
    ) -> TensorResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.record(out, shape, ng, |o| op(o, a, b)))
    }

    /// Broadcast-add a length-`cols` bias over every row of a 2-D tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorResult<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                details: format!("{sx:?} + {sb:?}"),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] + self.data(bias)[c];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.record(out, vec![rows, cols], ng, |o| Op::AddBias { x, bias, out: o, rows, cols }))
    }

    pub fn scale(&mut self, x: TensorId, factor: E) -> TensorId {
        let out: Vec<E> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.record(out, shape, ng, |o| Op::Scale { x, out: o, factor })
    }

    /// GELU, tanh approximation (BERT convention).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.record(out, shape, ng, |o| Op::Gelu { x, out: o })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.record(out, shape, ng, |o| Op::Tanh { x, out: o })
    }

    /// Inverted dropout. `p == 0` is the identity and records nothing.
    pub fn dropout<R: rand::Rng>(&mut self, x: TensorId, p: f64, rng: &mut R) -> TensorResult<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let inv = E::from_f64(1.0 / (1.0 - p));
        let keep: Vec<bool> = (0..self.numel(x)).map(|_| rng.random::<f64>() >= p).collect();
        let out: Vec<E> = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * inv } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.record(out, shape, ng, |o| Op::Dropout { x, out: o, keep, inv_keep_prob: inv }))
    }

    /// Standardize over the last axis, then scale/shift by gamma/beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: E) -> TensorResult<TensorId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().ok_or(TensorError::ZeroDim { op: "layer_norm" })?;
        if cols == 0 {
            return Err(TensorError::ZeroDim { op: "layer_norm" });
        }
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "x {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let rows = numel(&sx) / cols;
        let mut xhat = vec![E::zero(); rows * cols];
        let mut inv_std = vec![E::zero(); rows];
        let mut out = vec![E::zero(); rows * cols];
        let inv_cols = E::from_f64(1.0 / cols as f64);
        for r in 0..rows {
            let row = &self.data(x)[r * cols..(r + 1) * cols];
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_cols;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_cols;
            let istd = (var + eps).sqrt().recip();
            inv_std[r] = istd;
            for c in 0..cols {
                let h = (self.data(x)[r * cols + c] - mean) * istd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * self.data(gamma)[c] + self.data(beta)[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.record(out, sx, ng, |o| Op::LayerNorm {
            x,
            gamma,
            beta,
            out: o,
            rows,
            cols,
            xhat,
            inv_std,
        }))
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                details: format!("expected 2-D, got {sx:?}"),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        self.softmax_impl(x, 1, rows, cols, None)
    }

    /// Softmax over the last axis of a 3-D tensor, with per-slice valid
    /// column counts. Columns at or beyond the valid count get exactly zero.
    pub fn masked_softmax(&mut self, x: TensorId, valid: Vec<usize>) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 3 || valid.len() != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                details: format!("x {sx:?}, valid len {}", valid.len()),
            });
        }
        let (batch, rows, cols) = (sx[0], sx[1], sx[2]);
        if valid.iter().any(|&v| v == 0 || v > cols) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                details: "valid counts must be in 1..=cols".into(),
            });
        }
        self.softmax_impl(x, batch, rows, cols, Some(valid))
    }

    fn softmax_impl(
        &mut self,
        x: TensorId,
        batch: usize,
        rows: usize,
        cols: usize,
        valid: Option<Vec<usize>>,
    ) -> TensorResult<TensorId> {
        let mut out = vec![E::zero(); batch * rows * cols];
        for s in 0..batch {
            let v = valid.as_ref().map_or(cols, |vs| vs[s]);
            for r in 0..rows {
                let base = (s * rows + r) * cols;
                let row = &self.data(x)[base..base + v];
                let mut max = row[0];
                for &e in row {
                    if e > max {
                        max = e;
                    }
                }
                let mut sum = E::zero();
                for c in 0..v {
                    let e = (self.data(x)[base + c] - max).exp();
                    out[base + c] = e;
                    sum = sum + e;
                }
                let inv = sum.recip();
                for c in 0..v {
                    out[base + c] = out[base + c] * inv;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.record(out, shape, ng, |o| Op::SoftmaxRows {
            x,
            out: o,
            batch,
            rows,
            cols,
            valid,
        }))
    }

    /// [batch*time, heads*head_dim] -> [batch*heads, time, head_dim].
    pub fn split_heads(&mut self, x: TensorId, batch: usize, time: usize, heads: usize) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != batch * time || sx[1] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                details: format!("x {sx:?}, batch {batch}, time {time}, heads {heads}"),
            });
        }
        let head_dim = sx[1] / heads;
        let mut out = vec![E::zero(); batch * time * heads * head_dim];
        for b in 0..batch {
            for t in 0..time {
                for h in 0..heads {
                    let src = (b * time + t) * heads * head_dim + h * head_dim;
                    let dst = ((b * heads + h) * time + t) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&self.data(x)[src..src + head_dim]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.record(out, vec![batch * heads, time, head_dim], ng, |o| Op::SplitHeads {
            x,
            out: o,
            batch,
            time,
            heads,
            head_dim,
        }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: TensorId, batch: usize, heads: usize) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] != batch * heads {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                details: format!("x {sx:?}, batch {batch}, heads {heads}"),
            });
        }
        let (time, head_dim) = (sx[1], sx[2]);
        let mut out = vec![E::zero(); batch * time * heads * head_dim];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..time {
                    let src = ((b * heads + h) * time + t) * head_dim;
                    let dst = (b * time + t) * heads * head_dim + h * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&self.data(x)[src..src + head_dim]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.record(out, vec![batch * time, heads * head_dim], ng, |o| Op::MergeHeads {
            x,
            out: o,
            batch,
            time,
            heads,
            head_dim,
        }))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, rows: usize) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + rows > sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                details: format!("x {sx:?}, start {start}, rows {rows}"),
            });
        }
        let cols = sx[1];
        let out = self.data(x)[start * cols..(start + rows) * cols].to_vec();
        let ng = self.needs(x);
        Ok(self.record(out, vec![rows, cols], ng, |o| Op::SliceRows { x, out: o, start, rows, cols }))
    }

    /// Column-wise mean over rows: [rows, cols] -> [1, cols].
    pub fn mean_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                details: format!("x {sx:?}"),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let inv = E::from_f64(1.0 / rows as f64);
        let mut out = vec![E::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] = out[c] + self.data(x)[r * cols + c];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let ng = self.needs(x);
        Ok(self.record(out, vec![1, cols], ng, |o| Op::MeanRows { x, out: o, rows, cols }))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut s = E::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let ng = self.needs(x);
        self.record(vec![s], vec![1], ng, |o| Op::Sum { x, out: o })
    }

    /// Mean absolute error between `pred` and `target` over selected rows.
    /// `select` has one entry per row; at least one must be true. The
    /// gradient w.r.t. `pred` is exactly zero at unselected rows.
    pub fn masked_l1_loss(&mut self, pred: TensorId, target: TensorId, select: &[bool]) -> TensorResult<TensorId> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st || sp.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_l1_loss",
                details: format!("pred {sp:?}, target {st:?}"),
            });
        }
        let (rows, cols) = (sp[0], sp[1]);
        if select.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "masked_l1_loss",
                details: format!("select len {} vs {rows} rows", select.len()),
            });
        }
        let n_selected = select.iter().filter(|&&s| s).count();
        if n_selected == 0 {
            return Err(TensorError::EmptySelection);
        }
        let mut acc = E::zero();
        for r in 0..rows {
            if !select[r] {
                continue;
            }
            for c in 0..cols {
                acc = acc + (self.data(pred)[r * cols + c] - self.data(target)[r * cols + c]).abs();
            }
        }
        let loss = acc * E::from_f64(1.0 / (n_selected * cols) as f64);
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.record(vec![loss], vec![1], ng, |o| Op::MaskedL1 {
            pred,
            target,
            out: o,
            select: select.to_vec(),
            cols,
            n_selected,
        }))
    }

    /// Softmax cross-entropy averaged over rows (optionally only rows where
    /// `row_mask` is true). `labels[r]` is the class index for row r.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        row_mask: Option<&[bool]>,
    ) -> TensorResult<TensorId> {
        let sl = self.shape(logits);
        if sl.len() != 2 || labels.len() != sl[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                details: format!("logits {sl:?}, labels len {}", labels.len()),
            });
        }
        let (rows, cols) = (sl[0], sl[1]);
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy_mean",
                    details: format!("row_mask len {} vs {rows} rows", m.len()),
                });
            }
        }
        if labels.iter().any(|&l| l >= cols) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                details: format!("label out of range for {cols} classes"),
            });
        }
        let counted = |r: usize| row_mask.map_or(true, |m| m[r]);
        let n_counted = (0..rows).filter(|&r| counted(r)).count();
        if n_counted == 0 {
            return Err(TensorError::EmptySelection);
        }
        let mut probs = vec![E::zero(); rows * cols];
        let mut acc = E::zero();
        for r in 0..rows {
            let base = r * cols;
            let row = &self.data(logits)[base..base + cols];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                probs[base + c] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for c in 0..cols {
                probs[base + c] = probs[base + c] * inv;
            }
            if counted(r) {
                acc = acc - (self.data(logits)[base + labels[r]] - max - sum.ln());
            }
        }
        let loss = acc * E::from_f64(1.0 / n_counted as f64);
        let ng = self.needs(logits);
        Ok(self.record(vec![loss], vec![1], ng, |o| Op::CrossEntropyMean {
            logits,
            out: o,
            labels: labels.to_vec(),
            row_mask: row_mask.map(|m| m.to_vec()),
            rows,
            cols,
            probs,
            n_counted,
        }))
    }

    /// out = gamma * sum_l weights[l] * layers[l]. All layers must share a
    /// shape; `weights` has one entry per layer and `gamma` is a scalar.
    pub fn weighted_combine(&mut self, layers: &[TensorId], weights: TensorId, gamma: TensorId) -> TensorResult<TensorId> {
        if layers.is_empty() || self.numel(weights) != layers.len() || self.numel(gamma) != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_combine",
                details: format!(
                    "{} layers, weights {:?}, gamma {:?}",
                    layers.len(),
                    self.shape(weights),
                    self.shape(gamma)
                ),
            });
        }
        let shape = self.shape(layers[0]).to_vec();
        for &l in layers {
            if self.shape(l) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_combine",
                    details: "layers differ in shape".into(),
                });
            }
        }
        let n = numel(&shape);
        let mut mix = vec![E::zero(); n];
        for (l, &id) in layers.iter().enumerate() {
            let w = self.data(weights)[l];
            for (m, &v) in mix.iter_mut().zip(self.data(id)) {
                *m = *m + w * v;
            }
        }
        let g = self.scalar(gamma);
        let out: Vec<E> = mix.iter().map(|&v| v * g).collect();
        let ng = layers.iter().any(|&l| self.needs(l)) || self.needs(weights) || self.needs(gamma);
        Ok(self.record(out, shape, ng, |o| Op::WeightedCombine {
            layers: layers.to_vec(),
            weights,
            gamma,
            out: o,
            mix,
        }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; visits each recorded op exactly
    /// once and accumulates gradients into every `needs_grad` node.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn take_out_grad(&self, out: TensorId) -> Option<Vec<E>> {
        self.nodes[out.0].grad.clone()
    }

    fn accumulate(&mut self, id: TensorId, delta: &[E]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![E::zero(); n]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    /// Accumulate `alpha * A·B` (with optional operand transposes) into the
    /// gradient buffer of `id`, without a temporary.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_gemm(
        &mut self,
        id: TensorId,
        offset: usize,
        a: &[E],
        b: &[E],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let total = self.nodes[id.0].data.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![E::zero(); total]);
        gemm(&mut grad[offset..offset + m * n], a, b, m, k, n, ta, tb, E::one());
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are plain ids plus saved buffers; moving the op out lets the
        // rules borrow node data while accumulating, and it is restored after.
        let op = std::mem::replace(&mut self.ops[idx], Op::Sum { x: TensorId(0), out: TensorId(0) });
        match &op {
            Op::Matmul { a, b, out, m, k, n } => {
                if let Some(d) = self.take_out_grad(*out) {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let b_data = self.nodes[b.0].data.clone();
                    self.accumulate_gemm(*a, 0, &d, &b_data, *m, *n, *k, false, true);
                    let a_data = self.nodes[a.0].data.clone();
                    self.accumulate_gemm(*b, 0, &a_data, &d, *k, *m, *n, true, false);
                }
            }
            Op::BatchedMatmul { a, b, out, batch, m, k, n, transpose_b } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let a_data = self.nodes[a.0].data.clone();
                    let b_data = self.nodes[b.0].data.clone();
                    for i in 0..*batch {
                        let ds = &d[i * m * n..(i + 1) * m * n];
                        let asl = &a_data[i * m * k..(i + 1) * m * k];
                        let bsl = &b_data[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // C = A·Bᵀ with B: [n,k] → dA = dC·B, dB = dCᵀ·A
                            self.accumulate_gemm(*a, i * m * k, ds, bsl, *m, *n, *k, false, false);
                            self.accumulate_gemm(*b, i * k * n, ds, asl, *n, *m, *k, true, false);
                        } else {
                            self.accumulate_gemm(*a, i * m * k, ds, bsl, *m, *n, *k, false, true);
                            self.accumulate_gemm(*b, i * k * n, asl, ds, *k, *m, *n, true, false);
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, &d);
                    self.accumulate(*b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*a, &d);
                    let neg: Vec<E> = d.iter().map(|&v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let da: Vec<E> = d.iter().zip(&self.nodes[b.0].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*a, &da);
                    let db: Vec<E> = d.iter().zip(&self.nodes[a.0].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBias { x, bias, out, rows, cols } => {
                if let Some(d) = self.take_out_grad(*out) {
                    self.accumulate(*x, &d);
                    let mut db = vec![E::zero(); *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] = db[c] + d[r * cols + c];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale { x, out, factor } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<E> = d.iter().map(|&v| v * *factor).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gelu { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<E> = d
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Tanh { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<E> = d
                        .iter()
                        .zip(&self.nodes[out.0].data)
                        .map(|(&g, &y)| g * (E::one() - y * y))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Dropout { x, out, keep, inv_keep_prob } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx: Vec<E> = d
                        .iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g * *inv_keep_prob } else { E::zero() })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, out, rows, cols, xhat, inv_std } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut dgamma = vec![E::zero(); *cols];
                    let mut dbeta = vec![E::zero(); *cols];
                    let mut dx = vec![E::zero(); rows * cols];
                    let inv_cols = E::from_f64(1.0 / *cols as f64);
                    for r in 0..*rows {
                        let base = r * cols;
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for c in 0..*cols {
                            let g = d[base + c] * self.nodes[gamma.0].data[c];
                            m1 = m1 + g;
                            m2 = m2 + g * xhat[base + c];
                            dgamma[c] = dgamma[c] + d[base + c] * xhat[base + c];
                            dbeta[c] = dbeta[c] + d[base + c];
                        }
                        m1 = m1 * inv_cols;
                        m2 = m2 * inv_cols;
                        for c in 0..*cols {
                            let g = d[base + c] * self.nodes[gamma.0].data[c];
                            dx[base + c] = inv_std[r] * (g - m1 - xhat[base + c] * m2);
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*gamma, &dgamma);
                    self.accumulate(*beta, &dbeta);
                }
            }
            Op::SoftmaxRows { x, out, batch, rows, cols, valid } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut dx = vec![E::zero(); batch * rows * cols];
                    for s in 0..*batch {
                        let v = valid.as_ref().map_or(*cols, |vs| vs[s]);
                        for r in 0..*rows {
                            let base = (s * rows + r) * cols;
                            let mut dot = E::zero();
                            for c in 0..v {
                                dot = dot + d[base + c] * self.nodes[out.0].data[base + c];
                            }
                            for c in 0..v {
                                let y = self.nodes[out.0].data[base + c];
                                dx[base + c] = y * (d[base + c] - dot);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SplitHeads { x, out, batch, time, heads, head_dim } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut dx = vec![E::zero(); batch * time * heads * head_dim];
                    for b in 0..*batch {
                        for t in 0..*time {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * time + t) * head_dim;
                                let dst = (b * time + t) * heads * head_dim + h * head_dim;
                                dx[dst..dst + head_dim].copy_from_slice(&d[src..src + head_dim]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::MergeHeads { x, out, batch, time, heads, head_dim } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let mut dx = vec![E::zero(); batch * time * heads * head_dim];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*time {
                                let src = (b * time + t) * heads * head_dim + h * head_dim;
                                let dst = ((b * heads + h) * time + t) * head_dim;
                                dx[dst..dst + head_dim].copy_from_slice(&d[src..src + head_dim]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::SliceRows { x, out, start, rows, cols } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let total = self.nodes[x.0].data.len();
                    let mut dx = vec![E::zero(); total];
                    dx[start * cols..(start + rows) * cols].copy_from_slice(&d);
                    self.accumulate(*x, &dx);
                }
            }
            Op::MeanRows { x, out, rows, cols } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let inv = E::from_f64(1.0 / *rows as f64);
                    let mut dx = vec![E::zero(); rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[r * cols + c] = d[c] * inv;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sum { x, out } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let dx = vec![d[0]; self.nodes[x.0].data.len()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::MaskedL1 { pred, target, out, select, cols, n_selected } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let scale = d[0] * E::from_f64(1.0 / (n_selected * cols) as f64);
                    let n = self.nodes[pred.0].data.len();
                    let mut dp = vec![E::zero(); n];
                    for (r, &sel) in select.iter().enumerate() {
                        if !sel {
                            continue;
                        }
                        for c in 0..*cols {
                            let i = r * cols + c;
                            let diff = self.nodes[pred.0].data[i] - self.nodes[target.0].data[i];
                            let s = if diff > E::zero() {
                                E::one()
                            } else if diff < E::zero() {
                                -E::one()
                            } else {
                                E::zero()
                            };
                            dp[i] = scale * s;
                        }
                    }
                    self.accumulate(*pred, &dp);
                    if self.nodes[target.0].needs_grad {
                        let dt: Vec<E> = dp.iter().map(|&v| -v).collect();
                        self.accumulate(*target, &dt);
                    }
                }
            }
            Op::CrossEntropyMean { logits, out, labels, row_mask, rows, cols, probs, n_counted } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let scale = d[0] * E::from_f64(1.0 / *n_counted as f64);
                    let mut dl = vec![E::zero(); rows * cols];
                    for r in 0..*rows {
                        if row_mask.as_ref().is_some_and(|m| !m[r]) {
                            continue;
                        }
                        let base = r * cols;
                        for c in 0..*cols {
                            let onehot = if c == labels[r] { E::one() } else { E::zero() };
                            dl[base + c] = scale * (probs[base + c] - onehot);
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
            Op::WeightedCombine { layers, weights, gamma, out, mix } => {
                if let Some(d) = self.take_out_grad(*out) {
                    let g = self.nodes[gamma.0].data[0];
                    for (l, &layer) in layers.iter().enumerate() {
                        let w = self.nodes[weights.0].data[l];
                        if self.nodes[weights.0].needs_grad {
                            let mut dot = E::zero();
                            for (&gd, &v) in d.iter().zip(&self.nodes[layer.0].data) {
                                dot = dot + gd * v;
                            }
                            let mut dw = vec![E::zero(); layers.len()];
                            dw[l] = g * dot;
                            self.accumulate(*weights, &dw);
                        }
                        if self.nodes[layer.0].needs_grad {
                            let dl: Vec<E> = d.iter().map(|&gd| gd * g * w).collect();
                            self.accumulate(layer, &dl);
                        }
                    }
                    if self.nodes[gamma.0].needs_grad {
                        let mut dot = E::zero();
                        for (&gd, &m) in d.iter().zip(mix) {
                            dot = dot + gd * m;
                        }
                        self.accumulate(*gamma, &[dot]);
                    }
                }
            }
        }
        self.ops[idx] = op;
    }
}

fn op_name<E>(op: &Op<E>) -> &'static str {
    match op {
        Op::Matmul { .. } => "matmul",
        Op::BatchedMatmul { .. } => "batched_matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::Tanh { .. } => "tanh",
        Op::Dropout { .. } => "dropout",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows { .. } => "softmax",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::SliceRows { .. } => "slice_rows",
        Op::MeanRows { .. } => "mean_rows",
        Op::Sum { .. } => "sum",
        Op::MaskedL1 { .. } => "masked_l1_loss",
        Op::CrossEntropyMean { .. } => "cross_entropy",
        Op::WeightedCombine { .. } => "weighted_combine",
    }
}

/// Row-major gemm: C += or = alpha·A·B with optional logical transposes
/// (the flag means "this operand is stored as the transpose of what the
/// product needs").
#[allow(clippy::too_many_arguments)]
fn gemm<E: Scalar>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize, ta: bool, tb: bool, beta: E) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "index {i}: {a} vs {e}");
        }
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let c = t.matmul(a, eye).unwrap();
        assert_close(t.data(c), &[1.0, 2.0, 3.0, 4.0], 0.0);
    }

    #[test]
    fn matmul_manual_arithmetic() {
        // [[1,2],[3,4]]·[[5,6],[7,8]] = [[19,22],[43,50]]
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let c = t.matmul(a, b).unwrap();
        assert_close(t.data(c), &[19.0, 22.0, 43.0, 50.0], 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 4], vec![2, 2]);
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_backward_rules() {
        // dA = dC·Bᵀ, dB = Aᵀ·dC with dC = 1
        let mut t = Tape::<f64>::new();
        let a = t.param(&[1.0, 2.0], vec![1, 2]);
        let b = t.param(&[3.0, 4.0], vec![2, 1]);
        let c = t.matmul(a, b).unwrap();
        t.backward(c).unwrap();
        assert_close(t.grad(a).unwrap(), &[3.0, 4.0], 1e-12);
        assert_close(t.grad(b).unwrap(), &[1.0, 2.0], 1e-12);
    }

    #[test]
    fn batched_matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (batch, m, k, n) = (3, 4, 5, 2);
        let a_data: Vec<f64> = (0..batch * m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let b_data: Vec<f64> = (0..batch * k * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut t = Tape::<f64>::new();
        let a = t.constant(a_data.clone(), vec![batch, m, k]);
        let b = t.constant(b_data.clone(), vec![batch, k, n]);
        let c = t.batched_matmul(a, b).unwrap();
        for s in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a_data[s * m * k + i * k + p] * b_data[s * k * n + p * n + j];
                    }
                    let got = t.data(c)[s * m * n + i * n + j];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batched_matmul_nt_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (batch, m, k, n) = (2, 3, 4, 5);
        let a_data: Vec<f64> = (0..batch * m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let b_data: Vec<f64> = (0..batch * n * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut t = Tape::<f64>::new();
        let a = t.constant(a_data.clone(), vec![batch, m, k]);
        let b = t.constant(b_data.clone(), vec![batch, n, k]);
        let c = t.batched_matmul_nt(a, b).unwrap();
        for s in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a_data[s * m * k + i * k + p] * b_data[s * n * k + j * k + p];
                    }
                    let got = t.data(c)[s * m * n + i * n + j];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_rows_become_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![5.0, 5.0, 5.0, -2.0, -2.0, -2.0], vec![2, 3]);
        let gamma = t.constant(vec![1.0; 3], vec![3]);
        let beta = t.constant(vec![0.0; 3], vec![3]);
        let y = t.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(t.data(y), &[0.0; 6], 1e-6);
    }

    #[test]
    fn layer_norm_two_point_row() {
        // x=[1,3]: mean 2, population std 1 → [-1, 1] as eps → 0
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1.0, 3.0], vec![1, 2]);
        let gamma = t.constant(vec![1.0; 2], vec![2]);
        let beta = t.constant(vec![0.0; 2], vec![2]);
        let y = t.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(t.data(y), &[-1.0, 1.0], 1e-9);
    }

    #[test]
    fn layer_norm_beta_dominates_when_gamma_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.3, -4.0, 7.5, 2.0], vec![2, 2]);
        let gamma = t.constant(vec![0.0; 2], vec![2]);
        let beta = t.constant(vec![5.0; 2], vec![2]);
        let y = t.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(t.data(y), &[5.0; 4], 0.0);
    }

    #[test]
    fn masked_l1_examples() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![1.0, 2.0], vec![2, 1]);
        let tgt = t.constant(vec![0.0, 0.0], vec![2, 1]);
        let l = t.masked_l1_loss(p, tgt, &[true, false]).unwrap();
        assert_eq!(t.scalar(l), 1.0);
        let l2 = t.masked_l1_loss(p, tgt, &[true, true]).unwrap();
        assert_eq!(t.scalar(l2), 1.5);
        let l3 = t.masked_l1_loss(p, p, &[true, true]).unwrap();
        assert_eq!(t.scalar(l3), 0.0);
        assert!(matches!(
            t.masked_l1_loss(p, tgt, &[false, false]),
            Err(TensorError::EmptySelection)
        ));
    }

    #[test]
    fn masked_l1_gradient_zero_at_unselected() {
        let mut t = Tape::<f32>::new();
        let p = t.param(&[1.0, -2.0, 3.0, 0.5], vec![4, 1]);
        let tgt = t.constant(vec![0.0; 4], vec![4, 1]);
        let l = t.masked_l1_loss(p, tgt, &[true, false, true, false]).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(p).unwrap();
        assert_eq!(g[1].to_bits(), 0.0f32.to_bits());
        assert_eq!(g[3].to_bits(), 0.0f32.to_bits());
        assert!((g[0] - 0.5).abs() < 1e-6);
        assert!((g[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(&[1.0, 2.0, 3.0], vec![3]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_close(t.grad(x).unwrap(), &[1.0, 1.0, 1.0], 0.0);
    }

    #[test]
    fn backward_square_at_three_gives_six() {
        let mut t = Tape::<f64>::new();
        let x = t.param(&[3.0], vec![1]);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_close(t.grad(x).unwrap(), &[6.0], 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.param(&[1.0, 2.0], vec![2]);
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
        let shifted: Vec<f64> = data.iter().map(|&v| v + 13.25).collect();
        let mut t = Tape::<f64>::new();
        let x = t.constant(data, vec![4, 5]);
        let xs = t.constant(shifted, vec![4, 5]);
        let y = t.softmax_rows(x).unwrap();
        let ys = t.softmax_rows(xs).unwrap();
        for r in 0..4 {
            let row = &t.data(y)[r * 5..(r + 1) * 5];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_close(t.data(ys), t.data(y), 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_invalid_columns() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1, 2, 3]);
        let y = t.masked_softmax(x, vec![2]).unwrap();
        let d = t.data(y);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let (batch, time, heads, dh) = (2, 3, 2, 2);
        let n = batch * time * heads * dh;
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut t = Tape::<f64>::new();
        let x = t.constant(data.clone(), vec![batch * time, heads * dh]);
        let s = t.split_heads(x, batch, time, heads).unwrap();
        assert_eq!(t.shape(s), &[batch * heads, time, dh]);
        let m = t.merge_heads(s, batch, heads).unwrap();
        assert_close(t.data(m), &data, 0.0);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut t = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.constant(vec![1.0, 2.0], vec![2]);
        let y = t.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = t.constant(vec![1.0; 1000], vec![1000]);
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        for &v in t.data(y) {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        let mean: f64 = t.data(y).iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        // logits [[0, ln3]] with label 1: p = [1/4, 3/4], loss = -ln(3/4)
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.0, 3.0f64.ln()], vec![1, 2]);
        let l = t.cross_entropy_mean(x, &[1], None).unwrap();
        assert!((t.scalar(l) + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_combine_uniform_is_mean() {
        let mut t = Tape::<f64>::new();
        let l0 = t.constant(vec![1.0, 2.0], vec![1, 2]);
        let l1 = t.constant(vec![3.0, 4.0], vec![1, 2]);
        let w = t.constant(vec![0.5, 0.5], vec![2]);
        let g = t.constant(vec![1.0], vec![1]);
        let y = t.weighted_combine(&[l0, l1], w, g).unwrap();
        assert_close(t.data(y), &[2.0, 3.0], 1e-12);
    }

    #[test]
    fn weighted_combine_zero_gamma_zero_output() {
        let mut t = Tape::<f64>::new();
        let l0 = t.constant(vec![7.0, -1.0], vec![2]);
        let w = t.constant(vec![1.0], vec![1]);
        let g = t.constant(vec![0.0], vec![1]);
        let y = t.weighted_combine(&[l0], w, g).unwrap();
        assert_close(t.data(y), &[0.0, 0.0], 0.0);
    }

    // Finite-difference oracle over a random 2-layer net; the oracle only
    // runs forward passes so it is independent of the backward rules.
    #[test]
    fn two_layer_net_gradcheck() {
        let (din, dhid, dout, rows) = (4, 5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_params = din * dhid + dhid + dhid * dout + dout;
        let theta: Vec<f64> = (0..n_params).map(|_| rng.random::<f64>() - 0.5).collect();
        let x_data: Vec<f64> = (0..rows * din).map(|_| rng.random::<f64>() - 0.5).collect();

        let forward = |theta: &[f64], tape: &mut Tape<f64>| -> (TensorId, [TensorId; 4]) {
            let mut off = 0;
            let mut takes = |n: usize| {
                let s = &theta[off..off + n];
                off += n;
                s.to_vec()
            };
            let w1v = takes(din * dhid);
            let b1v = takes(dhid);
            let w2v = takes(dhid * dout);
            let b2v = takes(dout);
            let w1 = tape.param(&w1v, vec![din, dhid]);
            let b1 = tape.param(&b1v, vec![dhid]);
            let w2 = tape.param(&w2v, vec![dhid, dout]);
            let b2 = tape.param(&b2v, vec![dout]);
            let x = tape.constant(x_data.clone(), vec![rows, din]);
            let h = tape.matmul(x, w1).unwrap();
            let h = tape.add_bias(h, b1).unwrap();
            let h = tape.gelu(h);
            let y = tape.matmul(h, w2).unwrap();
            let y = tape.add_bias(y, b2).unwrap();
            let y = tape.tanh(y);
            let loss = tape.sum(y);
            (loss, [w1, b1, w2, b2])
        };

        let mut tape = Tape::<f64>::new();
        let (loss, leaves) = forward(&theta, &mut tape);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for leaf in leaves {
            analytic.extend_from_slice(&tape.grad_or_zeros(leaf));
        }

        let numeric = gradcheck::finite_diff_grad(
            |th| {
                let mut t = Tape::<f64>::new();
                let (l, _) = forward(th, &mut t);
                t.scalar(l)
            },
            &theta,
            1e-5,
        );
        let err = gradcheck::max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn layer_norm_and_softmax_gradcheck() {
        let (rows, cols) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n_params = rows * cols + 2 * cols;
        let theta: Vec<f64> = (0..n_params).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        let forward = |theta: &[f64], tape: &mut Tape<f64>| -> (TensorId, [TensorId; 3]) {
            let x = tape.param(&theta[..rows * cols], vec![rows, cols]);
            let gamma = tape.param(&theta[rows * cols..rows * cols + cols], vec![cols]);
            let beta = tape.param(&theta[rows * cols + cols..], vec![cols]);
            let y = tape.layer_norm(x, gamma, beta, 1e-8).unwrap();
            let p = tape.softmax_rows(y).unwrap();
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.sum(sq);
            (loss, [x, gamma, beta])
        };

        let mut tape = Tape::<f64>::new();
        let (loss, leaves) = forward(&theta, &mut tape);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for leaf in leaves {
            analytic.extend_from_slice(&tape.grad_or_zeros(leaf));
        }
        let numeric = gradcheck::finite_diff_grad(
            |th| {
                let mut t = Tape::<f64>::new();
                let (l, _) = forward(th, &mut t);
                t.scalar(l)
            },
            &theta,
            1e-5,
        );
        let err = gradcheck::max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "max relative error {err}");
    }
}
