//! Dense f64 tensors and a per-forward-pass gradient tape.
//!
//! Tensors are immutable values: every operation allocates its output and
//! (when any input is tracked) records a node on the [`Tape`]. A tape is
//! created fresh for each forward pass; [`Tape::backward`] walks the nodes in
//! reverse, visiting each exactly once. All public operations reject
//! non-finite outputs so NaN/∞ can never propagate silently.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor. `node` is the handle into the tape that produced
/// it (None for constants and inference-mode values).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<usize>,
}

impl Tensor {
    /// Build a tensor from raw data, validating the shape/length contract and
    /// rejecting non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg(format!("zero-sized shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("from_vec"));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel].into(),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Handle into the gradient tape, when this value is tracked.
    pub fn grad_id(&self) -> Option<usize> {
        self.node
    }

    /// Row count under the 2-D interpretation (1-D tensors are single rows).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count under the 2-D interpretation.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, node: Option<usize>) -> Self {
        Tensor {
            shape,
            data: data.into(),
            node,
        }
    }
}

/// Boolean visibility mask for row-wise softmax (`true` = attend).
#[derive(Clone, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("mask", "data length != rows*cols"));
        }
        Ok(Mask { rows, cols, data })
    }

    /// Causal mask over a square sequence: position j attends to positions ≤ j.
    pub fn causal(len: usize) -> Self {
        let mut data = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                data[i * len + j] = true;
            }
        }
        Mask {
            rows: len,
            cols: len,
            data,
        }
    }

    /// Causal mask widened by `extra` always-visible trailing columns.
    pub fn causal_with_extra_cols(len: usize, extra: usize) -> Self {
        let cols = len + extra;
        let mut data = vec![false; len * cols];
        for i in 0..len {
            for j in 0..cols {
                data[i * cols + j] = j <= i || j >= len;
            }
        }
        Mask {
            rows: len,
            cols,
            data,
        }
    }

    pub fn visible(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Elementwise nonlinearity kinds. GELU uses the tanh approximation
/// 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))) in both forward and backward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Gelu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let c = (2.0 / PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative, given the input x and the already-computed output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let c = (2.0 / PI).sqrt();
                let inner = c * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Parent reference inside a tape node: where to send the gradient (if the
/// parent was tracked) plus the forward value backward needs.
#[derive(Clone)]
struct Arg {
    node: Option<usize>,
    value: Arc<[f64]>,
}

impl Arg {
    fn of(t: &Tensor) -> Self {
        Arg {
            node: t.node,
            value: Arc::clone(&t.data),
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Arg, b: Arg, m: usize, k: usize, n: usize },
    Transpose { a: Arg, rows: usize, cols: usize },
    Add { a: Arg, b: Arg },
    AddRow { m: Arg, v: Arg, rows: usize, cols: usize },
    Scale { a: Arg, c: f64 },
    Mul { a: Arg, b: Arg },
    ScaleRows { m: Arg, s: Arg, rows: usize, cols: usize },
    OuterAdd { col: Arg, row: Arg, rows: usize, cols: usize },
    Act { a: Arg, kind: Activation },
    SoftmaxRows { a: Arg, rows: usize, cols: usize, mask: Option<Mask> },
    LayerNorm { x: Arg, gain: Arg, bias: Arg, eps: f64, rows: usize, cols: usize },
    ConcatRows { parts: Vec<(Arg, usize)>, cols: usize },
    ConcatCols { parts: Vec<(Arg, usize)>, rows: usize },
    SliceRows { a: Arg, start: usize, parent_rows: usize, cols: usize },
    SliceCols { a: Arg, start: usize, parent_cols: usize, rows: usize, len: usize },
    GatherRows { table: Arg, ids: Vec<usize>, table_rows: usize, cols: usize },
    MeanRows { a: Arg, rows: usize, cols: usize },
    SumAll { a: Arg },
    Reshape { a: Arg },
    NllMean { probs: Arg, targets: Vec<usize>, active: Vec<bool>, cols: usize },
    BceMean { probs: Arg, labels: Vec<bool> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<[f64]>,
}

/// Per-forward-pass gradient tape. Operations append nodes in execution
/// order, so parents always precede children and one reverse sweep suffices.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    watched_params: HashMap<usize, usize>,
}

/// Gradients produced by [`Tape::backward`], addressed by tape node id.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked tensor, if it received one.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node?;
        self.by_node.get(id).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for a training forward pass.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            watched_params: HashMap::new(),
        }
    }

    /// A non-recording tape: same API, no nodes, no gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            watched_params: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an arbitrary tensor as a tracked leaf.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.clone();
        }
        let id = self.push_node(Op::Leaf, t.shape.clone(), Arc::clone(&t.data));
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(id),
        }
    }

    /// Fetch a parameter as a tracked leaf, memoized per tape so shared
    /// parameters accumulate gradients on a single node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let entry = store.entry(id);
        if !self.recording {
            return Tensor::raw(entry.shape.clone(), entry.data.clone(), None);
        }
        if let Some(&node) = self.watched_params.get(&id.0) {
            return Tensor {
                shape: entry.shape.clone(),
                data: Arc::clone(&self.nodes[node].value),
                node: Some(node),
            };
        }
        let value: Arc<[f64]> = entry.data.clone().into();
        let node = self.push_node(Op::Leaf, entry.shape.clone(), Arc::clone(&value));
        self.watched_params.insert(id.0, node);
        Tensor {
            shape: entry.shape.clone(),
            data: value,
            node: Some(node),
        }
    }

    fn push_node(&mut self, op: Op, shape: Vec<usize>, value: Arc<[f64]>) -> usize {
        self.nodes.push(Node { op, shape, value });
        self.nodes.len() - 1
    }

    /// Finalize an op: validate finiteness, record a node when tracked.
    fn emit(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        tracked: bool,
        op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let value: Arc<[f64]> = data.into();
        let node = if self.recording && tracked {
            Some(self.push_node(op(), shape.clone(), Arc::clone(&value)))
        } else {
            None
        };
        Ok(Tensor {
            shape,
            data: value,
            node,
        })
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = (a.rows(), a.cols());
        let (kb, n) = (b.rows(), b.cols());
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} @ {}x{}", m, ka, kb, n),
            ));
        }
        let data = matmul_raw(&a.data, &b.data, m, ka, n);
        let tracked = a.node.is_some() || b.node.is_some();
        self.emit("matmul", vec![m, n], data, tracked, || Op::MatMul {
            a: Arg::of(a),
            b: Arg::of(b),
            m,
            k: ka,
            n,
        })
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data[i * c + j];
            }
        }
        let tracked = a.node.is_some();
        self.emit("transpose", vec![c, r], data, tracked, || Op::Transpose {
            a: Arg::of(a),
            rows: r,
            cols: c,
        })
    }

    // ── Elementwise and broadcast ──────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let tracked = a.node.is_some() || b.node.is_some();
        self.emit("add", a.shape.clone(), data, tracked, || Op::Add {
            a: Arg::of(a),
            b: Arg::of(b),
        })
    }

    /// Add a length-`cols` vector to every row of `m`.
    pub fn add_row(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (m.rows(), m.cols());
        if v.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("matrix cols {} vs vector len {}", cols, v.numel()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m.data[r * cols + c] + v.data[c]);
            }
        }
        let tracked = m.node.is_some() || v.node.is_some();
        self.emit("add_row", m.shape.clone(), data, tracked, || Op::AddRow {
            m: Arg::of(m),
            v: Arg::of(v),
            rows,
            cols,
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data.iter().map(|x| x * c).collect();
        let tracked = a.node.is_some();
        self.emit("scale", a.shape.clone(), data, tracked, || Op::Scale {
            a: Arg::of(a),
            c,
        })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let data: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let tracked = a.node.is_some() || b.node.is_some();
        self.emit("mul", a.shape.clone(), data, tracked, || Op::Mul {
            a: Arg::of(a),
            b: Arg::of(b),
        })
    }

    /// Scale row i of `m` by scalar `s[i]`.
    pub fn scale_rows(&mut self, m: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (m.rows(), m.cols());
        if s.numel() != rows {
            return Err(Error::shape(
                "scale_rows",
                format!("matrix rows {} vs scale len {}", rows, s.numel()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m.data[r * cols + c] * s.data[r]);
            }
        }
        let tracked = m.node.is_some() || s.node.is_some();
        self.emit("scale_rows", m.shape.clone(), data, tracked, || {
            Op::ScaleRows {
                m: Arg::of(m),
                s: Arg::of(s),
                rows,
                cols,
            }
        })
    }

    /// out[i][j] = col[i] + row[j].
    pub fn outer_add(&mut self, col: &Tensor, row: &Tensor) -> Result<Tensor> {
        let rows = col.numel();
        let cols = row.numel();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(col.data[i] + row.data[j]);
            }
        }
        let tracked = col.node.is_some() || row.node.is_some();
        self.emit("outer_add", vec![rows, cols], data, tracked, || {
            Op::OuterAdd {
                col: Arg::of(col),
                row: Arg::of(row),
                rows,
                cols,
            }
        })
    }

    pub fn activation(&mut self, kind: Activation, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data.iter().map(|&x| kind.apply(x)).collect();
        let tracked = a.node.is_some();
        self.emit("activation", a.shape.clone(), data, tracked, || Op::Act {
            a: Arg::of(a),
            kind,
        })
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(Activation::Relu, a)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(Activation::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(Activation::Sigmoid, a)
    }

    // ── Normalization and softmax ──────────────────────────────────────

    /// Row-wise softmax with optional visibility mask. Masked entries are
    /// exactly 0 in the output; the row max is taken over visible entries
    /// only. A fully masked row is an error.
    pub fn softmax_rows(&mut self, a: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
        let (rows, cols) = (a.rows(), a.cols());
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::shape(
                    "softmax_rows",
                    format!(
                        "mask {}x{} vs tensor {}x{}",
                        m.rows(),
                        m.cols(),
                        rows,
                        cols
                    ),
                ));
            }
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a.data[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask.map_or(true, |m| m.visible(r, c)) && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow(r));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if mask.map_or(true, |m| m.visible(r, c)) {
                    let e = (row[c] - max).exp();
                    data[r * cols + c] = e;
                    sum += e;
                }
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let tracked = a.node.is_some();
        self.emit("softmax_rows", a.shape.clone(), data, tracked, || {
            Op::SoftmaxRows {
                a: Arg::of(a),
                rows,
                cols,
                mask: mask.cloned(),
            }
        })
    }

    /// Per-row standardization followed by an affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArg(format!("layer_norm eps {eps} must be > 0")));
        }
        let (rows, cols) = (x.rows(), x.cols());
        if gain.numel() != cols || bias.numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "feature dim {} vs gain {} / bias {}",
                    cols,
                    gain.numel(),
                    bias.numel()
                ),
            ));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv_std * gain.data[c] + bias.data[c];
            }
        }
        let tracked = x.node.is_some() || gain.node.is_some() || bias.node.is_some();
        self.emit("layer_norm", x.shape.clone(), data, tracked, || {
            Op::LayerNorm {
                x: Arg::of(x),
                gain: Arg::of(gain),
                bias: Arg::of(bias),
                eps,
                rows,
                cols,
            }
        })
    }

    // ── Structural ops ─────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_rows of zero parts".into()));
        }
        let cols = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {} vs {}", p.cols(), cols),
                ));
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let tracked = parts.iter().any(|p| p.node.is_some());
        self.emit("concat_rows", vec![rows, cols], data, tracked, || {
            Op::ConcatRows {
                parts: parts.iter().map(|p| (Arg::of(p), p.rows())).collect(),
                cols,
            }
        })
    }

    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of zero parts".into()));
        }
        let rows = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch {} vs {}", p.rows(), rows),
                ));
            }
            cols += p.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let pc = p.cols();
                data.extend_from_slice(&p.data[r * pc..(r + 1) * pc]);
            }
        }
        let tracked = parts.iter().any(|p| p.node.is_some());
        self.emit("concat_cols", vec![rows, cols], data, tracked, || {
            Op::ConcatCols {
                parts: parts.iter().map(|p| (Arg::of(p), p.cols())).collect(),
                rows,
            }
        })
    }

    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = (a.rows(), a.cols());
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + len, rows),
            ));
        }
        let data = a.data[start * cols..(start + len) * cols].to_vec();
        let tracked = a.node.is_some();
        self.emit("slice_rows", vec![len, cols], data, tracked, || {
            Op::SliceRows {
                a: Arg::of(a),
                start,
                parent_rows: rows,
                cols,
            }
        })
    }

    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = (a.rows(), a.cols());
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, cols),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * cols + start..r * cols + start + len]);
        }
        let tracked = a.node.is_some();
        self.emit("slice_cols", vec![rows, len], data, tracked, || {
            Op::SliceCols {
                a: Arg::of(a),
                start,
                parent_cols: cols,
                rows,
                len,
            }
        })
    }

    /// Row lookup (embedding): out[i] = table[ids[i]].
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (rows, cols) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownTokenId(id, rows));
            }
            data.extend_from_slice(&table.data[id * cols..(id + 1) * cols]);
        }
        let tracked = table.node.is_some();
        self.emit("gather_rows", vec![ids.len(), cols], data, tracked, || {
            Op::GatherRows {
                table: Arg::of(table),
                ids: ids.to_vec(),
                table_rows: rows,
                cols,
            }
        })
    }

    /// Mean over rows, yielding a single row.
    pub fn mean_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (a.rows(), a.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += a.data[r * cols + c];
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        let tracked = a.node.is_some();
        self.emit("mean_rows", vec![1, cols], data, tracked, || Op::MeanRows {
            a: Arg::of(a),
            rows,
            cols,
        })
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data.iter().sum();
        let tracked = a.node.is_some();
        self.emit("sum_all", vec![1], vec![s], tracked, || Op::SumAll {
            a: Arg::of(a),
        })
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", a.shape, shape),
            ));
        }
        let data = a.data.to_vec();
        let tracked = a.node.is_some();
        self.emit("reshape", shape, data, tracked, || Op::Reshape {
            a: Arg::of(a),
        })
    }

    // ── Losses ─────────────────────────────────────────────────────────

    /// Mean negative log-probability of `targets[i]` under row i of `probs`,
    /// averaged over positions where `active[i]`. Probabilities are floored
    /// at 1e-300 before the log so a denormal row entry cannot produce ∞.
    pub fn nll_mean(&mut self, probs: &Tensor, targets: &[usize], active: &[bool]) -> Result<Tensor> {
        let (rows, cols) = (probs.rows(), probs.cols());
        if targets.len() != rows || active.len() != rows {
            return Err(Error::shape(
                "nll_mean",
                format!("{} rows vs {} targets", rows, targets.len()),
            ));
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(Error::InvalidArg(
                "nll_mean: no active target positions".into(),
            ));
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            if targets[r] >= cols {
                return Err(Error::UnknownTokenId(targets[r], cols));
            }
            total -= probs.data[r * cols + targets[r]].max(1e-300).ln();
        }
        let loss = total / n_active as f64;
        let tracked = probs.node.is_some();
        self.emit("nll_mean", vec![1], vec![loss], tracked, || Op::NllMean {
            probs: Arg::of(probs),
            targets: targets.to_vec(),
            active: active.to_vec(),
            cols,
        })
    }

    /// Mean binary cross-entropy of probabilities against boolean labels.
    /// Probabilities are clamped to [1e-12, 1−1e-12] so saturated sigmoids
    /// cannot produce ∞.
    pub fn bce_mean(&mut self, probs: &Tensor, labels: &[bool]) -> Result<Tensor> {
        if probs.numel() != labels.len() {
            return Err(Error::shape(
                "bce_mean",
                format!("{} probs vs {} labels", probs.numel(), labels.len()),
            ));
        }
        let mut total = 0.0;
        for (p, &y) in probs.data.iter().zip(labels.iter()) {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            total -= if y { p.ln() } else { (1.0 - p).ln() };
        }
        let loss = total / labels.len() as f64;
        let tracked = probs.node.is_some();
        self.emit("bce_mean", vec![1], vec![loss], tracked, || Op::BceMean {
            probs: Arg::of(probs),
            labels: labels.to_vec(),
        })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients; query
    /// them through [`Gradients::wrt`] or [`Tape::store_gradients`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_node = loss.node.ok_or(Error::NotOnTape)?;
        if loss_node >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        if loss.numel() != 1 {
            return Err(Error::NotScalar);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for id in (0..=loss_node).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients for every parameter of `store` in registration order;
    /// parameters the loss never touched get zeros.
    pub fn store_gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| {
                let entry = store.entry(id);
                match self
                    .watched_params
                    .get(&id.0)
                    .and_then(|&n| grads.by_node[n].clone())
                {
                    Some(g) => g,
                    None => vec![0.0; entry.data.len()],
                }
            })
            .collect()
    }

    fn propagate(&self, id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |arg: &Arg, contribution: Vec<f64>| {
            if let Some(p) = arg.node {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution.iter()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
        };

        match &node.op {
            Op::Leaf => {}

            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if a.node.is_some() {
                    // dA = dC @ Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            if g != 0.0 {
                                let brow_t = &b.value[j..];
                                let da_row = &mut da[i * k..(i + 1) * k];
                                for p in 0..k {
                                    da_row[p] += g * brow_t[p * n];
                                }
                            }
                        }
                    }
                    send(a, da);
                }
                if b.node.is_some() {
                    // dB = Aᵀ @ dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let a_row = &a.value[i * k..(i + 1) * k];
                        let g_row = &grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a_row[p];
                            if av != 0.0 {
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    db_row[j] += av * g_row[j];
                                }
                            }
                        }
                    }
                    send(b, db);
                }
            }

            Op::Transpose { a, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        da[i * cols + j] = grad[j * rows + i];
                    }
                }
                send(a, da);
            }

            Op::Add { a, b } => {
                send(a, grad.to_vec());
                send(b, grad.to_vec());
            }

            Op::AddRow { m, v, rows, cols } => {
                send(m, grad.to_vec());
                if v.node.is_some() {
                    let mut dv = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dv[c] += grad[r * cols + c];
                        }
                    }
                    send(v, dv);
                }
            }

            Op::Scale { a, c } => {
                send(a, grad.iter().map(|g| g * c).collect());
            }

            Op::Mul { a, b } => {
                if a.node.is_some() {
                    send(a, grad.iter().zip(b.value.iter()).map(|(g, y)| g * y).collect());
                }
                if b.node.is_some() {
                    send(b, grad.iter().zip(a.value.iter()).map(|(g, x)| g * x).collect());
                }
            }

            Op::ScaleRows { m, s, rows, cols } => {
                if m.node.is_some() {
                    let mut dm = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dm[r * cols + c] = grad[r * cols + c] * s.value[r];
                        }
                    }
                    send(m, dm);
                }
                if s.node.is_some() {
                    let mut ds = vec![0.0; *rows];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ds[r] += grad[r * cols + c] * m.value[r * cols + c];
                        }
                    }
                    send(s, ds);
                }
            }

            Op::OuterAdd { col, row, rows, cols } => {
                if col.node.is_some() {
                    let mut dc = vec![0.0; *rows];
                    for i in 0..*rows {
                        for j in 0..*cols {
                            dc[i] += grad[i * cols + j];
                        }
                    }
                    send(col, dc);
                }
                if row.node.is_some() {
                    let mut dr = vec![0.0; *cols];
                    for i in 0..*rows {
                        for j in 0..*cols {
                            dr[j] += grad[i * cols + j];
                        }
                    }
                    send(row, dr);
                }
            }

            Op::Act { a, kind } => {
                let da = grad
                    .iter()
                    .zip(a.value.iter().zip(node.value.iter()))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                send(a, da);
            }

            Op::SoftmaxRows { a, rows, cols, .. } => {
                // ds_i = s_i (g_i − Σ_j g_j s_j); masked entries have s=0.
                let s = &node.value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let off = r * cols;
                    let mut dot = 0.0;
                    for c in 0..*cols {
                        dot += grad[off + c] * s[off + c];
                    }
                    for c in 0..*cols {
                        da[off + c] = s[off + c] * (grad[off + c] - dot);
                    }
                }
                send(a, da);
            }

            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                rows,
                cols,
            } => {
                let d = *cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; *cols];
                let mut dbias = vec![0.0; *cols];
                for r in 0..*rows {
                    let off = r * cols;
                    let xr = &x.value[off..off + cols];
                    let gr = &grad[off..off + cols];
                    let mean = xr.iter().sum::<f64>() / d;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; *cols];
                    for c in 0..*cols {
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gain.value[c];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..*cols {
                        dx[off + c] =
                            inv_std / d * (d * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                    }
                }
                send(x, dx);
                send(gain, dgain);
                send(bias, dbias);
            }

            Op::ConcatRows { parts, cols } => {
                let mut offset = 0;
                for (arg, rows) in parts {
                    let chunk = grad[offset..offset + rows * cols].to_vec();
                    send(arg, chunk);
                    offset += rows * cols;
                }
            }

            Op::ConcatCols { parts, rows } => {
                let total_cols: usize = parts.iter().map(|(_, c)| c).sum();
                let mut col_off = 0;
                for (arg, pcols) in parts {
                    if arg.node.is_some() {
                        let mut chunk = Vec::with_capacity(rows * pcols);
                        for r in 0..*rows {
                            chunk.extend_from_slice(
                                &grad[r * total_cols + col_off..r * total_cols + col_off + pcols],
                            );
                        }
                        send(arg, chunk);
                    }
                    col_off += pcols;
                }
            }

            Op::SliceRows {
                a,
                start,
                parent_rows,
                cols,
            } => {
                let mut da = vec![0.0; parent_rows * cols];
                da[start * cols..start * cols + grad.len()].copy_from_slice(grad);
                send(a, da);
            }

            Op::SliceCols {
                a,
                start,
                parent_cols,
                rows,
                len,
            } => {
                let mut da = vec![0.0; rows * parent_cols];
                for r in 0..*rows {
                    for c in 0..*len {
                        da[r * parent_cols + start + c] = grad[r * len + c];
                    }
                }
                send(a, da);
            }

            Op::GatherRows {
                table,
                ids,
                table_rows,
                cols,
            } => {
                let mut dt = vec![0.0; table_rows * cols];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..*cols {
                        dt[id * cols + c] += grad[i * cols + c];
                    }
                }
                send(table, dt);
            }

            Op::MeanRows { a, rows, cols } => {
                let scale = 1.0 / *rows as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = grad[c] * scale;
                    }
                }
                send(a, da);
            }

            Op::SumAll { a } => {
                send(a, vec![grad[0]; a.value.len()]);
            }

            Op::Reshape { a } => {
                send(a, grad.to_vec());
            }

            Op::NllMean {
                probs,
                targets,
                active,
                cols,
            } => {
                let n_active = active.iter().filter(|&&a| a).count() as f64;
                let mut dp = vec![0.0; probs.value.len()];
                for (r, (&t, &act)) in targets.iter().zip(active.iter()).enumerate() {
                    if act {
                        let p = probs.value[r * cols + t].max(1e-300);
                        dp[r * cols + t] = -grad[0] / (n_active * p);
                    }
                }
                send(probs, dp);
            }

            Op::BceMean { probs, labels } => {
                let n = labels.len() as f64;
                let dp = probs
                    .value
                    .iter()
                    .zip(labels.iter())
                    .map(|(p, &y)| {
                        let p = p.clamp(1e-12, 1.0 - 1e-12);
                        let d = if y { -1.0 / p } else { 1.0 / (1.0 - p) };
                        grad[0] * d / n
                    })
                    .collect();
                send(probs, dp);
            }
        }
    }
}

/// Row-major matmul with an i-p-j loop order: the inner loop walks both the
/// output row and a B row sequentially, and the per-element accumulation
/// order over p is fixed regardless of how callers batch their rows.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

// ── Parameter store ────────────────────────────────────────────────────

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named map of every trainable tensor in a model, with deterministic
/// registration order. Names are unique.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            data: t.data.to_vec(),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::raw(e.shape.clone(), e.data.clone(), None)
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    /// (name, shape, values) triples in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice(), e.data.as_slice()))
    }
}

// ── Initialization helpers ─────────────────────────────────────────────

/// Uniform(-1, 1) scaled by the Xavier bound √(6/(fan_in+fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (uniform01(rng) * 2.0 - 1.0) * bound)
        .collect();
    Tensor::raw(vec![rows, cols], data, None)
}

/// Normal(0, sigma²) entries via Box–Muller.
pub fn scaled_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal01(rng) * sigma).collect();
    Tensor::raw(shape, data, None)
}

/// Uniform in [0, 1) from 53 random bits.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box–Muller (deterministic given the rng stream).
pub fn normal01(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = uniform01(rng).max(1e-300);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

// ── Gradient checking ──────────────────────────────────────────────────

/// Compare the tape gradient of a deterministic scalar function against
/// central finite differences over every parameter coordinate. Returns the
/// maximum relative error, with the denominator floored at 1 so near-zero
/// gradients are compared absolutely.
pub fn grad_check<F>(f: F, params: &mut ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidArg(format!(
            "grad_check step {step} outside (0, 1e-2]"
        )));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    let grads = tape.backward(&loss)?;
    let analytic = tape.store_gradients(params, &grads);

    let mut max_err: f64 = 0.0;
    for id in params.ids().collect::<Vec<_>>() {
        for i in 0..params.values(id).len() {
            let orig = params.values(id)[i];
            params.values_mut(id)[i] = orig + step;
            let up = f(&mut Tape::inference(), params)?.item();
            params.values_mut(id)[i] = orig - step;
            let down = f(&mut Tape::inference(), params)?.item();
            params.values_mut(id)[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            let fd = (up - down) / (2.0 * step);
            let g = analytic[id.0][i];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
