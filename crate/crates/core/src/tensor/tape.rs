//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Each op computes its value eagerly and, when any input requires a
//! gradient, appends a node. Nodes are appended in execution order, so the
//! tape is topologically ordered by construction and a single reverse sweep
//! in [`Tape::backward`] visits every node exactly once.

use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct Entry<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

enum Op<S: Scalar> {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { a: usize, k: S },
    AddBias { a: usize, bias: usize },
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, inv_std: Vec<S>, xhat: Vec<S> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Sum { x: usize },
    Reshape { x: usize },
    SelectRows { x: usize, indices: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    BroadcastRows { row: usize, n: usize },
    ScatterRows { base: usize, rows: usize, indices: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    Upsample2x { x: usize },
    AvgPool2x2 { x: usize },
    Bilinear { feat: usize, points: usize },
}

struct Node<S: Scalar> {
    out: usize,
    op: Op<S>,
}

/// Single-owner computation tape. Build leaves with [`Tape::param`] /
/// [`Tape::constant`], chain ops, then call [`Tape::backward`] once.
pub struct Tape<S: Scalar> {
    entries: Vec<Entry<S>>,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), nodes: Vec::new(), consumed: false }
    }

    /// Watch a tensor as a differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_entry(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.entries[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.id].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] target w.r.t. `v`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let e = &self.entries[v.id];
        e.grad.as_ref().map(|g| {
            Tensor::new(e.value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push_entry(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let id = self.entries.len();
        self.entries.push(Entry { value, requires_grad, grad: None });
        Var { id }
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, any_grad: bool) -> Var {
        let out = self.push_entry(value, any_grad);
        if any_grad {
            self.nodes.push(Node { out: out.id, op });
        }
        out
    }

    fn val(&self, id: usize) -> &Tensor<S> {
        &self.entries[id].value
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.id), self.val(b.id));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let any = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push_op(value, op, any))
    }

    /// Elementwise `k*x + c`.
    pub fn affine(&mut self, x: Var, k: S, c: S) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let data = t.data().iter().map(|v| k * *v + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::Affine { a: x.id, k }, any))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Result<Var, TensorError> {
        self.affine(x, k, S::zero())
    }

    /// Broadcast `bias` (shape `[d]`) over the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.val(x.id), self.val(bias.id));
        let d = *tx.shape().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.shape()[0] != d || d == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + tb.data()[i % d];
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let any = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push_op(value, Op::AddBias { a: x.id, bias: bias.id }, any))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(S::zero()), Op::Relu { x: x.id })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x: x.id })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.abs(), Op::Abs { x: x.id })
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, op, any))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let total = t.data().iter().copied().sum();
        let any = self.requires_grad(x);
        Ok(self.push_op(Tensor::scalar(total), Op::Sum { x: x.id }, any))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.val(x.id).len();
        let s = self.sum(x)?;
        self.scale(s, S::of(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.val(x.id).clone().reshaped(shape)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::Reshape { x: x.id }, any))
    }

    // ---- linear algebra --------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.id), self.val(b.id));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let any = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push_op(value, Op::Matmul { a: a.id, b: b.id }, any))
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.id), self.val(b.id));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let data = matmul_nt_kernel(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let any = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push_op(value, Op::MatmulNT { a: a.id, b: b.id }, any))
    }

    // ---- normalization ---------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (outer, len, inner) = lane_dims(t.shape(), axis)?;
        let mut data = t.data().to_vec();
        for (o, i) in lane_iter(outer, inner) {
            softmax_lane(&mut data, o * len * inner + i, len, inner);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::Softmax { x: x.id, axis }, any))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (outer, len, inner) = lane_dims(t.shape(), axis)?;
        let mut data = t.data().to_vec();
        for (o, i) in lane_iter(outer, inner) {
            log_softmax_lane(&mut data, o * len * inner + i, len, inner);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::LogSoftmax { x: x.id, axis }, any))
    }

    /// Normalize the trailing axis to zero mean / unit variance, then apply
    /// the affine `gain`/`bias` (both shape `[d]`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.val(x.id), self.val(gain.id), self.val(bias.id));
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![S::zero(); tx.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.len()];
        let inv_d = S::of(1.0 / d as f64);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<S>()
                * inv_d;
            let istd = S::one() / (var + S::of(eps)).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let any = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push_op(
            value,
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, inv_std, xhat },
            any,
        ))
    }

    // ---- row/column shuffling -------------------------------------------

    /// Gather rows of a `[n×c]` tensor; duplicate indices are allowed.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (n, c) = as_matrix(t, "select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(TensorError::Contract(format!(
                    "select_rows index {i} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(
            value,
            Op::SelectRows { x: x.id, indices: indices.to_vec() },
            any,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero parts".into()));
        }
        let c = as_matrix(self.val(parts[0].id), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(p.id);
            let (r, pc) = as_matrix(t, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let any = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push_op(
            value,
            Op::ConcatRows { parts: parts.iter().map(|p| p.id).collect() },
            any,
        ))
    }

    /// Repeat a `[1×d]` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var, TensorError> {
        let t = self.val(row.id);
        let (r, d) = as_matrix(t, "broadcast_rows")?;
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, d],
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![n, d], data)?;
        let any = self.requires_grad(row);
        Ok(self.push_op(value, Op::BroadcastRows { row: row.id, n }, any))
    }

    /// Overwrite `base` rows at `indices` (unique) with the rows of `rows`.
    pub fn scatter_rows(
        &mut self,
        base: Var,
        rows: Var,
        indices: &[usize],
    ) -> Result<Var, TensorError> {
        let (tb, tr) = (self.val(base.id), self.val(rows.id));
        let (n, c) = as_matrix(tb, "scatter_rows")?;
        let (m, rc) = as_matrix(tr, "scatter_rows")?;
        if rc != c || m != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: tb.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut seen = vec![false; n];
        let mut data = tb.data().to_vec();
        for (r, &i) in indices.iter().enumerate() {
            if i >= n || seen[i] {
                return Err(TensorError::Contract(format!(
                    "scatter_rows index {i} out of range or duplicated"
                )));
            }
            seen[i] = true;
            data[i * c..(i + 1) * c].copy_from_slice(&tr.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![n, c], data)?;
        let any = self.requires_grad(base) || self.requires_grad(rows);
        Ok(self.push_op(
            value,
            Op::ScatterRows { base: base.id, rows: rows.id, indices: indices.to_vec() },
            any,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (n, c) = as_matrix(t, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(TensorError::Contract(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {c} columns"
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::SliceCols { x: x.id, start, len }, any))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let n = as_matrix(self.val(parts[0].id), "concat_cols")?.0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| as_matrix(self.val(p.id), "concat_cols").map(|(_, c)| c))
            .collect::<Result<_, _>>()?;
        for p in parts {
            if as_matrix(self.val(p.id), "concat_cols")?.0 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: self.val(p.id).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                let t = self.val(p.id);
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        let any = parts.iter().any(|p| self.requires_grad(*p));
        Ok(self.push_op(
            value,
            Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect() },
            any,
        ))
    }

    // ---- spatial ---------------------------------------------------------

    /// Nearest-neighbor 2× upsample of an `[h×w×c]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (h, w, c) = as_map(t, "upsample2x")?;
        let mut data = vec![S::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                data[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
        let value = Tensor::new(vec![2 * h, 2 * w, c], data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::Upsample2x { x: x.id }, any))
    }

    /// 2×2 average pool of an `[h×w×c]` map; h and w must be even.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.val(x.id);
        let (h, w, c) = as_map(t, "avgpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Contract(format!(
                "avgpool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::of(0.25);
        let mut data = vec![S::zero(); oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut acc = S::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + t.data()[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                        }
                    }
                    data[(y * ow + xx) * c + ch] = acc * quarter;
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], data)?;
        let any = self.requires_grad(x);
        Ok(self.push_op(value, Op::AvgPool2x2 { x: x.id }, any))
    }

    /// Bilinear interpolation of `feat[h×w×c]` at `points[n×2]` (x, y) in
    /// [0,1]²; out-of-range coordinates are clamped. Cell centers sit at
    /// `i/(w-1)` so a point exactly on a center returns that cell.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Result<Var, TensorError> {
        let (tf, tp) = (self.val(feat.id), self.val(points.id));
        let (h, w, c) = as_map(tf, "bilinear_sample")?;
        if h == 0 || w == 0 || c == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: tf.shape().to_vec(),
                rhs: tp.shape().to_vec(),
            });
        }
        let (n, two) = as_matrix(tp, "bilinear_sample")?;
        if two != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: tf.shape().to_vec(),
                rhs: tp.shape().to_vec(),
            });
        }
        let mut data = vec![S::zero(); n * c];
        for p in 0..n {
            let g = SampleGeom::at(tp.data()[2 * p], tp.data()[2 * p + 1], h, w);
            for ch in 0..c {
                data[p * c + ch] = g.interpolate(tf.data(), w, c, ch);
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        let any = self.requires_grad(feat) || self.requires_grad(points);
        Ok(self.push_op(value, Op::Bilinear { feat: feat.id, points: points.id }, any))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss; populates gradients for every
    /// watched leaf that the loss depends on and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.val(loss.id).shape() != [1] {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                self.val(loss.id).shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.consumed = true;

        let n = self.entries.len();
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(vec![S::one()]);

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            let gout = match &grads[node.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(node, &gout, &mut grads);
        }

        for (entry, g) in self.entries.iter_mut().zip(grads) {
            if entry.requires_grad {
                if let Some(g) = g {
                    entry.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Add { a, b } => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -*v));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, g.iter().zip(tb).map(|(g, y)| *g * *y));
                self.acc(grads, *b, g.iter().zip(ta).map(|(g, x)| *g * *x));
            }
            Op::Affine { a, k } => {
                let k = *k;
                self.acc(grads, *a, g.iter().map(move |v| *v * k));
            }
            Op::AddBias { a, bias } => {
                self.acc(grads, *a, g.iter().copied());
                let d = self.val(*bias).len();
                let mut gb = vec![S::zero(); d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] = gb[i % d] + *v;
                }
                self.acc(grads, *bias, gb.into_iter());
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.entries[*a].requires_grad {
                    let da = matmul_nt_kernel(g, tb.data(), m, nn, k);
                    self.acc(grads, *a, da.into_iter());
                }
                if self.entries[*b].requires_grad {
                    let db = matmul_tn_kernel(ta.data(), g, m, k, nn);
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::MatmulNT { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.entries[*a].requires_grad {
                    let da = matmul_kernel(g, tb.data(), m, nn, k);
                    self.acc(grads, *a, da.into_iter());
                }
                if self.entries[*b].requires_grad {
                    let db = matmul_tn_kernel(g, ta.data(), m, nn, k);
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::Softmax { x, axis } => {
                let out = self.val(node.out);
                let (outer, len, inner) = lane_dims(out.shape(), *axis).expect("recorded axis");
                let s = out.data();
                let mut gx = vec![S::zero(); s.len()];
                for (o, i) in lane_iter(outer, inner) {
                    let base = o * len * inner + i;
                    let mut dot = S::zero();
                    for k in 0..len {
                        let idx = base + k * inner;
                        dot = dot + g[idx] * s[idx];
                    }
                    for k in 0..len {
                        let idx = base + k * inner;
                        gx[idx] = s[idx] * (g[idx] - dot);
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::LogSoftmax { x, axis } => {
                let out = self.val(node.out);
                let (outer, len, inner) = lane_dims(out.shape(), *axis).expect("recorded axis");
                let ls = out.data();
                let mut gx = vec![S::zero(); ls.len()];
                for (o, i) in lane_iter(outer, inner) {
                    let base = o * len * inner + i;
                    let mut gsum = S::zero();
                    for k in 0..len {
                        gsum = gsum + g[base + k * inner];
                    }
                    for k in 0..len {
                        let idx = base + k * inner;
                        gx[idx] = g[idx] - ls[idx].exp() * gsum;
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::LayerNorm { x, gain, bias, inv_std, xhat } => {
                let tg = self.val(*gain).data();
                let d = tg.len();
                let rows = xhat.len() / d;
                let inv_d = S::of(1.0 / d as f64);
                if self.entries[*x].requires_grad {
                    let mut gx = vec![S::zero(); xhat.len()];
                    for r in 0..rows {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * tg[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * tg[j];
                            gx[r * d + j] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, gx.into_iter());
                }
                if self.entries[*gain].requires_grad {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.acc(grads, *gain, gg.into_iter());
                }
                if self.entries[*bias].requires_grad {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                    self.acc(grads, *bias, gb.into_iter());
                }
            }
            Op::Relu { x } => {
                let tx = self.val(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(tx)
                        .map(|(g, v)| if *v > S::zero() { *g } else { S::zero() }),
                );
            }
            Op::Sigmoid { x } => {
                let s = self.val(node.out).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(s).map(|(g, s)| *g * *s * (S::one() - *s)),
                );
            }
            Op::Abs { x } => {
                let tx = self.val(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(tx).map(|(g, v)| {
                        if *v > S::zero() {
                            *g
                        } else if *v < S::zero() {
                            -*g
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
            Op::Sum { x } => {
                let n = self.val(*x).len();
                let gs = g[0];
                self.acc(grads, *x, std::iter::repeat(gs).take(n));
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, g.iter().copied());
            }
            Op::SelectRows { x, indices } => {
                let c = self.val(node.out).shape()[1];
                let n = self.val(*x).len();
                let mut gx = vec![S::zero(); n];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[r * c + j];
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.entries[p].requires_grad {
                        self.acc(grads, p, g[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::BroadcastRows { row, n } => {
                let d = self.val(*row).len();
                let mut gr = vec![S::zero(); d];
                for r in 0..*n {
                    for j in 0..d {
                        gr[j] = gr[j] + g[r * d + j];
                    }
                }
                self.acc(grads, *row, gr.into_iter());
            }
            Op::ScatterRows { base, rows, indices } => {
                let c = self.val(node.out).shape()[1];
                if self.entries[*rows].requires_grad {
                    let mut gr = vec![S::zero(); indices.len() * c];
                    for (r, &i) in indices.iter().enumerate() {
                        gr[r * c..(r + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    self.acc(grads, *rows, gr.into_iter());
                }
                if self.entries[*base].requires_grad {
                    let mut gb = g.to_vec();
                    for &i in indices {
                        for j in 0..c {
                            gb[i * c + j] = S::zero();
                        }
                    }
                    self.acc(grads, *base, gb.into_iter());
                }
            }
            Op::SliceCols { x, start, len } => {
                let t = self.val(*x);
                let (n, c) = (t.shape()[0], t.shape()[1]);
                let mut gx = vec![S::zero(); n * c];
                for r in 0..n {
                    for j in 0..*len {
                        gx[r * c + start + j] = g[r * len + j];
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::ConcatCols { parts } => {
                let n = self.val(node.out).shape()[0];
                let total = self.val(node.out).shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    if self.entries[p].requires_grad {
                        let mut gp = vec![S::zero(); n * w];
                        for r in 0..n {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, gp.into_iter());
                    }
                    offset += w;
                }
            }
            Op::Upsample2x { x } => {
                let t = self.val(*x);
                let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut gx = vec![S::zero(); h * w * c];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((y / 2) * w + xx / 2) * c;
                        let dst = (y * 2 * w + xx) * c;
                        for ch in 0..c {
                            gx[src + ch] = gx[src + ch] + g[dst + ch];
                        }
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::AvgPool2x2 { x } => {
                let t = self.val(*x);
                let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let (ow, quarter) = (w / 2, S::of(0.25));
                let mut gx = vec![S::zero(); h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            gx[(y * w + xx) * c + ch] =
                                g[((y / 2) * ow + xx / 2) * c + ch] * quarter;
                        }
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::Bilinear { feat, points } => {
                let tf = self.val(*feat);
                let tp = self.val(*points);
                let (h, w, c) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
                let n = tp.shape()[0];
                let feat_grad = self.entries[*feat].requires_grad;
                let point_grad = self.entries[*points].requires_grad;
                let mut gf = vec![S::zero(); h * w * c];
                let mut gp = vec![S::zero(); n * 2];
                for p in 0..n {
                    let geom = SampleGeom::at(tp.data()[2 * p], tp.data()[2 * p + 1], h, w);
                    for ch in 0..c {
                        let go = g[p * c + ch];
                        if feat_grad {
                            geom.scatter(&mut gf, w, c, ch, go);
                        }
                        if point_grad {
                            let (dx, dy) = geom.point_derivative(tf.data(), w, c, ch);
                            gp[2 * p] = gp[2 * p] + go * dx;
                            gp[2 * p + 1] = gp[2 * p + 1] + go * dy;
                        }
                    }
                }
                if feat_grad {
                    self.acc(grads, *feat, gf.into_iter());
                }
                if point_grad {
                    self.acc(grads, *points, gp.into_iter());
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], id: usize, contrib: impl Iterator<Item = S>) {
        if !self.entries[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(buf) => {
                for (slot, v) in buf.iter_mut().zip(contrib) {
                    *slot = *slot + v;
                }
            }
            slot @ None => {
                *slot = Some(contrib.collect());
            }
        }
    }
}

// ---- geometry of one bilinear lookup in a clamped unit square -------------

struct SampleGeom<S: Scalar> {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    ax: S, // frac along columns
    ay: S, // frac along rows
    dudx: S,
    dvdy: S,
}

impl<S: Scalar> SampleGeom<S> {
    fn at(x: S, y: S, h: usize, w: usize) -> Self {
        let inside_x = x >= S::zero() && x <= S::one();
        let inside_y = y >= S::zero() && y <= S::one();
        let cx = x.max(S::zero()).min(S::one());
        let cy = y.max(S::zero()).min(S::one());
        let sx = S::of((w - 1) as f64);
        let sy = S::of((h - 1) as f64);
        let u = cx * sx;
        let v = cy * sy;
        let i0 = u.floor().as_f64() as usize;
        let j0 = v.floor().as_f64() as usize;
        let i0 = i0.min(w - 1);
        let j0 = j0.min(h - 1);
        let i1 = (i0 + 1).min(w - 1);
        let j1 = (j0 + 1).min(h - 1);
        SampleGeom {
            i0,
            i1,
            j0,
            j1,
            ax: u - S::of(i0 as f64),
            ay: v - S::of(j0 as f64),
            dudx: if inside_x { sx } else { S::zero() },
            dvdy: if inside_y { sy } else { S::zero() },
        }
    }

    #[inline]
    fn corners(&self, feat: &[S], w: usize, c: usize, ch: usize) -> (S, S, S, S) {
        let f = |j: usize, i: usize| feat[(j * w + i) * c + ch];
        (
            f(self.j0, self.i0),
            f(self.j0, self.i1),
            f(self.j1, self.i0),
            f(self.j1, self.i1),
        )
    }

    fn interpolate(&self, feat: &[S], w: usize, c: usize, ch: usize) -> S {
        let (f00, f01, f10, f11) = self.corners(feat, w, c, ch);
        let one = S::one();
        (one - self.ay) * ((one - self.ax) * f00 + self.ax * f01)
            + self.ay * ((one - self.ax) * f10 + self.ax * f11)
    }

    fn scatter(&self, gf: &mut [S], w: usize, c: usize, ch: usize, g: S) {
        let one = S::one();
        let mut add = |j: usize, i: usize, wgt: S| {
            let idx = (j * w + i) * c + ch;
            gf[idx] = gf[idx] + g * wgt;
        };
        add(self.j0, self.i0, (one - self.ay) * (one - self.ax));
        add(self.j0, self.i1, (one - self.ay) * self.ax);
        add(self.j1, self.i0, self.ay * (one - self.ax));
        add(self.j1, self.i1, self.ay * self.ax);
    }

    fn point_derivative(&self, feat: &[S], w: usize, c: usize, ch: usize) -> (S, S) {
        let (f00, f01, f10, f11) = self.corners(feat, w, c, ch);
        let one = S::one();
        let du = (one - self.ay) * (f01 - f00) + self.ay * (f11 - f10);
        let dv = (one - self.ax) * (f10 - f00) + self.ax * (f11 - f01);
        (du * self.dudx, dv * self.dvdy)
    }
}

// ---- kernels --------------------------------------------------------------

fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * *bj;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
fn matmul_nt_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc = acc + *x * *y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×n]`.
fn matmul_tn_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * *bj;
            }
        }
    }
    c
}

fn as_matrix<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn as_map<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

fn lane_iter(outer: usize, inner: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o, i)))
}

fn softmax_lane<S: Scalar>(data: &mut [S], base: usize, len: usize, stride: usize) {
    let mut mx = data[base];
    for k in 1..len {
        mx = mx.max(data[base + k * stride]);
    }
    let mut total = S::zero();
    for k in 0..len {
        let e = (data[base + k * stride] - mx).exp();
        data[base + k * stride] = e;
        total = total + e;
    }
    for k in 0..len {
        data[base + k * stride] = data[base + k * stride] / total;
    }
}

fn log_softmax_lane<S: Scalar>(data: &mut [S], base: usize, len: usize, stride: usize) {
    let mut mx = data[base];
    for k in 1..len {
        mx = mx.max(data[base + k * stride]);
    }
    let mut total = S::zero();
    for k in 0..len {
        total = total + (data[base + k * stride] - mx).exp();
    }
    let log_z = mx + total.ln();
    for k in 0..len {
        data[base + k * stride] = data[base + k * stride] - log_z;
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
