//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass and
//! replays the tape in reverse to accumulate gradients. The tape is built
//! per forward pass and discarded after `backward`; parameters are bound by
//! name so a batch that reuses the same weight matrix shares one leaf node.

use std::collections::HashMap;

use crate::tensor::{Parameter, Tensor, TensorError};

/// Element precision of recorded values.
///
/// `F64` is the default and the only mode the correctness tolerances are
/// stated for. `F32` rounds every primitive's output through `f32`,
/// reproducing single-precision forward numerics inside the f64 engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn quantize_all(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    EwMul(Var, Var),
    /// Row-vector broadcast product: every row of the matrix is scaled
    /// elementwise by the vector. The one broadcast pattern we support.
    RowMul(Var, Var),
    EwMax(Var, Var),
    EwMin(Var, Var),
    Sqrt(Var),
    PowInt(Var, u32),
    Add(Var, Var),
    /// Matrix plus row vector (bias add), same broadcast rule as RowMul.
    RowAdd(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Column means of a rank-2 tensor: `[s, d] -> [1, d]`.
    MeanRows(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    EmbedLookup(Var, Vec<usize>),
    /// Elementwise product with a fixed (inverted-dropout) mask.
    Dropout(Var, Vec<f64>),
    /// Fused stable softmax + mean negative log-likelihood.
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// The tape. One per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    /// When set, every bound parameter requires grad regardless of its
    /// `trainable` flag (used for full-parameter NTK Jacobians).
    grad_all: bool,
    bindings: Vec<(String, Var, bool)>,
    by_name: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            grad_all: false,
            bindings: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Request gradients for every parameter bound after this call.
    pub fn force_all_grads(&mut self) {
        self.grad_all = true;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn push(&mut self, mut value: Tensor, needs_grad: bool, op: Op) -> Var {
        if !matches!(op, Op::Leaf) {
            self.precision.quantize_all(value.data_mut());
        }
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that requires a gradient (inputs under test, probes).
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Bind a named parameter. Re-binding the same name returns the
    /// existing node so gradients from every use accumulate in one place.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.by_name.get(&p.name) {
            debug_assert_eq!(self.nodes[v.0].value.shape(), p.tensor.shape());
            return v;
        }
        let needs = p.trainable || self.grad_all;
        let v = self.push(p.tensor.clone(), needs, Op::Leaf);
        self.bindings.push((p.name.clone(), v, p.trainable));
        self.by_name.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn grad_by_name(&self, name: &str) -> Option<Tensor> {
        self.by_name.get(name).and_then(|&v| self.grad(v))
    }

    /// `(name, grad)` for every bound trainable parameter that received a
    /// gradient, in binding (forward registration) order.
    pub fn trainable_grads(&self) -> Vec<(String, Tensor)> {
        self.bindings
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .filter_map(|(name, v, _)| self.grad(*v).map(|g| (name.clone(), g)))
            .collect()
    }

    /// `(name, grad)` for every bound parameter with a gradient, in binding
    /// order. Used by the NTK Jacobians with `force_all_grads`.
    pub fn all_grads(&self) -> Vec<(String, Tensor)> {
        self.bindings
            .iter()
            .filter_map(|(name, v, _)| self.grad(*v).map(|g| (name.clone(), g)))
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn require_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::NotAMatrix { op, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.require_matrix(a, "matmul")?;
        let (kb, n) = self.require_matrix(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::InnerDim {
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..ka {
                let av = ad[i * ka + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, needs, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.require_matrix(a, "transpose")?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, needs, Op::Transpose(a)))
    }

    /// Elementwise product. Shapes must match exactly, or `b` may be a
    /// vector of length `d` broadcast over the rows of an `s x d` matrix.
    pub fn ew_mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let out: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| x * y).collect();
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(Tensor::new(sa, out)?, needs, Op::EwMul(a, b)));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return self.row_mul(a, b);
        }
        Err(TensorError::ShapeMismatch { op: "ew_mul", left: sa, right: sb })
    }

    /// Row-broadcast product: `a[s, d] * b[d]`, one vector scaling every
    /// token row.
    pub fn row_mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, d) = self.require_matrix(a, "row_mul")?;
        let sb = self.shape(b).to_vec();
        if sb != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "row_mul",
                left: vec![s, d],
                right: sb,
            });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; s * d];
        for r in 0..s {
            for c in 0..d {
                out[r * d + c] = ad[r * d + c] * bd[c];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![s, d], out)?, needs, Op::RowMul(a, b)))
    }

    pub fn ew_max(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ew_extremum(a, b, true)
    }

    pub fn ew_min(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ew_extremum(a, b, false)
    }

    fn ew_extremum(&mut self, a: Var, b: Var, take_max: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            let op: &'static str = if take_max { "ew_max" } else { "ew_min" };
            return Err(TensorError::ShapeMismatch { op, left: sa, right: sb });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let out: Vec<f64> = ad
            .iter()
            .zip(bd)
            .map(|(&x, &y)| {
                let pick_a = if take_max { x >= y } else { x <= y };
                if pick_a {
                    x
                } else {
                    y
                }
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let op = if take_max { Op::EwMax(a, b) } else { Op::EwMin(a, b) };
        Ok(self.push(Tensor::new(sa, out)?, needs, op))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| x.sqrt()).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::Sqrt(a)))
    }

    /// Elementwise integer power. Degrees are non-negative; anything else
    /// is rejected before touching the data.
    pub fn pow_int(&mut self, a: Var, k: i64) -> Result<Var, TensorError> {
        if k < 0 {
            return Err(TensorError::UnsupportedDegree { degree: k });
        }
        let k = k as u32;
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| x.powi(k as i32)).collect();
        let needs = self.needs(a) && k > 0;
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::PowInt(a, k)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let out: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| x + y).collect();
            let needs = self.needs(a) || self.needs(b);
            return Ok(self.push(Tensor::new(sa, out)?, needs, Op::Add(a, b)));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return self.row_add(a, b);
        }
        Err(TensorError::ShapeMismatch { op: "add", left: sa, right: sb })
    }

    /// Matrix plus row vector (bias add).
    pub fn row_add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, d) = self.require_matrix(a, "row_add")?;
        let sb = self.shape(b).to_vec();
        if sb != [d] {
            return Err(TensorError::ShapeMismatch { op: "row_add", left: vec![s, d], right: sb });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; s * d];
        for r in 0..s {
            for c in 0..d {
                out[r * d + c] = ad[r * d + c] + bd[c];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![s, d], out)?, needs, Op::RowAdd(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "sub", left: sa, right: sb });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let out: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::Scale(a, c)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(total), needs, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.nodes[a.0].value.data();
        if data.is_empty() {
            return Err(TensorError::EmptyInput("mean"));
        }
        let m = data.iter().sum::<f64>() / data.len() as f64;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(m), needs, Op::Mean(a)))
    }

    /// Column means: `[s, d] -> [1, d]`. Used for sequence pooling.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (s, d) = self.require_matrix(a, "mean_rows")?;
        if s == 0 {
            return Err(TensorError::EmptyInput("mean_rows"));
        }
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0; d];
        for r in 0..s {
            for c in 0..d {
                out[c] += ad[r * d + c];
            }
        }
        for v in out.iter_mut() {
            *v /= s as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![1, d], out)?, needs, Op::MeanRows(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (s, d) = self.require_matrix(a, "softmax_rows")?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0; s * d];
        for r in 0..s {
            let row = &ad[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - m).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![s, d], out)?, needs, Op::SoftmaxRows(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::Gelu(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_rows"));
        }
        let (_, d) = self.require_matrix(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, dc) = self.require_matrix(p, "concat_rows")?;
            if dc != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: vec![r, dc],
                });
            }
            rows += r;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, d], data)?, needs, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_cols"));
        }
        let (s, _) = self.require_matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.require_matrix(p, "concat_cols")?;
            if r != s {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![s, total],
                    right: vec![r, c],
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; s * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.nodes[p.0].value.data();
            for r in 0..s {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![s, total], data)?, needs, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var, TensorError> {
        let (s, d) = self.require_matrix(a, "slice_cols")?;
        if lo >= hi || hi > d {
            return Err(TensorError::BadSlice { lo, hi, cols: d });
        }
        let w = hi - lo;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![0.0; s * w];
        for r in 0..s {
            out[r * w..(r + 1) * w].copy_from_slice(&ad[r * d + lo..r * d + hi]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![s, w], out)?, needs, Op::SliceCols(a, lo, hi)))
    }

    /// Token embedding lookup: `table[vocab, d]` gathered by `ids` into
    /// `[len(ids), d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.require_matrix(table, "embed_lookup")?;
        if ids.is_empty() {
            return Err(TensorError::EmptyInput("embed_lookup"));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            needs,
            Op::EmbedLookup(table, ids.to_vec()),
        ))
    }

    /// Inverted-dropout with a caller-supplied mask of `0.0` / `1/(1-p)`
    /// entries. The mask is recorded so backward reuses it exactly.
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let n: usize = sa.iter().product();
        if mask.len() != n {
            return Err(TensorError::DataLength { expected: n, got: mask.len() });
        }
        let out: Vec<f64> =
            self.nodes[a.0].value.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(sa, out)?, needs, Op::Dropout(a, mask)))
    }

    /// Stable cross-entropy: softmax over each logit row, then the mean
    /// negative log-likelihood of the labels. Max-subtraction keeps the
    /// log-sum-exp finite for any logit magnitude.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (t, c) = self.require_matrix(logits, "cross_entropy")?;
        if labels.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, c],
                right: vec![labels.len()],
            });
        }
        let ld = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::LabelOutOfRange { label: y, classes: c });
            }
            let row = &ld[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / t as f64),
            needs,
            Op::CrossEntropy(logits, labels.to_vec()),
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates grads on every node
    /// that participates in the loss and requires one; leaves with
    /// `requires_grad == false` end up grad-free.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(up) = grads[id].clone() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let u = up[i * n + j];
                                if u == 0.0 {
                                    continue;
                                }
                                for l in 0..k {
                                    da[i * k + l] += u * bd[l * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for l in 0..k {
                                let av = ad[i * k + l];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[l * n + j] += av * up[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(a) {
                        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                        let mut da = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = up[j * m + i];
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::EwMul(a, b) => {
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data();
                        let da: Vec<f64> = up.iter().zip(bd).map(|(u, y)| u * y).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data();
                        let db: Vec<f64> = up.iter().zip(ad).map(|(u, x)| u * x).collect();
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::RowMul(a, b) => {
                    let (s, d) = (self.shape(a)[0], self.shape(a)[1]);
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data();
                        let mut da = vec![0.0; s * d];
                        for r in 0..s {
                            for c in 0..d {
                                da[r * d + c] = up[r * d + c] * bd[c];
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data();
                        let mut db = vec![0.0; d];
                        for r in 0..s {
                            for c in 0..d {
                                db[c] += up[r * d + c] * ad[r * d + c];
                            }
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::EwMax(a, b) | Op::EwMin(a, b) => {
                    let take_max = matches!(self.nodes[id].op, Op::EwMax(..));
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    // Ties route to the first (left) operand.
                    if self.needs(a) {
                        let da: Vec<f64> = up
                            .iter()
                            .enumerate()
                            .map(|(i, u)| {
                                let pick_a =
                                    if take_max { ad[i] >= bd[i] } else { ad[i] <= bd[i] };
                                if pick_a {
                                    *u
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = up
                            .iter()
                            .enumerate()
                            .map(|(i, u)| {
                                let pick_a =
                                    if take_max { ad[i] >= bd[i] } else { ad[i] <= bd[i] };
                                if pick_a {
                                    0.0
                                } else {
                                    *u
                                }
                            })
                            .collect();
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs(a) {
                        let out = self.nodes[id].value.data();
                        // Subgradient 0 at the origin.
                        let da: Vec<f64> = up
                            .iter()
                            .zip(out)
                            .map(|(u, &s)| if s == 0.0 { 0.0 } else { u * 0.5 / s })
                            .collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::PowInt(a, k) => {
                    if self.needs(a) && k > 0 {
                        let ad = self.nodes[a.0].value.data();
                        let da: Vec<f64> = up
                            .iter()
                            .zip(ad)
                            .map(|(u, &x)| u * k as f64 * x.powi(k as i32 - 1))
                            .collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &up);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], &up);
                    }
                }
                Op::RowAdd(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &up);
                    }
                    if self.needs(b) {
                        let (s, d) = (self.shape(a)[0], self.shape(a)[1]);
                        let mut db = vec![0.0; d];
                        for r in 0..s {
                            for c in 0..d {
                                db[c] += up[r * d + c];
                            }
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &up);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = up.iter().map(|u| -u).collect();
                        accumulate(&mut grads[b.0], &neg);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(a) {
                        let da: Vec<f64> = up.iter().map(|u| u * c).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let n = self.nodes[a.0].value.numel();
                        accumulate(&mut grads[a.0], &vec![up[0]; n]);
                    }
                }
                Op::Mean(a) => {
                    if self.needs(a) {
                        let n = self.nodes[a.0].value.numel();
                        accumulate(&mut grads[a.0], &vec![up[0] / n as f64; n]);
                    }
                }
                Op::MeanRows(a) => {
                    if self.needs(a) {
                        let (s, d) = (self.shape(a)[0], self.shape(a)[1]);
                        let mut da = vec![0.0; s * d];
                        for r in 0..s {
                            for c in 0..d {
                                da[r * d + c] = up[c] / s as f64;
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(a) {
                        let (s, d) = (self.shape(a)[0], self.shape(a)[1]);
                        let out = self.nodes[id].value.data();
                        let mut da = vec![0.0; s * d];
                        for r in 0..s {
                            let srow = &out[r * d..(r + 1) * d];
                            let urow = &up[r * d..(r + 1) * d];
                            let dot: f64 = srow.iter().zip(urow).map(|(s, u)| s * u).sum();
                            for c in 0..d {
                                da[r * d + c] = srow[c] * (urow[c] - dot);
                            }
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(a) {
                        let ad = self.nodes[a.0].value.data();
                        let da: Vec<f64> =
                            up.iter().zip(ad).map(|(u, &x)| u * gelu_derivative(x)).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].value.numel();
                        if self.needs(p) {
                            accumulate(&mut grads[p.0], &up[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let s = self.shape(parts[0])[0];
                    let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.shape(p)[1];
                        if self.needs(p) {
                            let mut dp = vec![0.0; s * w];
                            for r in 0..s {
                                dp[r * w..(r + 1) * w].copy_from_slice(
                                    &up[r * total + offset..r * total + offset + w],
                                );
                            }
                            accumulate(&mut grads[p.0], &dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, lo, hi) => {
                    if self.needs(a) {
                        let (s, d) = (self.shape(a)[0], self.shape(a)[1]);
                        let w = hi - lo;
                        let mut da = vec![0.0; s * d];
                        for r in 0..s {
                            da[r * d + lo..r * d + hi].copy_from_slice(&up[r * w..(r + 1) * w]);
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::EmbedLookup(table, ids) => {
                    if self.needs(table) {
                        let (vocab, d) = (self.shape(table)[0], self.shape(table)[1]);
                        let mut dt = vec![0.0; vocab * d];
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                dt[id * d + c] += up[r * d + c];
                            }
                        }
                        accumulate(&mut grads[table.0], &dt);
                    }
                }
                Op::Dropout(a, mask) => {
                    if self.needs(a) {
                        let da: Vec<f64> = up.iter().zip(&mask).map(|(u, m)| u * m).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                }
                Op::CrossEntropy(logits, labels) => {
                    if self.needs(logits) {
                        let (t, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                        let ld = self.nodes[logits.0].value.data();
                        let mut dl = vec![0.0; t * c];
                        let scale = up[0] / t as f64;
                        for (r, &y) in labels.iter().enumerate() {
                            let row = &ld[r * c..(r + 1) * c];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - m).exp() / z;
                                dl[r * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                            }
                        }
                        accumulate(&mut grads[logits.0], &dl);
                    }
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

const GELU_COEFF: f64 = 0.044_715;

/// Tanh-form gelu, the variant transformer stacks actually ship.
pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * s * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(mat(1, 2, &[1.0, 2.0]));
        let b = g.leaf(mat(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(mat(1, 2, &[1.0, 2.0]));
        let b = g.leaf(mat(3, 1, &[1.0, 2.0, 3.0]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::InnerDim { left, right } => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![3, 1]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_hand_value() {
        // d/dA sum(A x B) with A=[[1,2]], B=[[3],[4]] is [[3,4]].
        let mut g = Graph::new();
        let a = g.leaf_grad(mat(1, 2, &[1.0, 2.0]));
        let b = g.leaf(mat(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn ew_mul_ones_is_identity_on_values() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![2.0, 3.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let c = g.ew_mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0]);
    }

    #[test]
    fn ew_mul_broadcast_and_column_sum_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf_grad(Tensor::vector(vec![10.0, 100.0]));
        let c = g.ew_mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 200.0, 30.0, 400.0]);

        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf_grad(Tensor::vector(vec![1.0, 1.0]));
        let c = g.ew_mul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn ew_mul_rejects_other_broadcasts() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 3, &[0.0; 6]));
        let b = g.leaf(mat(2, 1, &[0.0; 2]));
        assert!(g.ew_mul(a, b).is_err());
    }

    #[test]
    fn pow_int_cases() {
        let mut g = Graph::new();
        let ones = g.leaf(Tensor::ones(&[5]));
        let p = g.pow_int(ones, 15).unwrap();
        assert_eq!(g.value(p).data(), &[1.0; 5]);

        let a = g.leaf_grad(Tensor::vector(vec![2.0]));
        let c = g.pow_int(a, 3).unwrap();
        assert_eq!(g.value(c).data(), &[8.0]);
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[12.0]);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![-3.0, 0.5, 9.0]));
        let z = g.pow_int(a, 0).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 1.0, 1.0]);

        assert!(g.pow_int(a, -2).is_err());
    }

    #[test]
    fn softmax_symmetry_and_gelu_fixed_point() {
        let mut g = Graph::new();
        let a = g.leaf(mat(1, 2, &[0.0, 0.0]));
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn sum_hand_value() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(a).unwrap();
        assert_eq!(g.value(s).item(), 10.0);
    }

    #[test]
    fn backward_populates_trainable_and_skips_frozen() {
        let mut g = Graph::new();
        let z = Parameter::trainable("z", Tensor::vector(vec![1.0, 1.0]));
        let v = Parameter::frozen("v", Tensor::vector(vec![2.0, 3.0]));
        let zv = g.param(&z);
        let vv = g.param(&v);
        let prod = g.ew_mul(zv, vv).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(zv).unwrap().data(), &[2.0, 3.0]);
        assert!(g.grad(vv).is_none());
    }

    #[test]
    fn backward_disconnected_grad_is_absent() {
        let mut g = Graph::new();
        let z = Parameter::trainable("z", Tensor::vector(vec![1.0]));
        let zv = g.param(&z);
        let other = g.leaf(Tensor::vector(vec![5.0]));
        let loss = g.sum(other).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(zv).is_none());
        let grads = g.trainable_grads();
        assert!(grads.is_empty());
    }

    #[test]
    fn backward_composed_square() {
        // loss = sum(v * z^2), v=[1], z=[3] -> dloss/dz = 2*v*z = 6.
        let mut g = Graph::new();
        let z = Parameter::trainable("z", Tensor::vector(vec![3.0]));
        let zv = g.param(&z);
        let v = g.leaf(Tensor::vector(vec![1.0]));
        let z2 = g.pow_int(zv, 2).unwrap();
        let prod = g.ew_mul(v, z2).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(zv).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf_grad(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn param_rebinding_accumulates_grads() {
        // Using the same parameter twice must add both contributions.
        let mut g = Graph::new();
        let z = Parameter::trainable("z", Tensor::vector(vec![2.0]));
        let z1 = g.param(&z);
        let z2 = g.param(&z);
        assert_eq!(z1, z2);
        let prod = g.ew_mul(z1, z2).unwrap(); // z^2
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z1).unwrap().data(), &[4.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(mat(2, 3, &[0.3, -1.2, 0.7, 2.2, -0.4, 0.9]));
            let b = g.leaf(mat(3, 2, &[1.0, 0.5, -0.25, 2.0, 0.125, -1.5]));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            let e = g.gelu(s).unwrap();
            let m = g.mean(e).unwrap();
            g.value(m).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn f32_precision_rounds_forward_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let a = g.leaf(Tensor::vector(vec![0.1]));
        let b = g.leaf(Tensor::vector(vec![0.2]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data()[0], (0.1f64 + 0.2) as f32 as f64);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(mat(2, 1, &[5.0, 6.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice_cols(c, 2, 3).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);

        let r = g.concat_rows(&[a, a]).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 2]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let logits = g.leaf(mat(1, 2, &[0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
