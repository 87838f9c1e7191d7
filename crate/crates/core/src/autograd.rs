//! Single-use reverse-mode tape over matrix-valued operations.
//!
//! Every operation appends one node; a node's inputs always precede it, so
//! the backward sweep is a single reverse pass over the node list. Values of
//! borrowed leaves (model parameters) are never copied onto the tape.
//!
//! Only the primitives a pre-LN causal transformer needs are provided, and
//! the only broadcast is a bias added over rows.

use std::borrow::Cow;

use crate::error::{RampError, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalSoftmax {
        x: Var,
        offset: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass; consumed by [`Tape::backward`].
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf (inputs, constants).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; parameters enter the tape this way without a copy.
    pub fn borrowed(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(RampError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(RampError::Dimension(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(RampError::Dimension(format!(
                "matmul_nt inner dimensions {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(RampError::Dimension(format!(
                "add shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(RampError::Dimension(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::matrix(m, n, data)?, Op::AddRowBias(x, bias), rg, "add_row_bias")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(RampError::Dimension(format!(
                "mul shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(RampError::Dimension("layer_norm parameter width".into()));
        }
        let rg = self.rg(&[x, gain, bias]);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = if rg { vec![0.0; m * n] } else { Vec::new() };
        let mut rstd = if rg { vec![0.0; m] } else { Vec::new() };
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                out[r * n + c] = h * g[c] + b[c];
                if rg {
                    xhat[r * n + c] = h;
                }
            }
            if rg {
                rstd[r] = rs;
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(Tensor::matrix(m, n, out)?, op, rg, "layer_norm")
    }

    /// Row softmax where row `r` only sees columns `[0, offset + r + 1)`.
    /// Hidden entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let visible = (offset + r + 1).min(n);
            let row = &xs[r * n..r * n + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..r * n + visible];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(m, n, out)?, Op::CausalSoftmax { x, offset }, rg, "softmax")
    }

    /// Plain row softmax (every column visible).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.dims(x).1;
        self.causal_softmax(x, n)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(RampError::Index(format!("row {id} of a {rows}-row table")));
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let rg = self.rg(&[table]);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::matrix(ids.len(), n, data)?, op, rg, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(RampError::Dimension("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors, n)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, _) = self.dims(x);
        if start > end || end > m {
            return Err(RampError::Index(format!("rows {start}..{end} of {m}")));
        }
        let out = self.value(x).slice_rows(start, end);
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > n {
            return Err(RampError::Index(format!("cols {start}..{end} of {n}")));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(m, w, data)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(RampError::Dimension("concat_cols of nothing".into()));
        };
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(RampError::Dimension("concat_cols row mismatch".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * n + col..r * n + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Mean over rows of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(RampError::Dimension(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if m == 0 {
            return Err(RampError::Dimension("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(RampError::Index(format!("target id {bad} >= vocab {v}")));
        }
        let xs = self.value(logits).data();
        let rg = self.rg(&[logits]);
        let mut probs = if rg { vec![0.0; m * v] } else { Vec::new() };
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t];
            if rg {
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - log_z).exp();
                }
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(total / m as f64), op, rg, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(RampError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Accumulates `delta` into the gradient slot of `v` when it requires grad.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    delta(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            acc(nodes, grads, *a, |ga| gemm_nt(g, val(*b).data(), ga, m, n, k));
            acc(nodes, grads, *b, |gb| gemm_tn(val(*a).data(), g, gb, m, k, n));
        }
        Op::MatMulNT(a, b) => {
            // out = a · bᵀ with a: m×k, b: n×k
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            acc(nodes, grads, *a, |ga| gemm_nn(g, val(*b).data(), ga, m, n, k));
            acc(nodes, grads, *b, |gb| gemm_tn(g, val(*a).data(), gb, m, n, k));
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                acc(nodes, grads, v, |gv| add_into(gv, g));
            }
        }
        Op::AddRowBias(x, bias) => {
            acc(nodes, grads, *x, |gx| add_into(gx, g));
            let n = val(*bias).len();
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            });
        }
        Op::Mul(a, b) => {
            acc(nodes, grads, *a, |ga| {
                for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += gv * bv;
                }
            });
            acc(nodes, grads, *b, |gb| {
                for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gv * av;
                }
            });
        }
        Op::Scale(x, s) => {
            acc(nodes, grads, *x, |gx| {
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += s * gv;
                }
            });
        }
        Op::Gelu(x) => {
            acc(nodes, grads, *x, |gx| {
                for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = val(*gain).len();
            let gvals = val(*gain).data();
            acc(nodes, grads, *gain, |gg| {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        gg[c] += grow[c] * hrow[c];
                    }
                }
            });
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            });
            acc(nodes, grads, *x, |gx| {
                let nf = n as f64;
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..n {
                        let d = grow[c] * gvals[c];
                        mean_d += d;
                        mean_dh += d * hrow[c];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for c in 0..n {
                        let d = grow[c] * gvals[c];
                        gx[r * n + c] += rstd[r] * (d - mean_d - hrow[c] * mean_dh);
                    }
                }
            });
        }
        Op::CausalSoftmax { x, offset } => {
            let y = node.value.data();
            let n = node.value.cols();
            let offset = *offset;
            acc(nodes, grads, *x, |gx| {
                for r in 0..node.value.rows() {
                    let visible = (offset + r + 1).min(n);
                    let base = r * n;
                    let dot: f64 = (0..visible).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..visible {
                        gx[base + c] += y[base + c] * (g[base + c] - dot);
                    }
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let n = val(*table).cols();
            acc(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                acc(nodes, grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let n = val(*x).cols();
            let from = start * n;
            acc(nodes, grads, *x, |gx| add_into(&mut gx[from..from + g.len()], g));
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).cols();
            let w = node.value.cols();
            acc(nodes, grads, *x, |gx| {
                for r in 0..node.value.rows() {
                    add_into(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let n = node.value.cols();
            let m = node.value.rows();
            let mut col = 0;
            for &p in parts {
                let w = val(p).cols();
                acc(nodes, grads, p, |gp| {
                    for r in 0..m {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w]);
                    }
                });
                col += w;
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = val(*logits).cols();
            let m = targets.len() as f64;
            let scale = g[0] / m;
            acc(nodes, grads, *logits, |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    let base = r * v;
                    for c in 0..v {
                        gl[base + c] += scale * probs[base + c];
                    }
                    gl[base + t] -= scale;
                }
            });
        }
        Op::Sum(x) => {
            acc(nodes, grads, *x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn check_unary(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone(), true);
            let out = build(&mut tape, v);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric_grad(&x, &f)) {
            assert!(rel_err(*a, n) < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        // Random projection so every output entry contributes a distinct weight.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(x).shape().to_vec();
        let w = tape.leaf(Tensor::randn(shape, 1.0, &mut rng), false);
        let p = tape.mul(x, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(), false);
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let two = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap(), false);
        let three = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap(), false);
        let six = tape.matmul(two, three).unwrap();
        assert_eq!(tape.value(six).data(), &[6.0]);

        assert!(matches!(tape.matmul(i, six), Err(RampError::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0], vec![1.0, 2.0, 3.0]])
                .unwrap(),
            false,
        );
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y);
        for c in 0..3 {
            assert!((y.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12 && y.get(1, 1) < 1e-12);
        // Oracle: e^k / (e + e^2 + e^3) written in closed form.
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for c in 0..3 {
            assert!((y.get(2, c) - ((c + 1) as f64).exp() / z).abs() < 1e-15);
        }
        for r in 0..3 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_hides_future_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![3, 5], 0.5), false);
        let y = tape.causal_softmax(x, 2).unwrap();
        let y = tape.value(y);
        assert_eq!(y.get(0, 3), 0.0);
        assert!((y.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get(2, 4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(vec![2, 16]), false);
        let l = tape.cross_entropy(uniform, &[3, 9]).unwrap();
        assert!((tape.value(l).data()[0] - 16f64.ln()).abs() < 1e-12);

        let mut sure = Tensor::zeros(vec![1, 16]);
        sure.data_mut()[5] = 1e6;
        let sure = tape.leaf(sure, false);
        let l = tape.cross_entropy(sure, &[5]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-9);

        assert!(matches!(tape.cross_entropy(sure, &[16]), Err(RampError::Index(_))));
    }

    #[test]
    fn cross_entropy_matches_direct_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::randn(vec![3, 8], 2.0, &mut rng);
        let targets = [1usize, 7, 0];
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[t].exp() / z).ln();
        }
        expect /= 3.0;
        let mut tape = Tape::new();
        let x = tape.leaf(logits, false);
        let l = tape.cross_entropy(x, &targets).unwrap();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let w = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone(), true);
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let v = tape.leaf(w.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(v).unwrap().data(), w.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(tape.backward(v), Err(RampError::Contract(_))));
    }

    #[test]
    fn non_finite_values_raise() {
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::filled(vec![1, 1], 1e200), false);
        assert!(matches!(tape.matmul(big, big), Err(RampError::NonFinite { .. })));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let k = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let bias = Tensor::randn(vec![4], 1.0, &mut rng);

        check_unary(x.clone(), |t, v| {
            let wv = t.leaf(w.clone(), false);
            let y = t.matmul(v, wv).unwrap();
            weighted_sum(t, y, 2)
        });
        check_unary(w.clone(), |t, v| {
            let xv = t.leaf(x.clone(), false);
            let y = t.matmul(xv, v).unwrap();
            weighted_sum(t, y, 3)
        });
        check_unary(x.clone(), |t, v| {
            let kv = t.leaf(k.clone(), false);
            let y = t.matmul_nt(v, kv).unwrap();
            weighted_sum(t, y, 4)
        });
        check_unary(k.clone(), |t, v| {
            let xv = t.leaf(x.clone(), false);
            let y = t.matmul_nt(xv, v).unwrap();
            weighted_sum(t, y, 4)
        });
        check_unary(x.clone(), |t, v| {
            let y = t.gelu(v).unwrap();
            weighted_sum(t, y, 5)
        });
        check_unary(x.clone(), |t, v| {
            let g = t.leaf(bias.clone(), false);
            let b = t.leaf(Tensor::filled(vec![4], 0.1), false);
            let y = t.layer_norm(v, g, b).unwrap();
            weighted_sum(t, y, 6)
        });
        check_unary(bias.clone(), |t, v| {
            let xv = t.leaf(x.clone(), false);
            let b = t.leaf(Tensor::filled(vec![4], 0.1), false);
            let y = t.layer_norm(xv, v, b).unwrap();
            weighted_sum(t, y, 7)
        });
        check_unary(bias.clone(), |t, v| {
            let xv = t.leaf(x.clone(), false);
            let y = t.add_row_bias(xv, v).unwrap();
            weighted_sum(t, y, 8)
        });
        check_unary(x.clone(), |t, v| {
            let y = t.causal_softmax(v, 1).unwrap();
            weighted_sum(t, y, 9)
        });
        check_unary(x.clone(), |t, v| {
            let y = t.cross_entropy(v, &[0, 3, 2]).unwrap();
            t.scale(y, 1.0).unwrap()
        });
        check_unary(x.clone(), |t, v| {
            let a = t.slice_cols(v, 1, 3).unwrap();
            let b = t.slice_rows(v, 0, 2).unwrap();
            let b = t.slice_cols(b, 0, 2).unwrap();
            let c = t.concat_rows(&[a, b]).unwrap();
            let d = t.concat_cols(&[c, c]).unwrap();
            weighted_sum(t, d, 10)
        });
        check_unary(w.clone(), |t, v| {
            let y = t.gather_rows(v, &[3, 0, 3]).unwrap();
            weighted_sum(t, y, 11)
        });
    }
}
