use std::fmt;

use log::warn;

use super::gemm::{gemm, Operand};
use super::Tensor;
use crate::error::{Error, Result};

/// `sqrt(2/pi)` and the cubic coefficient of the tanh GELU approximation.
/// Fixed so that checkpoints evaluate identically everywhere.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; only the pullback lives here.
pub trait CustomOp: fmt::Debug + Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. Entries where `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatLastAxis(Vec<Var>),
    SliceLastAxis {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    CosineSimilarity(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Differentiation tape. Nodes are stored in creation order, which is a
/// topological order because every operation takes existing handles.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Operand::rows(self.value(a).data(), k),
            Operand::rows(self.value(b).data(), n),
            &mut out,
            n,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                Operand::rows(&da[i * m * k..], k),
                Operand::rows(&db[i * k * n..], n),
                &mut out[i * m * n..],
                n,
                false,
            );
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new([c, r], transpose_buf(self.value(a).data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b`'s rows to `a`'s rows cyclically: `out[i] = a[i] + b[i mod rows(b)]`.
    /// A bias vector is the one-row case.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || ta.rows() % tb.rows() != 0 {
            return Err(Error::dim("add_tiled", ta.shape(), tb.shape()));
        }
        let period = tb.numel();
        let mut value = ta.clone();
        for (chunk_idx, x) in value.data.iter_mut().enumerate() {
            *x += tb.data[chunk_idx % period];
        }
        Ok(self.push(value, Op::AddTiled(a, b), &[a, b]))
    }

    /// `x·w + b` for a matrix `x`, weight `w` and bias `b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_tiled(y, b)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::MulScalar(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut value = x.clone();
        let c = value.cols();
        value.data.chunks_mut(c).for_each(softmax_in_place);
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`. Uses the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let d = tx.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::dim("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dim("concat_last_axis", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = self.shape(first).to_vec();
        *shape.last_mut().unwrap() = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatLastAxis(parts.to_vec()), parts))
    }

    /// Columns `start..end` of every row.
    pub fn slice_last_axis(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.cols() {
            return Err(Error::dim("slice_last_axis", t.shape(), &[start, end]));
        }
        let out: Vec<f64> = (0..t.rows()).flat_map(|r| t.row(r)[start..end].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceLastAxis { x, start }, &[x]))
    }

    /// Rows `start..end` of the matrix view, as a `[end - start, cols]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, end]));
        }
        let c = t.cols();
        let value = Tensor::new([end - start, c], t.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(Error::dim("gather_rows", t.shape(), rows));
        }
        let out: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let value = Tensor::new([rows.len(), t.cols()], out)?;
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// `base` with `src[i]` added onto row `rows[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        if tb.cols() != ts.cols() || ts.rows() != rows.len() || rows.iter().any(|&r| r >= tb.rows()) {
            return Err(Error::dim("scatter_add_rows", tb.shape(), ts.shape()));
        }
        let c = tb.cols();
        let mut value = tb.clone();
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..c {
                value.data[r * c + j] += ts.data[i * c + j];
            }
        }
        Ok(self.push(
            value,
            Op::ScatterAddRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            &[base, src],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `u·v / (|u| |v|)` as a scalar; zero if either vector is zero.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).numel() != self.value(v).numel() {
            return Err(Error::dim("cosine_similarity", self.shape(u), self.shape(v)));
        }
        let c = cosine(self.value(u).data(), self.value(v).data());
        Ok(self.push(Tensor::scalar(c), Op::CosineSimilarity(u, v), &[u, v]))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut value = t.clone();
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        for row in value.data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                warn!("normalize_rows: zero row, leaving it at zero");
            }
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients are
    /// accumulated (`+=`) into whatever they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, contribution) in self.pullback(node, &g) {
                accumulate(&mut grads[input.0], contribution);
            }
        }
        for (id, g) in leaf_grads {
            accumulate(&mut self.nodes[id].grad, g);
        }
        Ok(())
    }

    /// Clears every stored leaf gradient.
    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn pullback(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Operand::rows(g, n), Operand::transposed(val(*b).data(), n), &mut da, k, false);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, Operand::transposed(val(*a).data(), k), Operand::rows(g, n), &mut db, n, false);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = val(*a).shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = val(*b).shape()[2];
                if self.needs(*a) {
                    let bd = val(*b).data();
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            Operand::rows(&g[i * m * n..], n),
                            Operand::transposed(&bd[i * k * n..], n),
                            &mut da[i * m * k..],
                            k,
                            false,
                        );
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let ad = val(*a).data();
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            Operand::transposed(&ad[i * m * k..], k),
                            Operand::rows(&g[i * m * n..], n),
                            &mut db[i * k * n..],
                            n,
                            false,
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                out.push((*a, transpose_buf(g, s[1], s[0])));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddTiled(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    let period = val(*b).numel();
                    let mut db = vec![0.0; period];
                    for chunk in g.chunks(period) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    out.push((*b, db));
                }
            }
            Op::MulScalar(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Relu(a) => {
                let x = val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect()));
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect()));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = val(*gamma).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..inv_std.len() {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*beta, db));
                }
            }
            Op::ConcatLastAxis(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.needs(p) {
                        let dp = g.chunks(total).flat_map(|row| row[offset..offset + c].iter().copied()).collect();
                        out.push((p, dp));
                    }
                    offset += c;
                }
            }
            Op::SliceLastAxis { x, start } => {
                let (c, w) = (val(*x).cols(), node.value.cols());
                let mut dx = vec![0.0; val(*x).numel()];
                for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(w)) {
                    drow[*start..start + w].copy_from_slice(grow);
                }
                out.push((*x, dx));
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                let mut dx = vec![0.0; val(*x).numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::GatherRows { x, rows } => {
                let c = val(*x).cols();
                let mut dx = vec![0.0; val(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[i * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterAddRows { base, src, rows } => {
                if self.needs(*base) {
                    out.push((*base, g.to_vec()));
                }
                if self.needs(*src) {
                    let c = val(*src).cols();
                    let ds = rows.iter().flat_map(|&r| g[r * c..(r + 1) * c].iter().copied()).collect();
                    out.push((*src, ds));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::SumAll(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::CosineSimilarity(u, v) => {
                let (ud, vd) = (val(*u).data(), val(*v).data());
                let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
                let c = node.value.data()[0];
                let zero = nu == 0.0 || nv == 0.0;
                let partial = |a: &[f64], b: &[f64], na: f64| -> Vec<f64> {
                    if zero {
                        return vec![0.0; a.len()];
                    }
                    a.iter()
                        .zip(b)
                        .map(|(ai, bi)| g[0] * (bi / (nu * nv) - c * ai / (na * na)))
                        .collect()
                };
                if self.needs(*u) {
                    out.push((*u, partial(ud, vd, nu)));
                }
                if self.needs(*v) {
                    out.push((*v, partial(vd, ud, nv)));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*x, dx));
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = op.backward(&tensors, &node.value, g, &needs);
                for ((&v, grad), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(grad), true) = (grad, need) {
                        debug_assert_eq!(grad.len(), val(v).numel(), "{} pullback size", op.name());
                        out.push((v, grad));
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

fn transpose_buf(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Cosine similarity of two equally long vectors; zero if either is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        warn!("cosine similarity of a zero vector, defined as 0");
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}
