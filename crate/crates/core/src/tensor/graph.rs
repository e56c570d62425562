//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` walks it in reverse. A node requires a
//! gradient iff it is a trainable leaf or depends on one; everything else is
//! skipped on the way back.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Exp(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        heads: usize,
        head_dim: usize,
        theta: f64,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowScale {
        x: Var,
        weights: Var,
        col: usize,
    },
    Top2Gate {
        probs: Var,
        picks: Vec<[usize; 2]>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// An evaluation tape over tensors of element type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulBt(a, b), out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = kernels::scale(self.value(a), c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = kernels::silu(self.value(a));
        self.push(Op::Silu(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = kernels::exp(self.value(a));
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let out = kernels::softmax_lastdim(self.value(a));
        self.push(Op::Softmax(a), out, &[a])
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::causal_softmax(self.value(a))?;
        Ok(self.push(Op::CausalSoftmax(a), out, &[a]))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (out, inv_rms) = kernels::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, out, &[x, gain]))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = kernels::layernorm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            &[x, gain, bias],
        ))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tab = self.value(table);
        let (v, d) = tab.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange {
                    position: pos,
                    id,
                    vocab: v,
                });
            }
            data.extend_from_slice(tab.row(id as usize));
        }
        let out = Tensor::matrix(ids.len(), d, data);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    pub fn rope(&mut self, x: Var, heads: usize, head_dim: usize, theta: f64, start: usize) -> Result<Var> {
        let out = kernels::rope(self.value(x), heads, head_dim, theta, start, false)?;
        Ok(self.push(
            Op::Rope {
                x,
                heads,
                head_dim,
                theta,
                start,
            },
            out,
            &[x],
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if start + len > c {
            return Err(Error::shape("slice_cols", src.shape(), &[r, start + len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data);
        Ok(self.push(Op::SliceCols { x, start }, out, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    /// `out[t, :] = x[t, :] · weights[t, col]`
    pub fn row_scale(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let (wr, wc) = self.value(weights).dims2()?;
        if wr != r || col >= wc {
            return Err(Error::shape(
                "row_scale",
                self.value(x).shape(),
                self.value(weights).shape(),
            ));
        }
        let w = self.value(weights).data();
        let mut out = self.value(x).clone();
        {
            let data = out.data_mut();
            for t in 0..r {
                let s = w[t * wc + col];
                for v in &mut data[t * c..(t + 1) * c] {
                    *v = *v * s;
                }
            }
        }
        Ok(self.push(Op::RowScale { x, weights, col }, out, &[x, weights]))
    }

    /// Top-2 gating of row-wise probabilities: keeps the two largest entries
    /// of each row (ties to the lower index), renormalized to sum to one, and
    /// zeroes the rest.
    pub fn top2_gate(&mut self, probs: Var) -> Result<Var> {
        let p = self.value(probs);
        let (r, e) = p.dims2()?;
        let mut picks = Vec::with_capacity(r);
        let mut data = vec![T::zero(); r * e];
        for t in 0..r {
            let row = p.row(t);
            let [a, b] = kernels::top2(row)?;
            let s = row[a] + row[b];
            data[t * e + a] = row[a] / s;
            data[t * e + b] = row[b] / s;
            picks.push([a, b]);
        }
        let out = Tensor::matrix(r, e, data);
        Ok(self.push(Op::Top2Gate { probs, picks }, out, &[probs]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::Sum(a), Tensor::scalar(total), &[a])
    }

    /// Mean next-token cross-entropy of `logits[T×V]` against `targets[T]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Every trainable leaf gets a
    /// gradient, zero if it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let target_shape = self.nodes[v.0].value.shape();
        let g = if g.shape() == target_shape {
            g
        } else {
            g.reshape(target_shape.to_vec())?
        };
        match &mut grads[v.0] {
            slot @ None => *slot = Some(g),
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = kernels::matmul_bt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_at(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    let ga = kernels::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_at(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.needs(*b) {
                    let gb = reduce_to(g, self.value(*b).shape());
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = kernels::mul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let prod = kernels::mul(g, self.value(*a))?;
                    let gb = reduce_to(&prod, self.value(*b).shape());
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, kernels::scale(g, *c))?;
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * kernels::silu_grad(xi))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Exp(a) => {
                let ga = kernels::mul(g, &node.value)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                // dx = y ⊙ (g − Σ g⊙y); masked entries have y = 0.
                let y = &node.value;
                let c = y.cols();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let s = orow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum::<T>();
                    for (o, &yi) in orow.iter_mut().zip(yrow) {
                        *o = yi * (*o - s);
                    }
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let c = xv.cols();
                let n = T::of(c as f64);
                if self.needs(*x) {
                    let mut gx = xv.clone();
                    for ((row, grow), &r) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(inv_rms) {
                        // u = g ⊙ gain; dx = r·u − r³/n · x · (u·x)
                        let ux = row
                            .iter()
                            .zip(grow)
                            .zip(gv)
                            .map(|((&xi, &gi), &wi)| gi * wi * xi)
                            .sum::<T>();
                        let k = r * r * r / n * ux;
                        for ((xi, &gi), &wi) in row.iter_mut().zip(grow).zip(gv) {
                            *xi = r * gi * wi - k * *xi;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.needs(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for ((xrow, grow), &r) in xv.data().chunks(c).zip(g.data().chunks(c)).zip(inv_rms) {
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * xrow[j] * r;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(gg))?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = xhat.cols();
                let n = T::of(c as f64);
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let mut gx = xhat.clone();
                    for ((row, grow), &r) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(inv_std) {
                        // u = g ⊙ gain; dx = r · (u − mean(u) − x̂ · mean(u ⊙ x̂))
                        let mu = grow.iter().zip(gv).map(|(&gi, &wi)| gi * wi).sum::<T>() / n;
                        let mux = row
                            .iter()
                            .zip(grow)
                            .zip(gv)
                            .map(|((&hi, &gi), &wi)| gi * wi * hi)
                            .sum::<T>()
                            / n;
                        for ((hi, &gi), &wi) in row.iter_mut().zip(grow).zip(gv) {
                            *hi = r * (gi * wi - mu - *hi * mux);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.needs(*gain) {
                    let prod = kernels::mul(g, xhat)?;
                    self.accumulate(grads, *gain, reduce_to(&prod, &[c]))?;
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, reduce_to(g, &[c]))?;
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let mut gt = Tensor::zeros(shape);
                let d = gt.cols();
                {
                    let data = gt.data_mut();
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut data[id as usize * d..(id as usize + 1) * d];
                        for (o, &gi) in dst.iter_mut().zip(g.row(t)) {
                            *o = *o + gi;
                        }
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                theta,
                start,
            } => {
                let gx = kernels::rope(g, *heads, *head_dim, *theta, *start, true)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let len = g.cols();
                let mut gx = Tensor::zeros(vec![r, c]);
                {
                    let data = gx.data_mut();
                    for i in 0..r {
                        data[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = self.value(p).dims2()?;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(r, w, data))?;
                    }
                    offset += w;
                }
            }
            Op::RowScale { x, weights, col } => {
                let xv = self.value(*x);
                let wv = self.value(*weights);
                let (r, c) = xv.dims2()?;
                let wc = wv.cols();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    let data = gx.data_mut();
                    for t in 0..r {
                        let s = wv.data()[t * wc + col];
                        for v in &mut data[t * c..(t + 1) * c] {
                            *v = *v * s;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.needs(*weights) {
                    let mut gw = Tensor::zeros(wv.shape().to_vec());
                    {
                        let data = gw.data_mut();
                        for t in 0..r {
                            data[t * wc + col] = kernels::dot(g.row(t), xv.row(t));
                        }
                    }
                    self.accumulate(grads, *weights, gw)?;
                }
            }
            Op::Top2Gate { probs, picks } => {
                let p = self.value(*probs);
                let e = p.cols();
                let mut gp = Tensor::zeros(p.shape().to_vec());
                {
                    let data = gp.data_mut();
                    for (t, &[a, b]) in picks.iter().enumerate() {
                        let (pa, pb) = (p.data()[t * e + a], p.data()[t * e + b]);
                        let s2 = (pa + pb) * (pa + pb);
                        let (ga, gb) = (g.data()[t * e + a], g.data()[t * e + b]);
                        data[t * e + a] = (ga - gb) * pb / s2;
                        data[t * e + b] = (gb - ga) * pa / s2;
                    }
                }
                self.accumulate(grads, *probs, gp)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = T::of(targets.len() as f64);
                let scale = g.data()[0] / n;
                let mut gl = probs.clone();
                let v = gl.cols();
                {
                    let data = gl.data_mut();
                    for (t, &y) in targets.iter().enumerate() {
                        data[t * v + y as usize] = data[t * v + y as usize] - T::one();
                    }
                    for x in data.iter_mut() {
                        *x = *x * scale;
                    }
                }
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Sums a gradient down to a trailing-broadcast operand's shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let c = shape.iter().product::<usize>().max(1);
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduce_to shape")
}
