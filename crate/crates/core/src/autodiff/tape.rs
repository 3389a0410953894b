//! Operation recording and the reverse pass.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Each operation appends a node holding its output and enough context to
//! run its backward rule; [`Tape::backward`] walks the nodes in exact
//! reverse order and accumulates gradients additively, so a value consumed
//! twice receives the sum of both contributions.

use super::tensor::{axis_extents, gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Batch statistics computed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { src: Var, axis: usize },
    Mean { src: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Softmax { src: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    Norm(NormCache),
    Mse(Var, Var),
}

/// Saved context for batch norm (statistics per column) and layer norm
/// (statistics per row).
#[derive(Debug)]
struct NormCache {
    src: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    per_row: bool,
    /// False when normalizing with fixed running statistics.
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that fails any operation producing a non-finite value.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
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
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Diverged(format!("non-finite output from {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[..., c] + b[c]`: adds a vector along the last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let cols = *sa.last().unwrap_or(&0);
        if sb != [cols] {
            return Err(Error::shape("add_row", sa, sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        self.push("add_row", value, Op::AddRow(a, b), &[a, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(Error::shape("bmm", sa, sb)),
        };
        let mut out = vec![0.0; bs * m * n];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta[i * m * k..(i + 1) * m * k],
                false,
                &tb[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::new([bs, m, n], out)?;
        self.push("bmm", value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Indices `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let value = Tensor::new(new_shape, out)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            &[a],
        )
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", &base_shape, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    fn reduce_axis(
        &self,
        a: Var,
        axis: usize,
        op: &'static str,
    ) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(op, &shape, &[axis]));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok((new_shape, out, dim))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, data, _) = self.reduce_axis(a, axis, "sum")?;
        let value = Tensor::new(shape, data)?;
        self.push("sum", value, Op::Sum { src: a, axis }, &[a])
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut data, dim) = self.reduce_axis(a, axis, "mean")?;
        for v in &mut data {
            *v /= dim as f64;
        }
        let value = Tensor::new(shape, data)?;
        self.push("mean", value, Op::Mean { src: a, axis }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim)
                    .map(|d| out[idx(d)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (out[idx(d)] - max).exp();
                    out[idx(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[idx(d)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { src: a, axis }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let d = self
            .value(s)
            .item()
            .ok_or_else(|| Error::shape("div_scalar", self.shape(a), self.shape(s)))?;
        let value = self.value(a).map(|x| x / d);
        self.push("div_scalar", value, Op::DivScalar(a, s), &[a, s])
    }

    /// Batch normalization of `x: [rows, C]` using the statistics of the
    /// current batch (per column, over rows, biased variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (rows, cols) = self.norm_dims("batch_norm", x, gamma, beta)?;
        let data = self.value(x).data();
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += data[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for r in 0..rows {
            for c in 0..cols {
                let d = data[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.finish_norm(x, gamma, beta, &mean, inv_std, false, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, cols) = self.norm_dims("batch_norm_eval", x, gamma, beta)?;
        if mean.len() != cols || var.len() != cols {
            return Err(Error::shape(
                "batch_norm_eval",
                &[cols],
                &[mean.len(), var.len()],
            ));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.finish_norm(x, gamma, beta, mean, inv_std, false, false)
    }

    /// Layer normalization of `x: [rows, C]` over each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.norm_dims("layer_norm", x, gamma, beta)?;
        let data = self.value(x).data();
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cols as f64;
            mean[r] = m;
            inv_std[r] = 1.0 / (v + eps).sqrt();
        }
        self.finish_norm(x, gamma, beta, &mean, inv_std, true, true)
    }

    fn norm_dims(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        let (rows, cols) = match sx {
            &[r, c] if r > 0 && c > 0 => (r, c),
            _ => return Err(Error::shape(op, sx, &[])),
        };
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::shape(op, sx, self.shape(p)));
            }
        }
        Ok((rows, cols))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        per_row: bool,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = shape[1];
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (i, (&v, (xh, o))) in data
            .iter()
            .zip(xhat.iter_mut().zip(out.iter_mut()))
            .enumerate()
        {
            let (r, c) = (i / cols, i % cols);
            let s = if per_row { r } else { c };
            *xh = (v - mean[s]) * inv_std[s];
            *o = g[c] * *xh + b[c];
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::Norm(NormCache {
            src: x,
            gamma,
            beta,
            xhat,
            inv_std,
            per_row,
            batch_stats,
        });
        self.push("norm", value, op, &[x, gamma, beta])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let n = ta.len().max(1) as f64;
        let s = ta
            .iter()
            .zip(tb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Reverse pass from a one-element `loss`. Every trainable leaf gets a
    /// gradient, zero when it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward (loss must be scalar)",
                lv.shape(),
                &[1],
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, data: Vec<f64>) -> Result<()> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), data)?),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.to_vec())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect())?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g / y).collect())?;
                }
                if wants(*b) {
                    let d = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                if wants(*b) {
                    let cols = self.shape(*b)[0];
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b), true, &mut da, 0.0);
                    self.accumulate(grads, *a, da)?;
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, gd, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if wants(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.transposed()?.into_data())?;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec())?,
            Op::Slice { src, axis, start } => {
                if wants(*src) {
                    let shape = self.shape(*src);
                    let (outer, dim, inner) = axis_extents(shape, *axis);
                    let width = node.value.shape()[*axis];
                    let mut d = vec![0.0; outer * dim * inner];
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        d[dst..dst + width * inner]
                            .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                    }
                    self.accumulate(grads, *src, d)?;
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[*axis];
                    if wants(*p) {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + w * inner]);
                        }
                        self.accumulate(grads, *p, d)?;
                    }
                    offset += w;
                }
            }
            Op::Sum { src, axis } | Op::Mean { src, axis } => {
                if wants(*src) {
                    let (outer, dim, inner) = axis_extents(self.shape(*src), *axis);
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / dim as f64
                    } else {
                        1.0
                    };
                    let mut d = vec![0.0; outer * dim * inner];
                    for o in 0..outer {
                        for k in 0..dim {
                            for i in 0..inner {
                                d[(o * dim + k) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    self.accumulate(grads, *src, d)?;
                }
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n])?;
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n])?;
            }
            Op::Softmax { src, axis } => {
                if wants(*src) {
                    let y = node.value.data();
                    let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * dim + k) * inner + i;
                            let dot: f64 = (0..dim).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..dim {
                                d[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(grads, *src, d)?;
                }
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Sqrt(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Exp(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(grads, *a, d)?;
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * c).collect())?;
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec())?,
            Op::DivScalar(a, s) => {
                let sv = val(*s)[0];
                if wants(*a) {
                    self.accumulate(grads, *a, gd.iter().map(|g| g / sv).collect())?;
                }
                if wants(*s) {
                    let ds: f64 = gd
                        .iter()
                        .zip(val(*a))
                        .map(|(g, x)| -g * x / (sv * sv))
                        .sum();
                    self.accumulate(grads, *s, vec![ds])?;
                }
            }
            Op::Norm(cache) => self.backprop_norm(cache, gd, grads)?,
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = 2.0 * gd[0] / av.len().max(1) as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if wants(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect())?;
                }
                self.accumulate(grads, *a, da)?;
            }
        }
        Ok(())
    }

    fn backprop_norm(&self, c: &NormCache, gd: &[f64], grads: &mut [Option<Tensor>]) -> Result<()> {
        let shape = self.shape(c.src);
        let (rows, cols) = (shape[0], shape[1]);
        let gamma = self.value(c.gamma).data();

        if self.nodes[c.gamma.0].requires_grad || self.nodes[c.beta.0].requires_grad {
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for (i, (&g, &xh)) in gd.iter().zip(&c.xhat).enumerate() {
                dgamma[i % cols] += g * xh;
                dbeta[i % cols] += g;
            }
            self.accumulate(grads, c.gamma, dgamma)?;
            self.accumulate(grads, c.beta, dbeta)?;
        }
        if !self.nodes[c.src.0].requires_grad {
            return Ok(());
        }

        let dxhat: Vec<f64> = gd
            .iter()
            .enumerate()
            .map(|(i, g)| g * gamma[i % cols])
            .collect();
        let mut dx = vec![0.0; dxhat.len()];
        if !c.batch_stats {
            for (i, d) in dx.iter_mut().enumerate() {
                *d = dxhat[i] * c.inv_std[i % cols];
            }
        } else {
            // Group g holds the elements sharing one mean/variance.
            let (groups, size) = if c.per_row {
                (rows, cols)
            } else {
                (cols, rows)
            };
            let index = |grp: usize, j: usize| {
                if c.per_row {
                    grp * cols + j
                } else {
                    j * cols + grp
                }
            };
            for grp in 0..groups {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..size {
                    let i = index(grp, j);
                    sum_d += dxhat[i];
                    sum_dx += dxhat[i] * c.xhat[i];
                }
                let k = c.inv_std[grp] / size as f64;
                for j in 0..size {
                    let i = index(grp, j);
                    dx[i] = k * (size as f64 * dxhat[i] - sum_d - c.xhat[i] * sum_dx);
                }
            }
        }
        self.accumulate(grads, c.src, dx)
    }
}
