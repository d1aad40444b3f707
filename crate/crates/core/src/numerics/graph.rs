use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, matmul_ordered, ordered_sum, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Softmax slice direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row (over columns / features).
    Row,
    /// Normalize each column (over rows / positions).
    Col,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Matmul(Var, Var),
    MatmulOrdered(Var, Var),
    Transpose(Var),
    Softmax(Var, Axis),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    Tanh(Var),
    Embedding { weight: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation tape.
///
/// A fresh graph is built for every forward pass; nodes are appended in
/// execution order, so the node list is already topologically sorted and
/// [`Graph::backward`] visits each node exactly once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "sub",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "mul",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `[n×d] + [d]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(bias).numel() != d {
            return Err(Error::dimension(
                "add_bias",
                d,
                self.value(bias).numel(),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        let b = self.value(bias).data();
        for i in 0..n {
            for j in 0..d {
                data.push(self.value(x).data()[i * d + j] + b[j]);
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), ng))
    }

    /// Matmul with order-canonical accumulation; see [`matmul_ordered`].
    pub fn matmul_ordered(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_ordered(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulOrdered(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Numerically stable softmax along `axis`; every slice sums to 1.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let out = softmax_forward(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    /// Per-row standardization over the last dimension with epsilon 1e-5,
    /// then `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dimension(
                "layer_norm",
                d,
                format!(
                    "gain {} / bias {}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row);
            for j in 0..d {
                data.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Row lookup: `out[i, :] = weight[ids[i], :]`. Ids must be in range.
    pub fn embedding(&mut self, weight: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.value(weight).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary {
                    id: id as i64,
                    vocab: v,
                });
            }
            data.extend_from_slice(self.value(weight).row(id));
        }
        let out = Tensor::new(vec![ids.len(), h], data)?;
        let ng = self.needs(weight);
        Ok(self.push(
            out,
            Op::Embedding {
                weight,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let (_, d) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (n, dp) = self.value(p).dims2()?;
            if dp != d {
                return Err(Error::dimension("concat_rows", d, dp));
            }
            rows += n;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let (n, _) = self.value(parts[0]).dims2()?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).dims2().map(|(_, d)| d))
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let (np, _) = self.value(p).dims2()?;
                if np != n {
                    return Err(Error::dimension("concat_cols", n, np));
                }
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::dimension("slice_rows", n, start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start, len }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::dimension("slice_cols", d, start + len));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.value(x).data()[i * d + start..i * d + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start, len }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), ng)
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// requires-grad leaf; leaves unreachable from `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // retained for the caller
            }
            let gout = grads[i].take().expect("checked above");
            self.propagate(i, &gout, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are retained, not propagated"),
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = elementwise_product(gout, self.value(*b));
                let db = elementwise_product(gout, self.value(*a));
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, gout.map(|v| v * c));
            }
            Op::AddBias(x, bias) => {
                self.accum(grads, *x, gout.clone());
                let (n, d) = gout.dims2().expect("add_bias output is a matrix");
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gout.data()[i * d + j];
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accum(grads, *bias, Tensor::new(shape, db).expect("bias shape"));
            }
            Op::Matmul(a, b) | Op::MatmulOrdered(a, b) => {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                if self.needs(*a) {
                    let bt = self.value(*b).transpose().expect("matmul operand");
                    let mut da = matmul(gout, &bt).expect("matmul backward");
                    if self.value(*a).shape().len() == 1 {
                        da = Tensor::new(self.value(*a).shape().to_vec(), da.data().to_vec())
                            .expect("shape");
                    }
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose().expect("matmul operand");
                    let db = matmul(&at, gout).expect("matmul backward");
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let da = gout.transpose().expect("transpose backward");
                self.accum(grads, *a, da);
            }
            Op::Softmax(x, axis) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *x, softmax_backward(y, gout, *axis));
            }
            Op::LayerNorm { x, gain, bias } => {
                let (dx, dg, db) =
                    layer_norm_backward(self.value(*x), self.value(*gain), gout);
                self.accum(grads, *x, dx);
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accum(grads, *gain, Tensor::new(gshape, dg).expect("gain shape"));
                self.accum(grads, *bias, Tensor::new(bshape, db).expect("bias shape"));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| g * gelu_derivative(v))
                    .collect();
                let dx = Tensor::new(xv.shape().to_vec(), data).expect("gelu shape");
                self.accum(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&t, &g)| g * (1.0 - t * t))
                    .collect();
                let dx = Tensor::new(y.shape().to_vec(), data).expect("tanh shape");
                self.accum(grads, *x, dx);
            }
            Op::Embedding { weight, ids } => {
                let (v, h) = self.value(*weight).dims2().expect("embedding weight");
                let mut dw = Tensor::zeros(&[v, h]);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        dw.data_mut()[id * h + j] += gout.data()[row * h + j];
                    }
                }
                self.accum(grads, *weight, dw);
            }
            Op::ConcatRows(parts) => {
                let (_, d) = gout.dims2().expect("concat output");
                let mut offset = 0;
                for &p in parts {
                    let (n, _) = self.value(p).dims2().expect("concat part");
                    let data = gout.data()[offset * d..(offset + n) * d].to_vec();
                    let dp = Tensor::new(self.value(p).shape().to_vec(), data).expect("shape");
                    self.accum(grads, p, dp);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = gout.dims2().expect("concat output");
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().expect("concat part");
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(
                            &gout.data()[r * total + offset..r * total + offset + w],
                        );
                    }
                    let dp = Tensor::new(self.value(p).shape().to_vec(), data).expect("shape");
                    self.accum(grads, p, dp);
                    offset += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (_, d) = self.value(*x).dims2().expect("slice input");
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[start * d..(start + len) * d].copy_from_slice(gout.data());
                self.accum(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let (n, d) = self.value(*x).dims2().expect("slice input");
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for r in 0..n {
                    dx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&gout.data()[r * len..(r + 1) * len]);
                }
                self.accum(grads, *x, dx);
            }
            Op::Sum(x) => {
                let g = gout.scalar_value();
                self.accum(grads, *x, self.value(*x).map(|_| g));
            }
            Op::Mean(x) => {
                let g = gout.scalar_value() / self.value(*x).numel() as f64;
                self.accum(grads, *x, self.value(*x).map(|_| g));
            }
        }
    }
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shapes")
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_forward(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut out = vec![0.0; n * d];
    match axis {
        Axis::Row => {
            let mut buf = vec![0.0; d];
            for i in 0..n {
                let row = &x.data()[i * d..(i + 1) * d];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for j in 0..d {
                    buf[j] = (row[j] - max).exp();
                }
                let denom = {
                    let mut terms = buf.clone();
                    ordered_sum(&mut terms)
                };
                for j in 0..d {
                    out[i * d + j] = buf[j] / denom;
                }
            }
        }
        Axis::Col => {
            let mut buf = vec![0.0; n];
            for j in 0..d {
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    max = max.max(x.data()[i * d + j]);
                }
                for i in 0..n {
                    buf[i] = (x.data()[i * d + j] - max).exp();
                }
                let denom = {
                    let mut terms = buf.clone();
                    ordered_sum(&mut terms)
                };
                for i in 0..n {
                    out[i * d + j] = buf[i] / denom;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward(y: &Tensor, gout: &Tensor, axis: Axis) -> Tensor {
    let (n, d) = y.dims2().expect("softmax output");
    let mut dx = vec![0.0; n * d];
    match axis {
        Axis::Row => {
            for i in 0..n {
                let ys = &y.data()[i * d..(i + 1) * d];
                let gs = &gout.data()[i * d..(i + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[i * d + j] = ys[j] * (gs[j] - dot);
                }
            }
        }
        Axis::Col => {
            for j in 0..d {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += y.data()[i * d + j] * gout.data()[i * d + j];
                }
                for i in 0..n {
                    dx[i * d + j] = y.data()[i * d + j] * (gout.data()[i * d + j] - dot);
                }
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("softmax shape")
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, gout: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims2().expect("layer_norm input");
    let g = gain.data();
    let mut dx = vec![0.0; n * d];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let gr = &gout.data()[i * d..(i + 1) * d];
        let (mean, inv_std) = row_moments(row);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = gr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
            dgain[j] += gr[j] * xhat[j];
            dbias[j] += gr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = gr[j] * g[j];
            dx[i * d + j] = inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("layer_norm shape"),
        dgain,
        dbias,
    )
}
