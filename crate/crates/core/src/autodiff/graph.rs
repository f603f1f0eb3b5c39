//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] visits it once, in reverse.

use crate::autodiff::tensor::{binary_map, broadcast_shape, gemm, sum_to, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `mul * x + add`
    Affine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    BroadcastTo(usize),
    Sum(usize),
    SumAxis(usize),
    Mean(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SqDist(usize, usize),
    LogSoftmaxRows(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// With gradients disabled every new leaf is a constant, so nothing
    /// downstream is differentiated.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
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

    fn binary(&mut self, op: &'static str, a: Var, b: Var, mk: fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = binary_map(op, self.value(a), self.value(b), f)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, mk(a.0, b.0), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(value, op, rg)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    /// `mul * a + add`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).map(|x| mul * x + add);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Affine(a.0, mul), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, 1.0, c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need parts and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
        if dims.iter().any(|&(r, c)| if axis == 0 { c } else { r } != fixed) {
            return Err(Error::shape("concat", format!("incompatible parts {dims:?}")));
        }
        let value = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * fixed);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, fixed, data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(fixed * cols);
            for i in 0..fixed {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(fixed, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat(ids, axis), rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a rank-2 tensor starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {r}x{c}", start + len),
            ));
        }
        let src = self.value(a).data();
        let value = if axis == 0 {
            Tensor::matrix(len, c, src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Slice { input: a.0, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        match broadcast_shape(src.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} -> {shape:?}", src.shape()),
                ))
            }
        }
        let value = binary_map("broadcast", &Tensor::zeros(shape), src, |_, y| y)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::BroadcastTo(a.0), rg))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// Sums a rank-2 tensor along `axis`, keeping it as a length-1 axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += src[i * c + j];
                    }
                }
                Tensor::matrix(1, c, out)?
            }
            1 => Tensor::matrix(r, 1, src.chunks(c.max(1)).take(r).map(|row| row.iter().sum()).collect())?,
            _ => return Err(Error::shape("sum_axis", format!("axis {axis}"))),
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::SumAxis(a.0), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Mean(a.0), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    /// `ln(sigmoid(a))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a.0), log_sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log; fails on any non-positive entry.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(a).data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::LogDomain { value, index });
        }
        Ok(self.unary(a, Op::Log(a.0), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient vanishes outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Squared Euclidean distances between the rows of `a` (`n x d`) and the
    /// rows of `b` (`m x d`), as an `n x m` tensor.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::shape("sqdist", format!("{n}x{d} vs {m}x{d2}")));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for j in 0..m {
                let yj = &y[j * d..(j + 1) * d];
                out[i * m + j] = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::SqDist(a.0, b.0), rg))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::LogSoftmaxRows(a.0), rg))
    }

    /// Reverse pass from a one-element `loss`. Every trainable leaf receives
    /// a gradient, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, g, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn propagate(&self, idx: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        let elementwise = |f: &dyn Fn(f64, f64) -> f64, x: &Tensor| -> Tensor {
            Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect(),
            )
            .expect("same shape")
        };
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, sum_to(g.clone(), self.val(a).shape()));
                self.accumulate(grads, b, sum_to(g, self.val(b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, sum_to(g.clone(), self.val(a).shape()));
                self.accumulate(grads, b, sum_to(g.map(|v| -v), self.val(b).shape()));
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = binary_map("mul", &g, self.val(b), |x, y| x * y)?;
                    self.accumulate(grads, a, sum_to(ga, self.val(a).shape()));
                }
                if self.nodes[b].requires_grad {
                    let gb = binary_map("mul", &g, self.val(a), |x, y| x * y)?;
                    self.accumulate(grads, b, sum_to(gb, self.val(b).shape()));
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = binary_map("div", &g, self.val(b), |x, y| x / y)?;
                    self.accumulate(grads, a, sum_to(ga, self.val(a).shape()));
                }
                if self.nodes[b].requires_grad {
                    // d(a/b)/db = -out / b
                    let go = binary_map("mul", &g, out, |x, y| -x * y)?;
                    let gb = binary_map("div", &go, self.val(b), |x, y| x / y)?;
                    self.accumulate(grads, b, sum_to(gb, self.val(b).shape()));
                }
            }
            Op::Affine(a, mul) => self.accumulate(grads, a, g.map(|v| v * mul)),
            Op::MatMul(a, b) => {
                let (m, k) = self.val(a).dims2()?;
                let n = out.dims2()?.1;
                if self.nodes[a].requires_grad {
                    // g (m x n) @ b^T (n x k)
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n, 1, self.val(b).data(), 1, n, 0.0, &mut ga);
                    self.accumulate(grads, a, Tensor::matrix(m, k, ga)?);
                }
                if self.nodes[b].requires_grad {
                    // a^T (k x m) @ g (m x n)
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.val(a).data(), 1, k, g.data(), n, 1, 0.0, &mut gb);
                    self.accumulate(grads, b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            Op::Concat(ref ids, axis) => {
                let (rows, cols) = g.dims2()?;
                let mut offset = 0;
                for &p in ids {
                    let (r, c) = self.val(p).dims2()?;
                    if self.nodes[p].requires_grad {
                        let data = if axis == 0 {
                            g.data()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut data = Vec::with_capacity(r * c);
                            for i in 0..rows {
                                data.extend_from_slice(&g.data()[i * cols + offset..i * cols + offset + c]);
                            }
                            data
                        };
                        self.accumulate(grads, p, Tensor::matrix(r, c, data)?);
                    }
                    offset += if axis == 0 { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                if !self.nodes[input].requires_grad {
                    return Ok(());
                }
                let (r, c) = self.val(input).dims2()?;
                let (gr, gc) = g.dims2()?;
                // accumulate in place; slices of one input are frequent
                let full = grads[input].get_or_insert_with(|| Tensor::zeros(&[r, c]));
                let fd = full.data_mut();
                for i in 0..gr {
                    let (row, col) = if axis == 0 { (start + i, 0) } else { (i, start) };
                    let dst = &mut fd[row * c + col..row * c + col + gc];
                    for (d, v) in dst.iter_mut().zip(&g.data()[i * gc..(i + 1) * gc]) {
                        *d += v;
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                self.accumulate(grads, a, g.reshaped(shape)?);
            }
            Op::BroadcastTo(a) => self.accumulate(grads, a, sum_to(g, self.val(a).shape())),
            Op::Sum(a) => {
                let gv = g.item()?;
                self.accumulate(grads, a, Tensor::full(self.val(a).shape(), gv));
            }
            Op::SumAxis(a) => {
                let shape = self.val(a).shape().to_vec();
                let gb = binary_map("sum_axis", &Tensor::zeros(&shape), &g, |_, y| y)?;
                self.accumulate(grads, a, gb);
            }
            Op::Mean(a) => {
                let x = self.val(a);
                let gv = g.item()? / x.numel() as f64;
                self.accumulate(grads, a, Tensor::full(x.shape(), gv));
            }
            Op::Tanh(a) => self.accumulate(grads, a, elementwise(&|gv, y| gv * (1.0 - y * y), out)),
            Op::Sigmoid(a) => self.accumulate(grads, a, elementwise(&|gv, y| gv * y * (1.0 - y), out)),
            Op::LogSigmoid(a) => {
                self.accumulate(grads, a, elementwise(&|gv, x| gv * sigmoid(-x), self.val(a)))
            }
            Op::Exp(a) => self.accumulate(grads, a, elementwise(&|gv, y| gv * y, out)),
            Op::Log(a) => self.accumulate(grads, a, elementwise(&|gv, x| gv / x, self.val(a))),
            Op::Square(a) => self.accumulate(grads, a, elementwise(&|gv, x| 2.0 * gv * x, self.val(a))),
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                a,
                elementwise(&|gv, x| if x >= lo && x <= hi { gv } else { 0.0 }, self.val(a)),
            ),
            Op::SqDist(a, b) => {
                let (n, d) = self.val(a).dims2()?;
                let m = self.val(b).dims2()?.0;
                let (x, y) = (self.val(a).data(), self.val(b).data());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g.data()[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for q in 0..d {
                            let diff = w * (x[i * d + q] - y[j * d + q]);
                            ga[i * d + q] += diff;
                            gb[j * d + q] -= diff;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::matrix(n, d, ga)?);
                self.accumulate(grads, b, Tensor::matrix(m, d, gb)?);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let mut gx = g.data().to_vec();
                for i in 0..r {
                    let row = &mut gx[i * c..(i + 1) * c];
                    let total: f64 = row.iter().sum();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= out.data()[i * c + j].exp() * total;
                    }
                }
                self.accumulate(grads, a, Tensor::matrix(r, c, gx)?);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
