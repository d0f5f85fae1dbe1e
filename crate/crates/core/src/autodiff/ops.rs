//! Elementwise, broadcasting, reduction and shape ops.

use super::graph::{GradBuf, Graph, Op, Unary, Var};
use super::nn;
use super::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

pub(crate) const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub(crate) const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Calls `f(ia, ib)` for every flat index `ia` of `a_shape` with `ib` the
/// matching flat index into `b_shape`, where each dim of `b_shape` either
/// equals the one in `a_shape` or is 1 (broadcast).
pub(crate) fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = a_shape.len();
    let total = numel(a_shape);
    if total == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0);
        return;
    }
    let bs = strides(b_shape);
    let bstr: Vec<usize> =
        (0..nd).map(|d| if b_shape[d] == 1 { 0 } else { bs[d] }).collect();
    let inner = a_shape[nd - 1];
    let inner_stride = bstr[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut ia = 0;
    let mut ib_base = 0;
    while ia < total {
        let mut ib = ib_base;
        for _ in 0..inner {
            f(ia, ib);
            ia += 1;
            ib += inner_stride;
        }
        // advance the odometer over dims 0..nd-1
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ib_base += bstr[d];
            if idx[d] < a_shape[d] {
                break;
            }
            ib_base -= bstr[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")));
    }
    Ok(())
}

impl Graph {
    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        check_broadcast(op, ta.shape(), tb.shape())?;
        let mut out = Tensor::zeros(ta.shape());
        let (da, db) = (ta.data(), tb.data());
        if ta.shape() == tb.shape() {
            for ((o, x), y) in out.data_mut().iter_mut().zip(da).zip(db) {
                *o = f(*x, *y);
            }
        } else {
            let o = out.data_mut();
            for_each_broadcast(ta.shape(), tb.shape(), |i, j| o[i] = f(da[i], db[j]));
        }
        Ok(out)
    }

    /// `a + b`, with `b` broadcast to `a`'s shape.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), self.any_grad(&[a, b]))
    }

    /// `a - b`, with `b` broadcast to `a`'s shape.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), self.any_grad(&[a, b]))
    }

    /// `a * b`, with `b` broadcast to `a`'s shape.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), self.any_grad(&[a, b]))
    }

    fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let d = tx.data();
            let data: Vec<f64> = match kind {
                Unary::Scale(c) => d.iter().map(|&v| v * c).collect(),
                Unary::AddScalar(c) => d.iter().map(|&v| v + c).collect(),
                Unary::Selu => d.iter().map(|&v| selu(v)).collect(),
                Unary::Sigmoid => d.iter().map(|&v| sigmoid(v)).collect(),
                Unary::Tanh => d.iter().map(|&v| v.tanh()).collect(),
                Unary::Relu => d.iter().map(|&v| v.max(0.0)).collect(),
                Unary::Exp => d.iter().map(|&v| v.exp()).collect(),
                Unary::Ln => d.iter().map(|&v| v.ln()).collect(),
                Unary::Square => d.iter().map(|&v| v * v).collect(),
                Unary::Sqrt => d.iter().map(|&v| v.sqrt()).collect(),
                Unary::Recip => d.iter().map(|&v| 1.0 / v).collect(),
                Unary::Abs => d.iter().map(|&v| v.abs()).collect(),
            };
            Tensor::new(tx.shape().to_vec(), data)?
        };
        self.push(out, Op::Unary(x, kind), self.any_grad(&[x]))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, c)
    }

    pub fn selu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Selu)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn recip(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), self.any_grad(&[x]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let shape = tx.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(Error::shape("narrow", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                data.extend_from_slice(&tx.data()[base..base + len * inner]);
            }
            Tensor::new(out_shape, data)?
        };
        self.push(out, Op::Narrow { x, axis, start }, self.any_grad(&[x]))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?.0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut out_shape = first.clone();
            out_shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(out_shape, data)?
        };
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, self.any_grad(xs))
    }

    /// Gathers rows (entries of axis 0); indices may repeat.
    pub fn index_select(&self, x: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let rows = tx.shape().first().copied().unwrap_or(0);
            let width = if rows == 0 { 0 } else { tx.numel() / rows };
            let mut data = Vec::with_capacity(index.len() * width);
            for &i in index {
                if i >= rows {
                    return Err(Error::shape("index_select", format!("row {i} of {rows}")));
                }
                data.extend_from_slice(&tx.data()[i * width..(i + 1) * width]);
            }
            let mut shape = tx.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(shape, data)?
        };
        self.push(out, Op::IndexSelect { x, index: index.to_vec() }, self.any_grad(&[x]))
    }

    /// Sum of all entries.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.any_grad(&[x]))
    }

    /// Mean of all entries.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let (s, n) = {
            let t = self.value(x);
            (t.data().iter().sum::<f64>(), t.numel())
        };
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x), self.any_grad(&[x]))
    }

    fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
        let mut out = shape.to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape("reduce", format!("axis {a} for {shape:?}")));
            }
            out[a] = 1;
        }
        Ok(out)
    }

    /// Mean over `axes`, keeping reduced dims as size 1.
    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let out_shape = Self::reduced_shape(tx.shape(), axes)?;
            let count = (tx.numel() / numel(&out_shape).max(1)) as f64;
            let mut out = Tensor::zeros(&out_shape);
            let (o, d) = (out.data_mut(), tx.data());
            for_each_broadcast(tx.shape(), &out_shape, |i, j| o[j] += d[i]);
            for v in o.iter_mut() {
                *v /= count;
            }
            out
        };
        self.push(out, Op::ReduceMean(x), self.any_grad(&[x]))
    }

    /// Max over `axes`, keeping reduced dims; ties go to the first maximum.
    pub fn max_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out, argmax) = {
            let tx = self.value(x);
            let out_shape = Self::reduced_shape(tx.shape(), axes)?;
            let mut out = Tensor::full(&out_shape, f64::NEG_INFINITY);
            let mut argmax = vec![0usize; out.numel()];
            let (o, d) = (out.data_mut(), tx.data());
            for_each_broadcast(tx.shape(), &out_shape, |i, j| {
                if d[i] > o[j] {
                    o[j] = d[i];
                    argmax[j] = i;
                }
            });
            (out, argmax)
        };
        self.push(out, Op::ReduceMax { x, argmax }, self.any_grad(&[x]))
    }
}

#[inline]
fn selu(v: f64) -> f64 {
    if v > 0.0 {
        SELU_SCALE * v
    } else {
        SELU_SCALE * SELU_ALPHA * v.exp_m1()
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Accumulates the gradient of a broadcast operand: sums `gy * factor` over
/// broadcast dims into `b`'s slot.
fn acc_broadcast(buf: &mut GradBuf<'_>, b: Var, a_shape: &[usize], gy: &[f64], factor: Option<&[f64]>) {
    let b_shape = buf.value(b).shape().to_vec();
    let slot = buf.slot(b);
    match factor {
        None if b_shape == a_shape => {
            for (s, g) in slot.iter_mut().zip(gy) {
                *s += g;
            }
        }
        Some(f) if b_shape == a_shape => {
            for ((s, g), v) in slot.iter_mut().zip(gy).zip(f) {
                *s += g * v;
            }
        }
        None => for_each_broadcast(a_shape, &b_shape, |i, j| slot[j] += gy[i]),
        Some(f) => for_each_broadcast(a_shape, &b_shape, |i, j| slot[j] += gy[i] * f[i]),
    }
}

pub(crate) fn backward_node(id: usize, gy: &Tensor, buf: &mut GradBuf<'_>) -> Result<()> {
    let nodes = buf_nodes(buf);
    let node = &nodes[id];
    let g = gy.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if buf.needs(a) {
                for (s, v) in buf.slot(a).iter_mut().zip(g) {
                    *s += v;
                }
            }
            if buf.needs(b) {
                let a_shape = nodes[a.0].value.shape();
                if sign < 0.0 {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc_broadcast(buf, b, a_shape, &neg, None);
                } else {
                    acc_broadcast(buf, b, a_shape, g, None);
                }
            }
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if buf.needs(a) {
                let slot = buf.slot(a);
                if ta.shape() == tb.shape() {
                    for ((s, v), w) in slot.iter_mut().zip(g).zip(tb.data()) {
                        *s += v * w;
                    }
                } else {
                    let db = tb.data();
                    for_each_broadcast(ta.shape(), tb.shape(), |i, j| slot[i] += g[i] * db[j]);
                }
            }
            if buf.needs(b) {
                acc_broadcast(buf, b, ta.shape(), g, Some(ta.data()));
            }
        }
        &Op::Unary(x, kind) => {
            if buf.needs(x) {
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                let slot = buf.slot(x);
                for i in 0..g.len() {
                    let (xv, yv) = (xs[i], ys[i]);
                    let d = match kind {
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => 1.0,
                        Unary::Selu => {
                            if xv > 0.0 {
                                SELU_SCALE
                            } else {
                                yv + SELU_SCALE * SELU_ALPHA
                            }
                        }
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => yv,
                        Unary::Ln => 1.0 / xv,
                        Unary::Square => 2.0 * xv,
                        Unary::Sqrt => 0.5 / yv,
                        Unary::Recip => -yv * yv,
                        Unary::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    slot[i] += g[i] * d;
                }
            }
        }
        &Op::Reshape(x) => {
            if buf.needs(x) {
                for (s, v) in buf.slot(x).iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        &Op::Narrow { x, axis, start } => {
            if buf.needs(x) {
                let xshape = nodes[x.0].value.shape();
                let len = node.value.shape()[axis];
                let outer: usize = xshape[..axis].iter().product();
                let inner: usize = xshape[axis + 1..].iter().product();
                let slot = buf.slot(x);
                for o in 0..outer {
                    let base = (o * xshape[axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (s, v) in slot[base..base + len * inner].iter_mut().zip(src) {
                        *s += v;
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let axis = *axis;
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[axis];
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.shape()[axis];
                if buf.needs(v) {
                    let slot = buf.slot(v);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            slot[dst + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::IndexSelect { x, index } => {
            if buf.needs(*x) {
                let width = if index.is_empty() { 0 } else { g.len() / index.len() };
                let slot = buf.slot(*x);
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..width {
                        slot[i * width + k] += g[r * width + k];
                    }
                }
            }
        }
        &Op::Sum(x) | &Op::Mean(x) => {
            if buf.needs(x) {
                let n = nodes[x.0].value.numel();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                let v = g[0] * scale;
                for s in buf.slot(x).iter_mut() {
                    *s += v;
                }
            }
        }
        &Op::ReduceMean(x) => {
            if buf.needs(x) {
                let xshape = nodes[x.0].value.shape();
                let count = (nodes[x.0].value.numel() / node.value.numel().max(1)) as f64;
                let slot = buf.slot(x);
                for_each_broadcast(xshape, node.value.shape(), |i, j| slot[i] += g[j] / count);
            }
        }
        Op::ReduceMax { x, argmax } => {
            if buf.needs(*x) {
                let slot = buf.slot(*x);
                for (j, &i) in argmax.iter().enumerate() {
                    slot[i] += g[j];
                }
            }
        }
        _ => nn::backward_nn(node, gy, buf)?,
    }
    Ok(())
}

fn buf_nodes<'a>(buf: &GradBuf<'a>) -> &'a [super::graph::Node] {
    buf.nodes_ref()
}
