//! Fused SimAM refinement `y = x * sigmoid(1 / e*)` over `(N, C, S, T)` maps.
//!
//! Per channel with `M` neurons, centred values `c = x - mean` and
//! `SS = sum c^2`:
//! `1/e* = 1/2 + a c^2 / (4 (v + lambda))`, `v = (SS - b c^2) / D`,
//! where leave-one-out statistics use `a = k^2, b = k, D = M - 1` with
//! `k = M / (M - 1)`, and pooled statistics use `a = 1, b = 0, D = M`.

use super::graph::{GradBuf, Graph, Node, Op, Var};
use super::ops::sigmoid;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Coeffs {
    a: f64,
    b: f64,
    d: f64,
}

fn coeffs(m: usize, leave_one_out: bool) -> Coeffs {
    let mf = m as f64;
    if leave_one_out {
        let k = mf / (mf - 1.0);
        Coeffs { a: k * k, b: k, d: mf - 1.0 }
    } else {
        Coeffs { a: 1.0, b: 0.0, d: mf }
    }
}

/// Centred values and sum of squares of one channel.
fn centre(ch: &[f64]) -> (Vec<f64>, f64) {
    let mean = ch.iter().sum::<f64>() / ch.len() as f64;
    let c: Vec<f64> = ch.iter().map(|v| v - mean).collect();
    let ss = c.iter().map(|v| v * v).sum();
    (c, ss)
}

fn validate(shape: &[usize], lambda: f64) -> Result<usize> {
    if shape.len() != 4 {
        return Err(Error::shape("simam", format!("expected (N, C, S, T), got {shape:?}")));
    }
    let m = shape[2] * shape[3];
    if m < 2 {
        return Err(Error::shape("simam", format!("need at least 2 neurons per channel, got {shape:?}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("simam lambda must be positive, got {lambda}")));
    }
    Ok(m)
}

/// `1 / e*` for every neuron of `x`.
pub fn inverse_energy(x: &Tensor, lambda: f64, leave_one_out: bool) -> Result<Tensor> {
    let m = validate(x.shape(), lambda)?;
    let k = coeffs(m, leave_one_out);
    let mut out = vec![0.0; x.numel()];
    for (ch, o) in x.data().chunks(m).zip(out.chunks_mut(m)) {
        let (c, ss) = centre(ch);
        for (oi, &ci) in o.iter_mut().zip(&c) {
            let w = (ss - k.b * ci * ci) / k.d + lambda;
            *oi = 0.5 + k.a * ci * ci / (4.0 * w);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl Graph {
    /// SimAM attention; `leave_one_out` selects statistics over the other
    /// neurons of the channel instead of all of them.
    pub fn simam(&self, x: Var, lambda: f64, leave_one_out: bool) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let u = inverse_energy(&tx, lambda, leave_one_out)?;
            let data = tx.data().iter().zip(u.data()).map(|(&xv, &uv)| xv * sigmoid(uv)).collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        self.push(out, Op::Simam { x, lambda, leave_one_out }, self.any_grad(&[x]))
    }
}

pub(crate) fn backward(node: &Node, gy: &Tensor, buf: &mut GradBuf<'_>) -> Result<()> {
    let Op::Simam { x, lambda, leave_one_out } = node.op else {
        unreachable!("simam backward on another op")
    };
    if !buf.needs(x) {
        return Ok(());
    }
    let tx = &buf.nodes_ref()[x.0].value;
    let m = validate(tx.shape(), lambda)?;
    let k = coeffs(m, leave_one_out);
    let mf = m as f64;
    let xd = tx.data();
    let g = gy.data();
    let slot = buf.slot(x);
    for (start, ch) in (0..xd.len()).step_by(m).zip(xd.chunks(m)) {
        let (c, ss) = centre(ch);
        let mut qa = vec![0.0; m];
        let (mut sum_qa, mut sum_qb) = (0.0, 0.0);
        let mut s = vec![0.0; m];
        for i in 0..m {
            let ci = c[i];
            let w = (ss - k.b * ci * ci) / k.d + lambda;
            let u = 0.5 + k.a * ci * ci / (4.0 * w);
            s[i] = sigmoid(u);
            let q = g[start + i] * ch[i] * s[i] * (1.0 - s[i]);
            let du_dc = k.a * ci / (2.0 * w) + k.a * k.b * ci * ci * ci / (2.0 * k.d * w * w);
            let du_dss = -k.a * ci * ci / (4.0 * k.d * w * w);
            qa[i] = q * du_dc;
            sum_qa += qa[i];
            sum_qb += q * du_dss;
        }
        for j in 0..m {
            slot[start + j] += g[start + j] * s[j] + qa[j] - sum_qa / mf + 2.0 * c[j] * sum_qb;
        }
    }
    Ok(())
}
