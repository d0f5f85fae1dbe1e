//! Neural-network ops: dense and convolutional layers, pooling,
//! normalisation and the fused classification heads.

use super::gemm::gemm;
use super::graph::{GradBuf, Graph, MarginKind, Node, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-channel statistics of one normalised batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel that contributed.
    pub count: usize,
}

pub(crate) const COS_CLAMP: f64 = 1e-7;

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * hw..(row + 1) * hw];
                // valid output columns: 0 <= ow + kj - pw < w
                let lo = g.pw.saturating_sub(kj).min(g.wo);
                let hi = (g.w + g.pw).saturating_sub(kj).min(g.wo).max(lo);
                for oh in 0..g.ho {
                    let dst = &mut dst_row[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if hi > lo {
                        let src_start = ih as usize * g.w + lo + kj - g.pw;
                        dst[lo..hi].copy_from_slice(&plane[src_start..src_start + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * hw..(row + 1) * hw];
                let lo = g.pw.saturating_sub(kj).min(g.wo);
                let hi = (g.w + g.pw).saturating_sub(kj).min(g.wo).max(lo);
                for oh in 0..g.ho {
                    let ih = (oh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize || hi <= lo {
                        continue;
                    }
                    let dst_start = ih as usize * g.w + lo + kj - g.pw;
                    let src = &src_row[oh * g.wo + lo..oh * g.wo + hi];
                    for (d, s) in plane[dst_start..dst_start + (hi - lo)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need (N, C, ...), got {shape:?}")));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial))
}

impl Graph {
    /// `y = x W^T + b` for `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
                return Err(Error::shape("linear", format!("x {:?}, W {:?}", tx.shape(), tw.shape())));
            }
            let (n, k, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
            let mut out = vec![0.0; n * m];
            if let Some(b) = b {
                let tb = &nodes[b.0].value;
                if tb.shape() != [m] {
                    return Err(Error::shape("linear", format!("bias {:?} for {m} outputs", tb.shape())));
                }
                for row in out.chunks_mut(m) {
                    row.copy_from_slice(tb.data());
                }
            }
            gemm(n, k, m, tx.data(), false, tw.data(), true, &mut out, 1.0);
            Tensor::new(vec![n, m], out)?
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, self.any_grad(&inputs))
    }

    /// Stride-1 2-D convolution of `x: (N, Cin, H, W)` with `W: (Cout, Cin, kh, kw)`,
    /// zero padding `pad = (ph, pw)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, pad: (usize, usize)) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = conv_geom(tx.shape(), tw.shape(), pad)?;
            let bias = match b {
                Some(b) => {
                    let tb = &nodes[b.0].value;
                    if tb.shape() != [geom.cout] {
                        return Err(Error::shape("conv2d", format!("bias {:?}", tb.shape())));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let hw = geom.hw_out();
            let mut out = vec![0.0; geom.n * geom.cout * hw];
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; geom.k() * hw] };
            let x_stride = geom.cin * geom.h * geom.w;
            for n in 0..geom.n {
                let xn = &tx.data()[n * x_stride..(n + 1) * x_stride];
                let yn = &mut out[n * geom.cout * hw..(n + 1) * geom.cout * hw];
                if let Some(bd) = bias {
                    for (co, row) in yn.chunks_mut(hw).enumerate() {
                        row.fill(bd[co]);
                    }
                }
                let rhs: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(&geom, xn, &mut cols);
                    &cols
                };
                gemm(geom.cout, geom.k(), hw, tw.data(), false, rhs, false, yn, 1.0);
            }
            Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, pad }, self.any_grad(&inputs))
    }

    /// Valid 1-D convolution of `x: (N, Cin, L)` with `W: (Cout, Cin, K)`.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("x {xs:?}, W {ws:?}")));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(x4, w4, b, (0, 0))?;
        let ys = self.shape(y);
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Non-overlapping max pooling with stride equal to the kernel (floor mode).
    pub fn max_pool2d(&self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let (out, argmax) = {
            let tx = self.value(x);
            let s = tx.shape();
            let (kh, kw) = kernel;
            if s.len() != 4 || kh == 0 || kw == 0 || s[2] < kh || s[3] < kw {
                return Err(Error::shape("max_pool2d", format!("{s:?} with kernel {kernel:?}")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h / kh, w / kw);
            let mut out = vec![0.0; n * c * ho * wo];
            let mut argmax = vec![0usize; out.len()];
            let d = tx.data();
            for p in 0..n * c {
                let base = p * h * w;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for i in 0..kh {
                            let row = base + (oh * kh + i) * w + ow * kw;
                            for j in 0..kw {
                                if d[row + j] > best {
                                    best = d[row + j];
                                    at = row + j;
                                }
                            }
                        }
                        let o = (p * ho + oh) * wo + ow;
                        out[o] = best;
                        argmax[o] = at;
                    }
                }
            }
            (Tensor::new(vec![n, c, ho, wo], out)?, argmax)
        };
        self.push(out, Op::MaxPool2d { x, argmax }, self.any_grad(&[x]))
    }

    /// Adaptive average pooling of `(N, C, H, W)` to `(N, C, out.0, out.1)`.
    pub fn adaptive_avg_pool2d(&self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let s = tx.shape();
            let (oh, ow) = out_hw;
            if s.len() != 4 || oh == 0 || ow == 0 {
                return Err(Error::shape("adaptive_avg_pool2d", format!("{s:?} -> {out_hw:?}")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut out = vec![0.0; n * c * oh * ow];
            let d = tx.data();
            for p in 0..n * c {
                for i in 0..oh {
                    let (h0, h1) = adaptive_range(i, h, oh);
                    for j in 0..ow {
                        let (w0, w1) = adaptive_range(j, w, ow);
                        let mut acc = 0.0;
                        for r in h0..h1 {
                            for q in w0..w1 {
                                acc += d[p * h * w + r * w + q];
                            }
                        }
                        out[(p * oh + i) * ow + j] = acc / ((h1 - h0) * (w1 - w0)) as f64;
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], out)?
        };
        self.push(out, Op::AdaptiveAvgPool2d(x), self.any_grad(&[x]))
    }

    /// Normalises each channel of `x: (N, C, ...)` with its batch statistics,
    /// then applies the per-channel affine `gamma`, `beta`.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (out, stats, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (n, c, spatial) = channel_layout(tx.shape(), "batch_norm")?;
            let count = n * spatial;
            if n == 0 || count == 0 {
                return Err(Error::invalid("batch norm over an empty batch"));
            }
            let (g, b) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            if g.len() != c || b.len() != c {
                return Err(Error::shape("batch_norm", format!("{c} channels, gamma {}, beta {}", g.len(), b.len())));
            }
            let d = tx.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let blk = &d[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                    mean[ch] += blk.iter().sum::<f64>();
                }
            }
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
            for i in 0..n {
                for ch in 0..c {
                    let blk = &d[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                    var[ch] += blk.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                }
            }
            for v in var.iter_mut() {
                *v /= count as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let out = affine_normalize(tx, &mean, &inv_std, g, b);
            (out, BatchStats { mean, var, count }, inv_std)
        };
        let mean = stats.mean.clone();
        let v = self.push(
            out,
            Op::BatchNormTrain { x, gamma, beta, mean, inv_std },
            self.any_grad(&[x, gamma, beta]),
        )?;
        Ok((v, stats))
    }

    /// Normalises with fixed (running) statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (out, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (_, c, _) = channel_layout(tx.shape(), "batch_norm")?;
            let (g, b) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", format!("{c} channels vs parameter size {}", g.len())));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (affine_normalize(tx, mean, &inv_std, g, b), inv_std)
        };
        self.push(
            out,
            Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std },
            self.any_grad(&[x, gamma, beta]),
        )
    }

    /// Scales each row of `x: (N, D)` to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let tx = self.value(x);
            if tx.ndim() != 2 {
                return Err(Error::shape("l2_normalize", format!("{:?}", tx.shape())));
            }
            let d = tx.shape()[1];
            let mut out = tx.data().to_vec();
            let mut norms = Vec::with_capacity(tx.shape()[0]);
            for row in out.chunks_mut(d.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(Error::invalid("cannot L2-normalise a zero-norm vector"));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (Tensor::new(tx.shape().to_vec(), out)?, norms)
        };
        self.push(out, Op::L2Normalize { x, norms }, self.any_grad(&[x]))
    }

    /// `mean_i  w[y_i] * -log softmax(logits_i)[y_i]`.
    pub fn weighted_cross_entropy(&self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let (loss, probs) = {
            let tl = self.value(logits);
            if tl.ndim() != 2 || tl.shape()[0] != labels.len() {
                return Err(Error::shape("weighted_ce", format!("logits {:?}, {} labels", tl.shape(), labels.len())));
            }
            let (n, c) = (tl.shape()[0], tl.shape()[1]);
            if n == 0 {
                return Err(Error::invalid("cross-entropy over an empty batch"));
            }
            if class_weights.len() != c || labels.iter().any(|&y| y >= c) {
                return Err(Error::invalid(format!("labels/weights inconsistent with {c} classes")));
            }
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for i in 0..n {
                let row = &tl.data()[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
                loss += class_weights[labels[i]] * (lse - row[labels[i]]);
            }
            (loss / n as f64, probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe { logits, labels: labels.to_vec(), weights: class_weights.to_vec(), probs },
            self.any_grad(&[logits]),
        )
    }

    /// Builds margin logits from a `(N, 2)` cosine matrix: the non-target
    /// entry becomes `s cos`, the target entry is transformed per `kind` with
    /// the margin of the sample's own class.
    pub fn angular_margin(&self, cos: Var, labels: &[usize], margins: [f64; 2], scale: f64, kind: MarginKind) -> Result<Var> {
        let out = {
            let tc = self.value(cos);
            if tc.ndim() != 2 || tc.shape()[1] != 2 || tc.shape()[0] != labels.len() {
                return Err(Error::shape("angular_margin", format!("cos {:?}, {} labels", tc.shape(), labels.len())));
            }
            if labels.iter().any(|&y| y > 1) {
                return Err(Error::invalid("binary labels expected"));
            }
            let mut out = tc.data().to_vec();
            for (i, &y) in labels.iter().enumerate() {
                for j in 0..2 {
                    let c = out[i * 2 + j];
                    out[i * 2 + j] = if j == y { scale * margin_target(c, margins[y], kind) } else { scale * c };
                }
            }
            Tensor::new(tc.shape().to_vec(), out)?
        };
        self.push(
            out,
            Op::AngularMargin { cos, labels: labels.to_vec(), margins, scale, kind },
            self.any_grad(&[cos]),
        )
    }
}

/// Target-class transform of one cosine (without the scale).
pub(crate) fn margin_target(c: f64, m: f64, kind: MarginKind) -> f64 {
    match kind {
        MarginKind::Normalized => c,
        MarginKind::Additive => c - m,
        MarginKind::Angular => {
            // past theta = pi - m, cos(theta + m) would turn back upwards
            if c <= -m.cos() {
                return c + m.cos() - 1.0;
            }
            let sin = (1.0 - c * c).max(0.0).sqrt();
            c * m.cos() - sin * m.sin()
        }
    }
}

fn margin_target_grad(c: f64, m: f64, kind: MarginKind) -> f64 {
    match kind {
        MarginKind::Normalized | MarginKind::Additive => 1.0,
        MarginKind::Angular => {
            if c <= -m.cos() {
                return 1.0;
            }
            let c = c.min(1.0 - COS_CLAMP);
            let sin = (1.0 - c * c).sqrt();
            m.cos() + m.sin() * c / sin
        }
    }
}

fn adaptive_range(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn affine_normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = x.shape();
    let c = s[1];
    let spatial: usize = s[2..].iter().product();
    let mut out = x.data().to_vec();
    for (blk_idx, blk) in out.chunks_mut(spatial.max(1)).enumerate() {
        let ch = blk_idx % c;
        let a = inv_std[ch] * gamma[ch];
        let b = beta[ch] - mean[ch] * a;
        blk.iter_mut().for_each(|v| *v = *v * a + b);
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn conv_geom(xs: &[usize], ws: &[usize], pad: (usize, usize)) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", format!("x {xs:?}, W {ws:?}")));
    }
    let (h, w) = (xs[2] + 2 * pad.0, xs[3] + 2 * pad.1);
    if h < ws[2] || w < ws[3] {
        return Err(Error::shape("conv2d", format!("input {xs:?} smaller than kernel {ws:?}")));
    }
    Ok(ConvGeom {
        n: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ph: pad.0,
        pw: pad.1,
        ho: h - ws[2] + 1,
        wo: w - ws[3] + 1,
    })
}

pub(crate) fn backward_nn(node: &Node, gy: &Tensor, buf: &mut GradBuf<'_>) -> Result<()> {
    let nodes = buf.nodes_ref();
    let g = gy.data();
    match &node.op {
        &Op::Linear { x, w, b } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (n, k, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
            if buf.needs(x) {
                gemm(n, m, k, g, false, tw.data(), false, buf.slot(x), 1.0);
            }
            if buf.needs(w) {
                gemm(m, n, k, g, true, tx.data(), false, buf.slot(w), 1.0);
            }
            if let Some(b) = b.filter(|&b| buf.needs(b)) {
                let slot = buf.slot(b);
                for row in g.chunks(m) {
                    for (s, v) in slot.iter_mut().zip(row) {
                        *s += v;
                    }
                }
            }
        }
        &Op::Conv2d { x, w, b, pad } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = conv_geom(tx.shape(), tw.shape(), pad)?;
            let hw = geom.hw_out();
            let kk = geom.k();
            let x_stride = geom.cin * geom.h * geom.w;
            let need_w = buf.needs(w);
            let need_x = buf.needs(x);
            let mut dw = if need_w { vec![0.0; geom.cout * kk] } else { Vec::new() };
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * hw] };
            let mut dcols = if need_x && !geom.is_pointwise() { vec![0.0; kk * hw] } else { Vec::new() };
            for n in 0..geom.n {
                let gn = &g[n * geom.cout * hw..(n + 1) * geom.cout * hw];
                let xn = &tx.data()[n * x_stride..(n + 1) * x_stride];
                if need_w {
                    let rhs: &[f64] = if geom.is_pointwise() {
                        xn
                    } else {
                        im2col(&geom, xn, &mut cols);
                        &cols
                    };
                    gemm(geom.cout, hw, kk, gn, false, rhs, true, &mut dw, 1.0);
                }
                if need_x {
                    let dx = &mut buf.slot(x)[n * x_stride..(n + 1) * x_stride];
                    if geom.is_pointwise() {
                        gemm(kk, geom.cout, hw, tw.data(), true, gn, false, dx, 1.0);
                    } else {
                        gemm(kk, geom.cout, hw, tw.data(), true, gn, false, &mut dcols, 0.0);
                        col2im_add(&geom, &dcols, dx);
                    }
                }
            }
            if need_w {
                for (s, v) in buf.slot(w).iter_mut().zip(&dw) {
                    *s += v;
                }
            }
            if let Some(b) = b.filter(|&b| buf.needs(b)) {
                let slot = buf.slot(b);
                for (blk_idx, blk) in g.chunks(hw).enumerate() {
                    slot[blk_idx % geom.cout] += blk.iter().sum::<f64>();
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if buf.needs(*x) {
                let slot = buf.slot(*x);
                for (o, &i) in argmax.iter().enumerate() {
                    slot[i] += g[o];
                }
            }
        }
        &Op::AdaptiveAvgPool2d(x) => {
            if buf.needs(x) {
                let s = nodes[x.0].value.shape();
                let os = node.value.shape();
                let (h, w, oh, ow) = (s[2], s[3], os[2], os[3]);
                let slot = buf.slot(x);
                for p in 0..s[0] * s[1] {
                    for i in 0..oh {
                        let (h0, h1) = adaptive_range(i, h, oh);
                        for j in 0..ow {
                            let (w0, w1) = adaptive_range(j, w, ow);
                            let v = g[(p * oh + i) * ow + j] / ((h1 - h0) * (w1 - w0)) as f64;
                            for r in h0..h1 {
                                for q in w0..w1 {
                                    slot[p * h * w + r * w + q] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNormTrain { x, gamma, beta, mean, inv_std } | Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let train = matches!(node.op, Op::BatchNormTrain { .. });
            let tx = &nodes[x.0].value;
            let s = tx.shape();
            let (n, c, spatial) = (s[0], s[1], s[2..].iter().product::<usize>());
            let count = (n * spatial) as f64;
            let gam = nodes[gamma.0].value.data();
            let xd = tx.data();
            // per-channel sums of dy and dy * xhat
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * spatial;
                    for k in off..off + spatial {
                        let xhat = (xd[k] - mean[ch]) * inv_std[ch];
                        sum_dy[ch] += g[k];
                        sum_dy_xhat[ch] += g[k] * xhat;
                    }
                }
            }
            if buf.needs(*gamma) {
                for (s, v) in buf.slot(*gamma).iter_mut().zip(&sum_dy_xhat) {
                    *s += v;
                }
            }
            if buf.needs(*beta) {
                for (s, v) in buf.slot(*beta).iter_mut().zip(&sum_dy) {
                    *s += v;
                }
            }
            if buf.needs(*x) {
                let slot = buf.slot(*x);
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        let a = gam[ch] * inv_std[ch];
                        for k in off..off + spatial {
                            if train {
                                let xhat = (xd[k] - mean[ch]) * inv_std[ch];
                                slot[k] += a * (g[k] - sum_dy[ch] / count - xhat * sum_dy_xhat[ch] / count);
                            } else {
                                slot[k] += a * g[k];
                            }
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            if buf.needs(*x) {
                let y = node.value.data();
                let d = node.value.shape()[1];
                let slot = buf.slot(*x);
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        slot[r * d + k] += (gr[k] - yr[k] * dot) / norm;
                    }
                }
            }
        }
        Op::WeightedCe { logits, labels, weights, probs } => {
            if buf.needs(*logits) {
                let n = labels.len();
                let c = probs.len() / n;
                let slot = buf.slot(*logits);
                for (i, &y) in labels.iter().enumerate() {
                    let f = g[0] * weights[y] / n as f64;
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        slot[i * c + j] += f * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::AngularMargin { cos, labels, margins, scale, kind } => {
            if buf.needs(*cos) {
                let cd = nodes[cos.0].value.data();
                let slot = buf.slot(*cos);
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..2 {
                        let d = if j == y { margin_target_grad(cd[i * 2 + j], margins[y], *kind) } else { 1.0 };
                        slot[i * 2 + j] += g[i * 2 + j] * scale * d;
                    }
                }
            }
        }
        Op::Simam { .. } => super::simam::backward(node, gy, buf)?,
        other => unreachable!("no backward rule routed for {}", other.name()),
    }
    Ok(())
}
