//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, MarginKind, Var};
use super::param::{Binder, ParamStore};
use super::layers::GruCell;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 10;

/// Operators covered by [`grad_check`]. Each documents the input layout it expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `(N, in)` -> 3 outputs with bias.
    Linear,
    /// `(N, Cin, L)`, kernel 3, 2 output channels.
    Conv1d,
    /// `(N, Cin, H, W)`, kernel (2, 3), padding (1, 1), 3 output channels.
    Conv2d,
    /// `(N, C, H, W)`, kernel (2, 2).
    MaxPool2d,
    /// `(N, C, H, W)` pooled to `(1, ceil(W / 2))`.
    AdaptiveAvgPool2d,
    /// `(N, C, ...)` with batch statistics.
    BatchNormTrain,
    /// `(N, C, ...)` with fixed statistics.
    BatchNormEval,
    Selu,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Square,
    /// Applied to `x^2 + 0.5`.
    Ln,
    /// Applied to `x^2 + 0.5`.
    Sqrt,
    /// Applied to `x^2 + 0.5`.
    Recip,
    /// `(N, in)`, two recurrent steps with 3 hidden units.
    GruCell,
    /// `(N, D)`
    L2Normalize,
    /// `(N, C, S, T)`, leave-one-out statistics, lambda 1e-4.
    Simam,
    /// Concatenation of `x` and `x^2` on the last axis.
    Concat,
    /// `x * p + q` with `p`, `q` broadcast over axis 1.
    BroadcastAffine,
    /// Mean over the last axis.
    MeanAxes,
    /// Max over the last axis.
    MaxAxes,
    /// `(N, 2)` logits.
    WeightedCe,
    /// `(N, 2)` pre-activations, squashed to cosines by `0.9 tanh`.
    AngularMargin,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Linear,
        OpKind::Conv1d,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::AdaptiveAvgPool2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Selu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Square,
        OpKind::Ln,
        OpKind::Sqrt,
        OpKind::Recip,
        OpKind::GruCell,
        OpKind::L2Normalize,
        OpKind::Simam,
        OpKind::Concat,
        OpKind::BroadcastAffine,
        OpKind::MeanAxes,
        OpKind::MaxAxes,
        OpKind::WeightedCe,
        OpKind::AngularMargin,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Number of sample points tried (>1 when the first landed near a kink).
    pub attempts: usize,
    /// True when every attempt was within `eps` of a non-differentiable point.
    pub kink: bool,
}

/// Max elementwise relative error between analytic and central-difference
/// gradients of the scalar `f(leaves)` with respect to every leaf.
pub fn check_gradients<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).expect("leaf gradient");
        for k in 0..leaf.numel() {
            let orig = leaf.data()[k];
            probe[li].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[li].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[li].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn params_for(op: OpKind, shape: &[usize]) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().fold(0, |a, &d| a * 31 + d as u64));
    let need = |n: usize| -> Result<()> {
        if shape.len() != n {
            return Err(Error::shape("grad_check", format!("{op:?} expects rank {n}, got {shape:?}")));
        }
        Ok(())
    };
    Ok(match op {
        OpKind::Linear => {
            need(2)?;
            vec![Tensor::randn(&[3, shape[1]], 0.7, &mut rng), Tensor::randn(&[3], 0.3, &mut rng)]
        }
        OpKind::Conv1d => {
            need(3)?;
            vec![Tensor::randn(&[2, shape[1], 3], 0.7, &mut rng), Tensor::randn(&[2], 0.3, &mut rng)]
        }
        OpKind::Conv2d => {
            need(4)?;
            vec![Tensor::randn(&[3, shape[1], 2, 3], 0.7, &mut rng), Tensor::randn(&[3], 0.3, &mut rng)]
        }
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            if shape.len() < 2 {
                return Err(Error::shape("grad_check", format!("{op:?} needs (N, C, ...)")));
            }
            vec![Tensor::uniform(&[shape[1]], 0.5, 1.5, &mut rng), Tensor::randn(&[shape[1]], 0.3, &mut rng)]
        }
        OpKind::GruCell => {
            need(2)?;
            vec![Tensor::randn(&[shape[0], 3], 0.5, &mut rng)]
        }
        OpKind::BroadcastAffine => {
            if shape.len() < 2 {
                return Err(Error::shape("grad_check", "BroadcastAffine needs rank >= 2"));
            }
            let mut b = shape.to_vec();
            b[1] = 1;
            vec![Tensor::randn(&b, 1.0, &mut rng), Tensor::randn(&b, 1.0, &mut rng)]
        }
        OpKind::MaxPool2d | OpKind::AdaptiveAvgPool2d | OpKind::Simam => {
            need(4)?;
            vec![]
        }
        OpKind::L2Normalize | OpKind::WeightedCe | OpKind::AngularMargin => {
            need(2)?;
            if matches!(op, OpKind::WeightedCe | OpKind::AngularMargin) && shape[1] != 2 {
                return Err(Error::shape("grad_check", "binary heads need (N, 2)"));
            }
            vec![]
        }
        _ => vec![],
    })
}

fn apply(op: OpKind, g: &Graph, v: &[Var]) -> Result<Var> {
    let x = v[0];
    let shape = g.shape(x);
    Ok(match op {
        OpKind::Linear => g.linear(x, v[1], Some(v[2]))?,
        OpKind::Conv1d => g.conv1d(x, v[1], Some(v[2]))?,
        OpKind::Conv2d => g.conv2d(x, v[1], Some(v[2]), (1, 1))?,
        OpKind::MaxPool2d => g.max_pool2d(x, (2, 2))?,
        OpKind::AdaptiveAvgPool2d => g.adaptive_avg_pool2d(x, (1, shape[3].div_ceil(2)))?,
        OpKind::BatchNormTrain => g.batch_norm_train(x, v[1], v[2], 1e-5)?.0,
        OpKind::BatchNormEval => {
            let c = shape[1];
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64 - 0.2).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
            g.batch_norm_eval(x, v[1], v[2], &mean, &var, 1e-5)?
        }
        OpKind::Selu => g.selu(x)?,
        OpKind::Sigmoid => g.sigmoid(x)?,
        OpKind::Tanh => g.tanh(x)?,
        OpKind::Relu => g.relu(x)?,
        OpKind::Exp => g.exp(x)?,
        OpKind::Square => g.square(x)?,
        OpKind::Ln => g.ln(g.add_scalar(g.square(x)?, 0.5)?)?,
        OpKind::Sqrt => g.sqrt(g.add_scalar(g.square(x)?, 0.5)?)?,
        OpKind::Recip => g.recip(g.add_scalar(g.square(x)?, 0.5)?)?,
        OpKind::GruCell => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let cell = GruCell::new(&mut store, "gru", shape[1], 3, &mut rng);
            let p = Binder::new(&store, g, true);
            let h1 = cell.step(&p, x, v[1])?;
            cell.step(&p, x, h1)?
        }
        OpKind::L2Normalize => g.l2_normalize(x)?,
        OpKind::Simam => g.simam(x, 1e-4, true)?,
        OpKind::Concat => {
            let sq = g.square(x)?;
            g.concat(&[x, sq], shape.len() - 1)?
        }
        OpKind::BroadcastAffine => g.add(g.mul(x, v[1])?, v[2])?,
        OpKind::MeanAxes => g.mean_axes(x, &[shape.len() - 1])?,
        OpKind::MaxAxes => g.max_axes(x, &[shape.len() - 1])?,
        OpKind::WeightedCe => {
            let labels: Vec<usize> = (0..shape[0]).map(|i| i % 2).collect();
            return g.weighted_cross_entropy(x, &labels, &[0.9, 0.1]);
        }
        OpKind::AngularMargin => {
            let labels: Vec<usize> = (0..shape[0]).map(|i| (i + 1) % 2).collect();
            let cos = g.scale(g.tanh(x)?, 0.9)?;
            g.angular_margin(cos, &labels, [0.2, 0.9], 4.0, MarginKind::Angular)?
        }
    })
}

/// Projects an op output onto fixed pseudo-random weights so every output
/// element contributes to the checked scalar.
fn project(g: &Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    if shape.is_empty() {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xabcd);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    g.sum(g.mul(y, w)?)
}

fn near_kink(op: OpKind, x: &Tensor, eps: f64) -> bool {
    let tol = 4.0 * eps;
    let close_pair = |vals: &mut Vec<f64>| {
        vals.sort_by(|a, b| b.total_cmp(a));
        vals.len() > 1 && vals[0] - vals[1] < tol
    };
    match op {
        OpKind::Relu | OpKind::Selu => x.data().iter().any(|v| v.abs() < tol),
        OpKind::MaxAxes => {
            let w = *x.shape().last().unwrap_or(&1);
            x.data().chunks(w.max(1)).any(|row| close_pair(&mut row.to_vec()))
        }
        OpKind::MaxPool2d => {
            let s = x.shape();
            let (h, w) = (s[2], s[3]);
            let d = x.data();
            (0..s[0] * s[1]).any(|p| {
                (0..h / 2).any(|oh| {
                    (0..w / 2).any(|ow| {
                        let mut vals: Vec<f64> = (0..2)
                            .flat_map(|i| (0..2).map(move |j| (i, j)))
                            .map(|(i, j)| d[p * h * w + (oh * 2 + i) * w + ow * 2 + j])
                            .collect();
                        close_pair(&mut vals)
                    })
                })
            })
        }
        _ => false,
    }
}

/// Checks `op` at `input` (plus the op's own parameters) with central
/// differences of step `eps`. Points within `eps` of a kink are resampled by
/// jittering the input, at most 10 times.
pub fn grad_check(op: OpKind, input: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let params = params_for(op, input.shape())?;
    let mut x = input.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b1c);
    let mut attempts = 1;
    while near_kink(op, &x, eps) && attempts < MAX_ATTEMPTS {
        let jitter = Tensor::randn(x.shape(), 0.05, &mut rng);
        for (v, j) in x.data_mut().iter_mut().zip(jitter.data()) {
            *v += j;
        }
        attempts += 1;
    }
    let kink = near_kink(op, &x, eps);
    let mut leaves = vec![x];
    leaves.extend(params);
    let err = check_gradients(|g, v| project(g, apply(op, g, v)?), &leaves, eps)?;
    Ok(GradCheckReport { max_relative_error: err, attempts, kink })
}
