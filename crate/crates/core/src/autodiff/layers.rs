//! Parameterised building blocks composed from graph ops.

use rand::Rng;

use super::graph::Var;
use super::param::{Binder, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[out_dim, in_dim], -bound, bound, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], -bound, bound, rng), true));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| p.var(b));
        p.graph().linear(x, p.var(self.weight), b)
    }
}

/// Stride-1 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, kernel.0, kernel.1], -bound, bound, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[cout], -bound, bound, rng), true));
        Conv2d { weight, bias, pad }
    }

    pub fn forward(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| p.var(b));
        p.graph().conv2d(x, p.var(self.weight), b, self.pad)
    }
}

/// Standard GRU cell (update, reset and candidate gates).
///
/// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(W_iz x + b_iz + W_hz h + b_hz)`,
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_r: Linear,
    pub input_z: Linear,
    pub input_n: Linear,
    pub hidden_r: Linear,
    pub hidden_z: Linear,
    pub hidden_n: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        // PyTorch-style init: U(-1/sqrt(hidden), 1/sqrt(hidden)) for every gate.
        let mut lin = |suffix: &str, fan: usize| {
            let bound = 1.0 / (hidden as f64).sqrt();
            let weight = store.add(format!("{name}.{suffix}.weight"), Tensor::uniform(&[hidden, fan], -bound, bound, rng), true);
            let bias = store.add(format!("{name}.{suffix}.bias"), Tensor::uniform(&[hidden], -bound, bound, rng), true);
            Linear { weight, bias: Some(bias), in_dim: fan, out_dim: hidden }
        };
        GruCell {
            input_r: lin("ir", input),
            input_z: lin("iz", input),
            input_n: lin("in", input),
            hidden_r: lin("hr", hidden),
            hidden_z: lin("hz", hidden),
            hidden_n: lin("hn", hidden),
            hidden,
        }
    }

    pub fn step(&self, p: &Binder<'_>, x: Var, h: Var) -> Result<Var> {
        let g = p.graph();
        let r = g.sigmoid(g.add(self.input_r.forward(p, x)?, self.hidden_r.forward(p, h)?)?)?;
        let z = g.sigmoid(g.add(self.input_z.forward(p, x)?, self.hidden_z.forward(p, h)?)?)?;
        let hn = g.mul(self.hidden_n.forward(p, h)?, r)?;
        let n = g.tanh(g.add(self.input_n.forward(p, x)?, hn)?)?;
        let keep = g.mul(z, h)?;
        let one_minus_z = g.rsub_scalar(1.0, z)?;
        let update = g.mul(one_minus_z, n)?;
        g.add(update, keep)
    }

    /// Runs the cell over `xs` (each `(N, input)`) from a zero state; returns the final hidden state.
    pub fn run(&self, p: &Binder<'_>, xs: &[Var]) -> Result<Var> {
        let g = p.graph();
        let first = xs.first().ok_or_else(|| Error::invalid("GRU over an empty sequence"))?;
        let n = g.shape(*first)[0];
        let mut h = g.constant(Tensor::zeros(&[n, self.hidden]));
        for &x in xs {
            h = self.step(p, x, h)?;
        }
        Ok(h)
    }
}
