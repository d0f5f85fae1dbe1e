//! Plug-in refinements of a `(N, C, S, T)` feature map.

use rand::Rng;

use crate::autodiff::{simam_inverse_energy, Binder, Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SIMAM_LAMBDA: f64 = 1e-4;

fn check_map(g: &Graph, x: Var, op: &'static str) -> Result<Vec<usize>> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected (N, C, S, T), got {s:?}")));
    }
    Ok(s)
}

fn bottleneck(channels: usize, reduction: usize, op: &str) -> Result<usize> {
    if reduction == 0 || channels < reduction || channels % reduction != 0 {
        return Err(Error::invalid(format!("{op}: {channels} channels cannot be reduced by {reduction}")));
    }
    Ok(channels / reduction)
}

/// Squeeze-and-excitation: per-channel gates from channel means.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = bottleneck(channels, reduction, "se")?;
        Ok(SqueezeExcite {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
        })
    }

    /// Channel means `(N, C)`.
    pub fn squeeze(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let g = p.graph();
        let s = check_map(g, x, "se")?;
        let e = g.mean_axes(x, &[2, 3])?;
        g.reshape(e, &[s[0], s[1]])
    }

    /// Gates `(N, C, 1, 1)` in (0, 1).
    pub fn gates(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let g = p.graph();
        let s = check_map(g, x, "se")?;
        let e = self.squeeze(p, x)?;
        let h = g.relu(self.fc1.forward(p, e)?)?;
        let w = g.sigmoid(self.fc2.forward(p, h)?)?;
        g.reshape(w, &[s[0], s[1], 1, 1])
    }

    pub fn forward(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let w = self.gates(p, x)?;
        p.graph().mul(x, w)
    }
}

/// Channel attention followed by frequency-temporal attention.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction, "cbam")?;
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("cbam spatial kernel must be odd, got {kernel}")));
        }
        Ok(Cbam {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
            spatial: Conv2d::new(store, &format!("{name}.spatial"), 2, 1, (kernel, kernel), (kernel / 2, kernel / 2), false, rng),
        })
    }

    fn mlp(&self, p: &Binder<'_>, d: Var) -> Result<Var> {
        let h = p.graph().relu(self.fc1.forward(p, d)?)?;
        self.fc2.forward(p, h)
    }

    /// `M_c`, shape `(N, C, 1, 1)`.
    pub fn channel_map(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let g = p.graph();
        let s = check_map(g, x, "cbam")?;
        let avg = g.reshape(g.mean_axes(x, &[2, 3])?, &[s[0], s[1]])?;
        let max = g.reshape(g.max_axes(x, &[2, 3])?, &[s[0], s[1]])?;
        let z = g.add(self.mlp(p, avg)?, self.mlp(p, max)?)?;
        g.reshape(g.sigmoid(z)?, &[s[0], s[1], 1, 1])
    }

    /// `M_ft`, shape `(N, 1, S, T)`.
    pub fn spatial_map(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let g = p.graph();
        check_map(g, x, "cbam")?;
        let avg = g.mean_axes(x, &[1])?;
        let max = g.max_axes(x, &[1])?;
        let d = g.concat(&[avg, max], 1)?;
        g.sigmoid(self.spatial.forward(p, d)?)
    }

    pub fn forward(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        let g = p.graph();
        let x1 = g.mul(x, self.channel_map(p, x)?)?;
        g.mul(x1, self.spatial_map(p, x1)?)
    }
}

/// Which statistics SimAM compares each neuron against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimamStats {
    /// Mean and variance of the other `M - 1` neurons of the channel.
    LeaveOneOut,
    /// Mean and variance over all `M` neurons of the channel.
    Pooled,
}

/// Parameter-free per-neuron attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Simam {
    pub lambda: f64,
    pub stats: SimamStats,
}

impl Default for Simam {
    fn default() -> Self {
        Simam { lambda: DEFAULT_SIMAM_LAMBDA, stats: SimamStats::LeaveOneOut }
    }
}

impl Simam {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.simam(x, self.lambda, self.stats == SimamStats::LeaveOneOut)
    }

    /// Minimal energies `e*` of a `(N, C, S, T)` map.
    pub fn energy(&self, x: &Tensor) -> Result<Tensor> {
        let u = simam_inverse_energy(x, self.lambda, self.stats == SimamStats::LeaveOneOut)?;
        Tensor::new(x.shape().to_vec(), u.data().iter().map(|v| 1.0 / v).collect())
    }

    /// Attention weights `sigmoid(1 / e*)`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let u = simam_inverse_energy(x, self.lambda, self.stats == SimamStats::LeaveOneOut)?;
        Tensor::new(x.shape().to_vec(), u.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect())
    }
}

/// Attention variant configured for every residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
    Simam,
}

impl AttentionKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttentionKind::None,
            "se" => AttentionKind::Se,
            "cbam" => AttentionKind::Cbam,
            "simam" => AttentionKind::Simam,
            _ => return Err(Error::Config(format!("unknown attention '{s}' (none|se|cbam|simam)"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::Simam => "simam",
        }
    }

    /// Slot each variant works best in.
    pub fn default_position(self) -> AttentionPosition {
        match self {
            AttentionKind::Simam => AttentionPosition::BeforeBn,
            _ => AttentionPosition::AfterBn,
        }
    }
}

/// `BeforeBn`: after the first convolution, before the second BN.
/// `AfterBn`: right after the second BN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPosition {
    BeforeBn,
    AfterBn,
}

impl AttentionPosition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "before_bn" => Ok(AttentionPosition::BeforeBn),
            "after_bn" => Ok(AttentionPosition::AfterBn),
            _ => Err(Error::Config(format!("unknown attention position '{s}' (before_bn|after_bn)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionPosition::BeforeBn => "before_bn",
            AttentionPosition::AfterBn => "after_bn",
        }
    }
}

/// An instantiated attention module.
#[derive(Clone, Debug)]
pub enum Attention {
    None,
    Se(SqueezeExcite),
    Cbam(Cbam),
    Simam(Simam),
}

impl Attention {
    pub fn forward(&self, p: &Binder<'_>, x: Var) -> Result<Var> {
        match self {
            Attention::None => Ok(x),
            Attention::Se(m) => m.forward(p, x),
            Attention::Cbam(m) => m.forward(p, x),
            Attention::Simam(m) => m.forward(p.graph(), x),
        }
    }
}
