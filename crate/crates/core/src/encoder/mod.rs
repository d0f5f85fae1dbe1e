//! Pre-activation residual encoder over the sinc front-end, GRU aggregation,
//! a 64-unit embedding layer and a bias-free 2-way classifier.

pub mod attention;

use rand::Rng;

use crate::autodiff::{
    Bank, Binder, BnContext, Conv2d, DualBatchNorm, GruCell, Linear, ParamId, ParamStore, RunningStats, Tensor, Var,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::sincfront::{init_mel_filterbank, Magnitude, SincFrontend, DEFAULT_KERNEL_LEN, DEFAULT_NUM_FILTERS, SAMPLE_RATE};

pub use attention::{
    Attention, AttentionKind, AttentionPosition, Cbam, Simam, SimamStats, SqueezeExcite, DEFAULT_SIMAM_LAMBDA,
};

pub const DEFAULT_INPUT_LEN: usize = 64600;
pub const TEST_INPUT_LEN: usize = 6460;
const CONV_KERNEL: (usize, usize) = (2, 3);
const PAD_FIRST: (usize, usize) = (1, 1);
const PAD_SECOND: (usize, usize) = (0, 1);
const TIME_POOL: (usize, usize) = (1, 3);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_len: usize,
    pub num_filters: usize,
    pub kernel_len: usize,
    pub magnitude: Magnitude,
    pub block_channels: Vec<usize>,
    /// Time steps after adaptive pooling; 0 keeps the block output length.
    pub pool_time: usize,
    pub gru_hidden: usize,
    pub embed_dim: usize,
    pub attention: AttentionKind,
    /// `None` picks the variant's default slot.
    pub attention_position: Option<AttentionPosition>,
    pub se_reduction: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub simam_lambda: f64,
    pub simam_stats: SimamStats,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_len: DEFAULT_INPUT_LEN,
            num_filters: DEFAULT_NUM_FILTERS,
            kernel_len: DEFAULT_KERNEL_LEN,
            magnitude: Magnitude::Signed,
            block_channels: vec![32, 32, 64, 64, 64, 64],
            pool_time: 29,
            gru_hidden: 64,
            embed_dim: 64,
            attention: AttentionKind::Simam,
            attention_position: None,
            se_reduction: 8,
            cbam_reduction: 8,
            cbam_kernel: 7,
            simam_lambda: DEFAULT_SIMAM_LAMBDA,
            simam_stats: SimamStats::LeaveOneOut,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl EncoderConfig {
    pub fn position(&self) -> AttentionPosition {
        self.attention_position.unwrap_or_else(|| self.attention.default_position())
    }

    /// Symbolic shape propagation, one `(stage, per-sample shape)` row per
    /// layer, without building a model.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        if self.kernel_len % 2 == 0 {
            return Err(Error::shape("encoder", format!("sinc kernel length must be odd, got {}", self.kernel_len)));
        }
        if self.input_len < self.kernel_len {
            return Err(Error::shape("encoder", format!("input_len {} < kernel {}", self.input_len, self.kernel_len)));
        }
        let mut rows = vec![("input".to_string(), vec![self.input_len])];
        let t = self.input_len - self.kernel_len + 1;
        rows.push(("sinc".into(), vec![self.num_filters, t]));
        let (mut c, s, mut t) = (1, self.num_filters / 3, t / 3);
        rows.push(("sinc_pool".into(), vec![c, s, t]));
        for (i, &out) in self.block_channels.iter().enumerate() {
            let s1 = s + 2 * PAD_FIRST.0 + 1 - CONV_KERNEL.0;
            let t1 = t + 2 * PAD_FIRST.1 + 1 - CONV_KERNEL.1;
            let s2 = s1 + 2 * PAD_SECOND.0 + 1 - CONV_KERNEL.0;
            let t2 = t1 + 2 * PAD_SECOND.1 + 1 - CONV_KERNEL.1;
            if s2 != s || t2 != t {
                return Err(Error::shape("encoder", "residual branch does not preserve shape"));
            }
            c = out;
            t /= TIME_POOL.1;
            if t == 0 {
                return Err(Error::shape("encoder", format!("block {} pools time to zero", i + 1)));
            }
            rows.push((format!("block{}", i + 1), vec![c, s, t]));
        }
        let tp = if self.pool_time == 0 { t } else { self.pool_time };
        rows.push(("adaptive_pool".into(), vec![c, 1, tp]));
        rows.push(("gru".into(), vec![self.gru_hidden]));
        rows.push(("embedding".into(), vec![self.embed_dim]));
        rows.push(("logits".into(), vec![2]));
        Ok(rows)
    }
}

/// One pre-activation residual block.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub bn1: DualBatchNorm,
    pub conv1: Conv2d,
    pub bn2: DualBatchNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub attention: Attention,
    pub position: AttentionPosition,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = match cfg.attention {
            AttentionKind::None => Attention::None,
            AttentionKind::Se => Attention::Se(SqueezeExcite::new(store, &format!("{name}.se"), cout, cfg.se_reduction, rng)?),
            AttentionKind::Cbam => Attention::Cbam(Cbam::new(
                store,
                &format!("{name}.cbam"),
                cout,
                cfg.cbam_reduction,
                cfg.cbam_kernel,
                rng,
            )?),
            AttentionKind::Simam => Attention::Simam(Simam { lambda: cfg.simam_lambda, stats: cfg.simam_stats }),
        };
        Ok(ResBlock {
            bn1: DualBatchNorm::new(store, &format!("{name}.bn1"), cin, cfg.bn_momentum, cfg.bn_eps),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, CONV_KERNEL, PAD_FIRST, true, rng),
            bn2: DualBatchNorm::new(store, &format!("{name}.bn2"), cout, cfg.bn_momentum, cfg.bn_eps),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, CONV_KERNEL, PAD_SECOND, true, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, (1, 1), (0, 0), true, rng)),
            attention,
            position: cfg.position(),
        })
    }

    pub fn forward(&mut self, p: &Binder<'_>, x: Var, ctx: BnContext) -> Result<Var> {
        let g = p.graph();
        let h = g.selu(self.bn1.forward(p, x, ctx)?)?;
        let mut h = self.conv1.forward(p, h)?;
        if self.position == AttentionPosition::BeforeBn {
            h = self.attention.forward(p, h)?;
        }
        let mut h = self.bn2.forward(p, h, ctx)?;
        if self.position == AttentionPosition::AfterBn {
            h = self.attention.forward(p, h)?;
        }
        let h = self.conv2.forward(p, g.selu(h)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(p, x)?,
            None => x,
        };
        g.max_pool2d(g.add(h, skip)?, TIME_POOL)
    }

    fn norms(&self) -> [&DualBatchNorm; 2] {
        [&self.bn1, &self.bn2]
    }

    fn norms_mut(&mut self) -> [&mut DualBatchNorm; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `(N, embed_dim)`
    pub embeddings: Var,
    /// `(N, 2)`
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub front: SincFrontend,
    pub blocks: Vec<ResBlock>,
    pub gru: GruCell,
    pub fc: Linear,
    /// Class vectors `(2, embed_dim)`: row 0 spoof, row 1 bonafide.
    pub classifier: ParamId,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.shape_trace()?;
        if cfg.block_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one residual block".into()));
        }
        let fb = init_mel_filterbank(cfg.num_filters, SAMPLE_RATE, cfg.kernel_len)?;
        let front = SincFrontend::new(store, fb, cfg.magnitude, cfg.bn_momentum, cfg.bn_eps);
        let mut blocks = Vec::with_capacity(cfg.block_channels.len());
        let mut cin = 1;
        for (i, &cout) in cfg.block_channels.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("block{}", i + 1), cin, cout, &cfg, rng)?);
            cin = cout;
        }
        let gru = GruCell::new(store, "gru", cin, cfg.gru_hidden, rng);
        let fc = Linear::new(store, "embed", cfg.gru_hidden, cfg.embed_dim, true, rng);
        let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
        let classifier = store.add("classifier.weight", Tensor::uniform(&[2, cfg.embed_dim], -bound, bound, rng), true);
        Ok(Encoder { cfg, front, blocks, gru, fc, classifier })
    }

    pub fn encode(&mut self, p: &Binder<'_>, wave: Var, ctx: BnContext) -> Result<EncoderOutput> {
        self.encode_traced(p, wave, ctx).map(|(out, _)| out)
    }

    /// Like [`Encoder::encode`], also returning per-sample shapes in the
    /// same row layout as [`EncoderConfig::shape_trace`].
    pub fn encode_traced(
        &mut self,
        p: &Binder<'_>,
        wave: Var,
        ctx: BnContext,
    ) -> Result<(EncoderOutput, Vec<(String, Vec<usize>)>)> {
        let g = p.graph();
        let ws = g.shape(wave);
        if ws.len() != 2 || ws[1] != self.cfg.input_len {
            return Err(Error::shape("encode", format!("expected (N, {}), got {ws:?}", self.cfg.input_len)));
        }
        let n = ws[0];
        let mut trace = vec![("input".to_string(), ws[1..].to_vec())];
        let mut row = |name: String, v: Var| trace.push((name, g.shape(v)[1..].to_vec()));

        row("sinc".into(), self.front.filter(p, wave)?);
        let mut x = self.front.forward(p, wave, ctx)?;
        row("sinc_pool".into(), x);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            x = block.forward(p, x, ctx)?;
            row(format!("block{}", i + 1), x);
        }
        let s = g.shape(x);
        let tp = if self.cfg.pool_time == 0 { s[3] } else { self.cfg.pool_time };
        let pooled = g.adaptive_avg_pool2d(x, (1, tp))?;
        row("adaptive_pool".into(), pooled);
        let seq = g.reshape(pooled, &[n, s[1], tp])?;
        let steps = (0..tp)
            .map(|t| g.reshape(g.narrow(seq, 2, t, 1)?, &[n, s[1]]))
            .collect::<Result<Vec<_>>>()?;
        let h = self.gru.run(p, &steps)?;
        row("gru".into(), h);
        let embeddings = self.fc.forward(p, h)?;
        row("embedding".into(), embeddings);
        let logits = g.linear(embeddings, p.var(self.classifier), None)?;
        row("logits".into(), logits);
        Ok((EncoderOutput { embeddings, logits }, trace))
    }

    /// Every batch-norm layer, front-end first.
    pub fn batch_norms(&self) -> Vec<&DualBatchNorm> {
        let mut out = vec![&self.front.bn];
        out.extend(self.blocks.iter().flat_map(|b| b.norms()));
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut DualBatchNorm> {
        let mut out = vec![&mut self.front.bn];
        out.extend(self.blocks.iter_mut().flat_map(|b| b.norms_mut()));
        out
    }

    /// Bit patterns of one statistics bank across all layers.
    pub fn bank_fingerprint(&self, bank: Bank) -> Vec<u64> {
        self.batch_norms().iter().flat_map(|bn| bn.bank(bank).fingerprint()).collect()
    }

    pub fn bank_stats(&self, bank: Bank) -> Vec<RunningStats> {
        self.batch_norms().iter().map(|bn| bn.bank(bank).clone()).collect()
    }
}
