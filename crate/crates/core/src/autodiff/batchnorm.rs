//! Batch normalisation with shared affine parameters and two statistics
//! banks, so clean and adversarial batches are normalised by their own
//! running statistics.

use super::graph::{Graph, Var};
use super::param::{Binder, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bank {
    Main,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// How a forward pass treats every batch-norm layer it crosses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnContext {
    pub mode: BnMode,
    pub bank: Bank,
    /// Whether a train-mode pass folds batch statistics into the active bank.
    pub update_stats: bool,
}

impl BnContext {
    pub fn train(bank: Bank) -> Self {
        BnContext { mode: BnMode::Train, bank, update_stats: true }
    }

    pub fn eval() -> Self {
        BnContext { mode: BnMode::Eval, bank: Bank::Main, update_stats: false }
    }

    pub fn frozen_stats(mut self) -> Self {
        self.update_stats = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Bit pattern of the statistics, for exact before/after comparisons.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.mean.iter().chain(&self.var).map(|v| v.to_bits()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DualBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    channels: usize,
    pub main: RunningStats,
    pub aux: RunningStats,
    pub momentum: f64,
    pub eps: f64,
}

impl DualBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        DualBatchNorm {
            gamma,
            beta,
            channels,
            main: RunningStats::new(channels),
            aux: RunningStats::new(channels),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bank(&self, bank: Bank) -> &RunningStats {
        match bank {
            Bank::Main => &self.main,
            Bank::Auxiliary => &self.aux,
        }
    }

    pub fn bank_mut(&mut self, bank: Bank) -> &mut RunningStats {
        match bank {
            Bank::Main => &mut self.main,
            Bank::Auxiliary => &mut self.aux,
        }
    }

    /// Train mode normalises with batch statistics and, if allowed, updates
    /// the selected bank; eval mode always uses the main bank.
    pub fn forward(&mut self, p: &Binder<'_>, x: Var, ctx: BnContext) -> Result<Var> {
        let g: &Graph = p.graph();
        let shape = g.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::shape("batch_norm", format!("expected {} channels, got {shape:?}", self.channels)));
        }
        if shape[0] == 0 {
            return Err(Error::invalid("batch norm over an empty batch"));
        }
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        match ctx.mode {
            BnMode::Eval => g.batch_norm_eval(x, gamma, beta, &self.main.mean, &self.main.var, self.eps),
            BnMode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                if ctx.update_stats {
                    let m = self.momentum;
                    let unbias = if stats.count > 1 {
                        stats.count as f64 / (stats.count - 1) as f64
                    } else {
                        1.0
                    };
                    let bank = self.bank_mut(ctx.bank);
                    for c in 0..bank.mean.len() {
                        bank.mean[c] = (1.0 - m) * bank.mean[c] + m * stats.mean[c];
                        bank.var[c] = (1.0 - m) * bank.var[c] + m * stats.var[c] * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize) -> (ParamStore, DualBatchNorm) {
        let mut store = ParamStore::new();
        let bn = DualBatchNorm::new(&mut store, "bn", c, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS);
        (store, bn)
    }

    fn per_channel(t: &Tensor, c: usize) -> Vec<Vec<f64>> {
        let s = t.shape();
        let spatial: usize = s[2..].iter().product();
        let mut out = vec![Vec::new(); c];
        for (i, blk) in t.data().chunks(spatial).enumerate() {
            out[i % c].extend_from_slice(blk);
        }
        out
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // mean 5, std 2 per channel
        let x = Tensor::randn(&[8, 3, 4, 5], 2.0, &mut rng);
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 5.0).collect()).unwrap();
        let (store, mut bn) = layer(3);
        let g = Graph::new();
        let p = Binder::new(&store, &g, true);
        let xv = g.constant(x);
        let y = bn.forward(&p, xv, BnContext::train(Bank::Main)).unwrap();
        for ch in per_channel(&g.value(y), 3) {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            // eps slightly shrinks the variance
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn auxiliary_passes_leave_main_bank_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, mut bn) = layer(2);
        let before = bn.main.fingerprint();
        for _ in 0..2 {
            let g = Graph::new();
            let p = Binder::new(&store, &g, true);
            let x = g.constant(Tensor::randn(&[4, 2, 3, 3], 1.5, &mut rng));
            bn.forward(&p, x, BnContext::train(Bank::Auxiliary)).unwrap();
        }
        assert_eq!(before, bn.main.fingerprint());
        assert_ne!(bn.aux.fingerprint(), RunningStats::new(2).fingerprint());
    }

    #[test]
    fn eval_uses_main_bank_regardless_of_selector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, mut bn) = layer(2);
        for _ in 0..3 {
            let g = Graph::new();
            let p = Binder::new(&store, &g, true);
            let x = g.constant(Tensor::randn(&[4, 2, 3, 3], 3.0, &mut rng));
            bn.forward(&p, x, BnContext::train(Bank::Main)).unwrap();
        }
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let g = Graph::new();
        let p = Binder::new(&store, &g, false);
        let xv = g.constant(x.clone());
        let mut ctx = BnContext::eval();
        ctx.bank = Bank::Auxiliary;
        let y = bn.forward(&p, xv, ctx).unwrap();
        let y = g.value(y);
        for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
            let c = (i / 9) % 2;
            let want = (xi - bn.main.mean[c]) / (bn.main.var[c] + bn.eps).sqrt();
            assert!((want - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_batch() {
        let (store, mut bn) = layer(3);
        let g = Graph::new();
        let p = Binder::new(&store, &g, true);
        let x = g.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(bn.forward(&p, x, BnContext::train(Bank::Main)).is_err());
        let e = g.constant(Tensor::zeros(&[0, 3, 4]));
        assert!(bn.forward(&p, e, BnContext::train(Bank::Main)).is_err());
    }
}
