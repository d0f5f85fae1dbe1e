//! Waveform PGD and the disentangled clean/adversarial training step.

use crate::autodiff::{Bank, Binder, BnContext, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, BONAFIDE, DEFAULT_FUSION_LAMBDA};
use crate::meta::pair_labels;
use crate::model::Model;

pub const DEFAULT_DELTA: f64 = 0.002;
pub const DEFAULT_ALPHA: f64 = 0.0001;
pub const DEFAULT_STEPS: usize = 12;
pub const WAVE_MIN: f64 = -1.0;
pub const WAVE_MAX: f64 = 1.0;

/// Loss the attack ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackTarget {
    /// Weighted cross-entropy on the raw classifier logits.
    WeightedCe,
    /// The configured margin-softmax loss.
    Margin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub enabled: bool,
    pub delta: f64,
    pub alpha: f64,
    pub steps: usize,
    pub target: AttackTarget,
    /// Let the attack iterations update the auxiliary running statistics.
    pub update_aux_stats: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            enabled: true,
            delta: DEFAULT_DELTA,
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            target: AttackTarget::WeightedCe,
            update_aux_stats: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("adv.delta must be >= 0, got {}", self.delta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("adv.alpha must be >= 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("adv.steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anything that yields a loss and its gradient with respect to the input.
pub trait AttackSurface {
    fn loss_and_input_grad(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

/// One projected step: ascend along `sign(grad)`, clip to the
/// `delta`-ball around `origin`, then to the waveform range.
pub fn pgd_step(current: &Tensor, origin: &Tensor, grad: &Tensor, alpha: f64, delta: f64) -> Result<Tensor> {
    if current.shape() != origin.shape() || grad.shape() != origin.shape() {
        return Err(Error::shape("pgd", format!("{:?} / {:?} / {:?}", current.shape(), origin.shape(), grad.shape())));
    }
    let data = current
        .data()
        .iter()
        .zip(origin.data())
        .zip(grad.data())
        .map(|((&c, &o), &gr)| {
            let s = if gr > 0.0 {
                1.0
            } else if gr < 0.0 {
                -1.0
            } else {
                0.0
            };
            (c + alpha * s).clamp(o - delta, o + delta).clamp(WAVE_MIN, WAVE_MAX)
        })
        .collect();
    Tensor::new(origin.shape().to_vec(), data)
}

/// `steps` projected sign-gradient ascent steps starting from `x`.
pub fn pgd_attack<S: AttackSurface + ?Sized>(surface: &mut S, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = surface.loss_and_input_grad(&adv, labels)?;
        adv = pgd_step(&adv, x, &grad, cfg.alpha, cfg.delta)?;
    }
    Ok(adv)
}

/// Rows labelled bonafide are restored from `original`.
pub fn substitute_bonafide(adversarial: &Tensor, original: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = original.shape();
    if adversarial.shape() != s || s.first() != Some(&labels.len()) {
        return Err(Error::shape("substitute_bonafide", format!("{:?} / {s:?} for {} labels", adversarial.shape(), labels.len())));
    }
    let width = original.numel() / labels.len().max(1);
    let mut out = adversarial.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y == BONAFIDE {
            out.data_mut()[i * width..(i + 1) * width].copy_from_slice(&original.data()[i * width..(i + 1) * width]);
        }
    }
    Ok(out)
}

/// A model attacked through its auxiliary batch-norm bank; parameters are
/// constants.
pub struct ModelSurface<'a> {
    pub model: &'a mut Model,
    pub target: AttackTarget,
    pub update_aux_stats: bool,
}

impl AttackSurface for ModelSurface<'_> {
    fn loss_and_input_grad(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let m = &mut *self.model;
        let g = Graph::new();
        let p = Binder::new(&m.store, &g, false);
        let xv = g.leaf(x.clone(), true);
        let mut ctx = BnContext::train(Bank::Auxiliary);
        if !self.update_aux_stats {
            ctx = ctx.frozen_stats();
        }
        let out = m.encoder.encode(&p, xv, ctx)?;
        let loss = match self.target {
            AttackTarget::WeightedCe => losses::weighted_ce(&g, out.logits, labels, m.loss.class_weights())?,
            AttackTarget::Margin => m.classification_loss(&p, out, labels)?,
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xv).ok_or(Error::GraphFreed)?;
        Ok((value, grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub meta_enabled: bool,
    pub fusion_lambda: f64,
    pub attack: AttackConfig,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { meta_enabled: true, fusion_lambda: DEFAULT_FUSION_LAMBDA, attack: AttackConfig::default() }
    }
}

/// One training batch; with `n_support` set, the first `n_support` rows
/// are the episode support set and the rest its query set.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub waves: Tensor,
    pub labels: Vec<usize>,
    pub n_support: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_w: f64,
    pub l_m: f64,
    pub l_f: f64,
    pub l_w_adv: f64,
    pub total: f64,
}

/// Forward/backward of one batch: the clean branch runs on the main
/// statistics bank, the adversarial branch on the auxiliary bank.
/// Gradients are left in the parameter store; no update is applied.
pub fn disentangled_step(model: &mut Model, batch: &StepBatch, cfg: &StepConfig) -> Result<StepLosses> {
    let n = batch.labels.len();
    if batch.waves.shape() != [n, model.input_len()] {
        return Err(Error::shape("train_step", format!("{:?} for {n} labels", batch.waves.shape())));
    }
    let adversarial = if cfg.attack.enabled {
        let mut surface = ModelSurface { model: &mut *model, target: cfg.attack.target, update_aux_stats: cfg.attack.update_aux_stats };
        let adv = pgd_attack(&mut surface, &batch.waves, &batch.labels, &cfg.attack)?;
        Some(substitute_bonafide(&adv, &batch.waves, &batch.labels)?)
    } else {
        None
    };

    model.store.zero_grad();
    let Model { store, encoder, relation, loss } = model;
    let g = Graph::new();
    let p = Binder::new(store, &g, true);
    let head = p.var(encoder.classifier);
    let class_loss = |emb, logits| losses::classification_loss(&g, emb, logits, &batch.labels, head, loss);

    let out = encoder.encode(&p, g.constant(batch.waves.clone()), BnContext::train(Bank::Main))?;
    let l_w = class_loss(out.embeddings, out.logits)?;
    let l_m = match (cfg.meta_enabled, batch.n_support) {
        (true, Some(s)) if s > 0 && s < n => {
            let support = g.narrow(out.embeddings, 0, 0, s)?;
            let query = g.narrow(out.embeddings, 0, s, n - s)?;
            let r = relation.forward(&p, support, query)?;
            Some(losses::relation_mse(&g, r, &pair_labels(&batch.labels[..s], &batch.labels[s..]))?)
        }
        (true, Some(s)) => return Err(Error::invalid(format!("support size {s} for a batch of {n}"))),
        _ => None,
    };
    let l_f = match l_m {
        Some(l_m) => losses::fuse(&g, l_w, l_m, cfg.fusion_lambda)?,
        None => l_w,
    };
    let l_w_adv = match &adversarial {
        Some(adv) => {
            let out = encoder.encode(&p, g.constant(adv.clone()), BnContext::train(Bank::Auxiliary))?;
            Some(class_loss(out.embeddings, out.logits)?)
        }
        None => None,
    };
    let total = losses::total_objective(&g, l_f, l_w_adv)?;
    let item = |v| g.value(v).item();
    let losses = StepLosses {
        l_w: item(l_w),
        l_m: l_m.map_or(0.0, item),
        l_f: item(l_f),
        l_w_adv: l_w_adv.map_or(0.0, item),
        total: item(total),
    };
    let grads = g.backward(total)?;
    let bindings = p.bindings();
    drop(p);
    store.accumulate(&grads, &bindings);
    Ok(losses)
}

/// A trained model attacked as deployed: eval-mode batch norm on the main
/// bank, parameters constant.
pub struct EvalSurface<'a> {
    model: &'a Model,
    encoder: crate::encoder::Encoder,
    pub target: AttackTarget,
}

impl<'a> EvalSurface<'a> {
    pub fn new(model: &'a Model, target: AttackTarget) -> Self {
        EvalSurface { model, encoder: model.encoder.clone(), target }
    }
}

impl AttackSurface for EvalSurface<'_> {
    fn loss_and_input_grad(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let m = self.model;
        let g = Graph::new();
        let p = Binder::new(&m.store, &g, false);
        let xv = g.leaf(x.clone(), true);
        let out = self.encoder.encode(&p, xv, BnContext::eval())?;
        let loss = match self.target {
            AttackTarget::WeightedCe => losses::weighted_ce(&g, out.logits, labels, m.loss.class_weights())?,
            AttackTarget::Margin => m.classification_loss(&p, out, labels)?,
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xv).ok_or(Error::GraphFreed)?;
        Ok((value, grad))
    }
}
