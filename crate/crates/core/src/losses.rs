//! Classification objectives (weighted CE and the margin-softmax family),
//! the relation MSE, and the fused / total training objectives.

use crate::autodiff::{Graph, MarginKind, Tensor, Var};
use crate::error::{Error, Result};

pub const SPOOF: usize = 0;
pub const BONAFIDE: usize = 1;
pub const DEFAULT_FUSION_LAMBDA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Ce,
    Nsl,
    Am,
    Aam,
    Waam,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ce" => LossVariant::Ce,
            "nsl" => LossVariant::Nsl,
            "am" => LossVariant::Am,
            "aam" => LossVariant::Aam,
            "waam" => LossVariant::Waam,
            _ => return Err(Error::Config(format!("unknown loss variant '{s}' (ce|nsl|am|aam|waam)"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Nsl => "nsl",
            LossVariant::Am => "am",
            LossVariant::Aam => "aam",
            LossVariant::Waam => "waam",
        }
    }

    pub fn is_margin(self) -> bool {
        self != LossVariant::Ce
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub variant: LossVariant,
    pub scale: f64,
    /// Shared margin of `am` and `aam`.
    pub margin: f64,
    pub margin_spoof: f64,
    pub margin_genuine: f64,
    pub weight_spoof: f64,
    pub weight_genuine: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            variant: LossVariant::Waam,
            scale: 32.0,
            margin: 0.2,
            margin_spoof: 0.2,
            margin_genuine: 0.9,
            weight_spoof: 0.9,
            weight_genuine: 0.1,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("loss.scale must be positive, got {}", self.scale));
        }
        if !(self.weight_spoof > 0.0 && self.weight_genuine > 0.0) {
            return bad("class weights must be positive".into());
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        let check = |name: &str, m: f64, hi: f64| {
            if (0.0..hi).contains(&m) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={m} outside [0, {hi})")))
            }
        };
        match self.variant {
            LossVariant::Am => check("loss.margin", self.margin, 1.0),
            LossVariant::Aam => check("loss.margin", self.margin, half_pi),
            LossVariant::Waam => {
                check("loss.margin_spoof", self.margin_spoof, half_pi)?;
                check("loss.margin_genuine", self.margin_genuine, half_pi)
            }
            LossVariant::Ce | LossVariant::Nsl => Ok(()),
        }
    }

    /// `(spoof, genuine)` weights as used by the classification loss.
    pub fn class_weights(&self) -> [f64; 2] {
        [self.weight_spoof, self.weight_genuine]
    }

    fn head(&self) -> (MarginKind, [f64; 2], [f64; 2]) {
        match self.variant {
            LossVariant::Ce | LossVariant::Nsl => (MarginKind::Normalized, [0.0; 2], [1.0; 2]),
            LossVariant::Am => (MarginKind::Additive, [self.margin; 2], [1.0; 2]),
            LossVariant::Aam => (MarginKind::Angular, [self.margin; 2], [1.0; 2]),
            LossVariant::Waam => (MarginKind::Angular, [self.margin_spoof, self.margin_genuine], self.class_weights()),
        }
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 (spoof) or 1 (bonafide)"));
    }
    Ok(())
}

/// `mean_i w[y_i] * -log softmax(logits_i)[y_i]` over `(N, 2)` logits.
pub fn weighted_ce(g: &Graph, logits: Var, labels: &[usize], class_weights: [f64; 2]) -> Result<Var> {
    check_labels(labels)?;
    g.weighted_cross_entropy(logits, labels, &class_weights)
}

/// Cosines `(N, 2)` between L2-normalised embeddings `(N, D)` and class
/// vectors `(2, D)`.
pub fn cosines(g: &Graph, embeddings: Var, class_vectors: Var) -> Result<Var> {
    let (es, ws) = (g.shape(embeddings), g.shape(class_vectors));
    if es.len() != 2 || ws != [2, es.get(1).copied().unwrap_or(0)] {
        return Err(Error::shape("margin_softmax", format!("embeddings {es:?}, class vectors {ws:?}")));
    }
    let x = g.l2_normalize(embeddings)?;
    let w = g.l2_normalize(class_vectors)?;
    g.linear(x, w, None)
}

/// Margin-softmax loss of the configured variant. `ce` falls back to the
/// scaled normalised softmax.
pub fn margin_softmax(g: &Graph, embeddings: Var, labels: &[usize], class_vectors: Var, cfg: &MarginConfig) -> Result<Var> {
    check_labels(labels)?;
    if g.shape(embeddings).first() != Some(&labels.len()) {
        return Err(Error::shape("margin_softmax", format!("{} labels for {:?}", labels.len(), g.shape(embeddings))));
    }
    let (kind, margins, weights) = cfg.head();
    let cos = cosines(g, embeddings, class_vectors)?;
    let logits = g.angular_margin(cos, labels, margins, cfg.scale, kind)?;
    g.weighted_cross_entropy(logits, labels, &weights)
}

/// The classification term of the configured variant: weighted CE on the
/// raw logits for `ce`, otherwise the margin softmax on the embeddings.
pub fn classification_loss(
    g: &Graph,
    embeddings: Var,
    logits: Var,
    labels: &[usize],
    class_vectors: Var,
    cfg: &MarginConfig,
) -> Result<Var> {
    match cfg.variant {
        LossVariant::Ce => weighted_ce(g, logits, labels, cfg.class_weights()),
        _ => margin_softmax(g, embeddings, labels, class_vectors, cfg),
    }
}

/// `(1 / 2NK^2) * sum (r - label)^2` over the `NK x 2K` relation matrix.
pub fn relation_mse(g: &Graph, relation: Var, match_labels: &Tensor) -> Result<Var> {
    if g.shape(relation) != match_labels.shape() {
        return Err(Error::shape(
            "relation_mse",
            format!("scores {:?}, labels {:?}", g.shape(relation), match_labels.shape()),
        ));
    }
    if match_labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("match labels must be 0 or 1"));
    }
    let diff = g.sub(relation, g.constant(match_labels.clone()))?;
    g.mean(g.square(diff)?)
}

/// `L_F = L_W + lambda * L_M`.
pub fn fuse(g: &Graph, l_w: Var, l_m: Var, fusion_lambda: f64) -> Result<Var> {
    g.add(l_w, g.scale(l_m, fusion_lambda)?)
}

/// `L_F + L_W_adv`; just `L_F` without an adversarial branch.
pub fn total_objective(g: &Graph, l_f: Var, l_w_adv: Option<Var>) -> Result<Var> {
    match l_w_adv {
        Some(adv) => g.add(l_f, adv),
        None => Ok(l_f),
    }
}
