//! Encoder, relation network and classification head sharing one
//! parameter store.

use rand::Rng;

use crate::autodiff::{Binder, BnContext, Graph, ParamStore, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::losses::{self, MarginConfig};
use crate::meta::RelationNet;

/// Rows per forward pass when scoring or embedding a dataset.
pub const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub relation: RelationNet,
    pub loss: MarginConfig,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderConfig, loss: MarginConfig, rng: &mut R) -> Result<Self> {
        loss.validate()?;
        let mut store = ParamStore::new();
        let embed_dim = encoder.embed_dim;
        let encoder = Encoder::new(&mut store, encoder, rng)?;
        let relation = RelationNet::new(&mut store, "relation", embed_dim, rng);
        Ok(Model { store, encoder, relation, loss })
    }

    pub fn input_len(&self) -> usize {
        self.encoder.cfg.input_len
    }

    /// Classification term of the configured loss variant.
    pub fn classification_loss(&self, p: &Binder<'_>, out: EncoderOutput, labels: &[usize]) -> Result<Var> {
        let g = p.graph();
        losses::classification_loss(g, out.embeddings, out.logits, labels, p.var(self.encoder.classifier), &self.loss)
    }

    /// Bonafide-minus-spoof score per row: cosine difference for margin
    /// variants, logit difference for plain CE. Higher means bonafide.
    pub fn scores_of(&self, p: &Binder<'_>, out: EncoderOutput) -> Result<Vec<f64>> {
        let g = p.graph();
        let head = if self.loss.variant.is_margin() {
            losses::cosines(g, out.embeddings, p.var(self.encoder.classifier))?
        } else {
            out.logits
        };
        let v = g.value(head);
        Ok(v.data().chunks(2).map(|r| r[1] - r[0]).collect())
    }

    fn eval_chunks<T>(&self, waves: &Tensor, f: impl Fn(&Self, &Binder<'_>, EncoderOutput) -> Result<Vec<T>>) -> Result<Vec<T>> {
        let s = waves.shape();
        if s.len() != 2 {
            return Err(Error::shape("evaluate", format!("expected (N, L), got {s:?}")));
        }
        let (n, len) = (s[0], s[1]);
        // eval mode only reads the running statistics
        let mut encoder = self.encoder.clone();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows = EVAL_CHUNK.min(n - start);
            let chunk = Tensor::new(vec![rows, len], waves.data()[start * len..(start + rows) * len].to_vec())?;
            let g = Graph::new();
            let p = Binder::new(&self.store, &g, false);
            let o = encoder.encode(&p, g.constant(chunk), BnContext::eval())?;
            out.extend(f(self, &p, o)?);
        }
        Ok(out)
    }

    /// Eval-mode scores of `(N, L)` waveforms; running statistics are
    /// left untouched.
    pub fn score(&self, waves: &Tensor) -> Result<Vec<f64>> {
        self.eval_chunks(waves, |m, p, o| m.scores_of(p, o))
    }

    /// Eval-mode embeddings, one row per waveform.
    pub fn embed(&self, waves: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.eval_chunks(waves, |_, p, o| {
            let v = p.graph().value(o.embeddings);
            let d = v.shape()[1];
            Ok(v.data().chunks(d).map(<[f64]>::to_vec).collect())
        })
    }
}
