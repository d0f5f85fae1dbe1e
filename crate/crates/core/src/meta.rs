//! Episodic meta-learning: episode sampling with one held-out attack type,
//! the relation network and its pair targets.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Binder, Linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{BONAFIDE, SPOOF};

pub const DEFAULT_K: usize = 2;
pub const RELATION_HIDDEN: usize = 64;

/// Training utterances grouped by attack type.
#[derive(Clone, Debug, Default)]
pub struct EpisodePool {
    /// `(attack type, dataset indices)`, in first-seen order.
    pub attacks: Vec<(String, Vec<usize>)>,
    pub bonafide: Vec<usize>,
}

impl EpisodePool {
    /// `items` yields `(dataset index, attack type)`; `None` marks bonafide.
    pub fn new<'a>(items: impl IntoIterator<Item = (usize, Option<&'a str>)>) -> Self {
        let mut pool = EpisodePool::default();
        for (idx, attack) in items {
            match attack {
                None => pool.bonafide.push(idx),
                Some(a) => match pool.attacks.iter_mut().find(|(name, _)| name == a) {
                    Some((_, v)) => v.push(idx),
                    None => pool.attacks.push((a.to_string(), vec![idx])),
                },
            }
        }
        pool
    }

    /// Number of attack types `N`.
    pub fn num_attacks(&self) -> usize {
        self.attacks.len()
    }

    pub fn len(&self) -> usize {
        self.bonafide.len() + self.attacks.iter().map(|(_, v)| v.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("episode K must be positive"));
        }
        if self.attacks.len() < 2 {
            return Err(Error::Data(format!("episodes need at least 2 attack types, found {}", self.attacks.len())));
        }
        if let Some((name, v)) = self.attacks.iter().find(|(_, v)| v.len() < k) {
            return Err(Error::Data(format!("attack {name} has {} utterances, K = {k}", v.len())));
        }
        if self.bonafide.len() < 2 * k {
            return Err(Error::Data(format!("{} bonafide utterances, episodes need {}", self.bonafide.len(), 2 * k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    pub index: usize,
    /// 0 spoof, 1 bonafide.
    pub label: usize,
    /// Position in [`EpisodePool::attacks`]; `None` for bonafide.
    pub attack: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub held_out: usize,
    /// `(N - 1) K` spoofed utterances, attack by attack, then `K` bonafide.
    pub support: Vec<Member>,
    /// `K` utterances of the held-out attack, then `K` bonafide.
    pub query: Vec<Member>,
}

impl Episode {
    /// Support then query members.
    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.support.iter().chain(&self.query)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.members().map(|m| m.index).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.members().map(|m| m.label).collect()
    }
}

fn draw<R: Rng + ?Sized>(from: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, from.len(), count).into_iter().map(|i| from[i]).collect()
}

/// Samples one episode without replacement; the held-out attack type is
/// uniform over the pool's attack types.
pub fn sample_episode<R: Rng + ?Sized>(pool: &EpisodePool, k: usize, rng: &mut R) -> Result<Episode> {
    pool.validate(k)?;
    let held_out = rng.gen_range(0..pool.attacks.len());
    let mut support = Vec::with_capacity(pool.attacks.len() * k);
    for (a, (_, idx)) in pool.attacks.iter().enumerate() {
        if a != held_out {
            support.extend(draw(idx, k, rng).into_iter().map(|index| Member { index, label: SPOOF, attack: Some(a) }));
        }
    }
    let mut query: Vec<Member> = draw(&pool.attacks[held_out].1, k, rng)
        .into_iter()
        .map(|index| Member { index, label: SPOOF, attack: Some(held_out) })
        .collect();
    let bona = draw(&pool.bonafide, 2 * k, rng);
    let bona_member = |&index: &usize| Member { index, label: BONAFIDE, attack: None };
    support.extend(bona[..k].iter().map(bona_member));
    query.extend(bona[k..].iter().map(bona_member));
    Ok(Episode { k, held_out, support, query })
}

/// Episodes per epoch: `ceil(train size / (NK + 2K))`.
pub fn episodes_per_epoch(train_size: usize, num_attacks: usize, k: usize) -> usize {
    let per = num_attacks * k + 2 * k;
    if per == 0 {
        return 0;
    }
    train_size.div_ceil(per)
}

/// `(|support|, |query|)` 0/1 matrix: 1 where both sides share the
/// spoof/bonafide class.
pub fn pair_labels(support: &[usize], query: &[usize]) -> Tensor {
    let data = support.iter().flat_map(|&s| query.iter().map(move |&q| f64::from(u8::from(s == q)))).collect();
    Tensor::new(vec![support.len(), query.len()], data).expect("pair label shape")
}

/// Scores every (support, query) embedding pair in (0, 1).
#[derive(Clone, Debug)]
pub struct RelationNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

impl RelationNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, embed_dim: usize, rng: &mut R) -> Self {
        RelationNet {
            fc1: Linear::new(store, &format!("{name}.fc1"), 2 * embed_dim, RELATION_HIDDEN, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), RELATION_HIDDEN, RELATION_HIDDEN, true, rng),
            out: Linear::new(store, &format!("{name}.out"), RELATION_HIDDEN, 1, true, rng),
        }
    }

    /// Relation scores `(S, Q)` from support `(S, D)` and query `(Q, D)`
    /// embeddings; each pair is fed as `[support, query]`.
    pub fn forward(&self, p: &Binder<'_>, support: Var, query: Var) -> Result<Var> {
        let g = p.graph();
        let (ss, qs) = (g.shape(support), g.shape(query));
        if ss.len() != 2 || qs.len() != 2 || ss[1] != qs[1] || 2 * ss[1] != self.fc1.in_dim {
            return Err(Error::shape("relation", format!("support {ss:?}, query {qs:?}")));
        }
        let (s, q) = (ss[0], qs[0]);
        let rows: Vec<usize> = (0..s).flat_map(|i| std::iter::repeat(i).take(q)).collect();
        let cols: Vec<usize> = (0..s).flat_map(|_| 0..q).collect();
        let pairs = g.concat(&[g.index_select(support, &rows)?, g.index_select(query, &cols)?], 1)?;
        let h = g.selu(self.fc1.forward(p, pairs)?)?;
        let h = g.selu(self.fc2.forward(p, h)?)?;
        let r = g.sigmoid(self.out.forward(p, h)?)?;
        g.reshape(r, &[s, q])
    }
}
