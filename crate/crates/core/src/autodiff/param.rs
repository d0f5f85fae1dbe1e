use std::cell::RefCell;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters are never bound as gradient-tracking leaves.
    pub trainable: bool,
}

/// Owns every parameter of a model, addressable by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of bound leaves into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &[(ParamId, Var)]) {
        for &(id, var) in bindings {
            if let Some(g) = grads.get(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Lazily binds parameters as graph leaves, once per graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    graph: &'a Graph,
    track: bool,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binder<'a> {
    /// With `track == false` every parameter is bound as a constant, so
    /// backward computes only input gradients.
    pub fn new(store: &'a ParamStore, graph: &'a Graph, track: bool) -> Self {
        Binder { store, graph, track, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.graph.leaf(p.value.clone(), self.track && p.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// `(param, leaf)` pairs of every parameter bound with gradient tracking.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|&(id, _)| self.track && self.store.params[id.0].trainable)
            .collect()
    }
}
