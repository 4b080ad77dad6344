//! Forward sessions: a graph plus the parameter bindings, mode and RNG that
//! one forward/backward pass needs.

use rand::Rng;

use crate::autograd::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{rng_from_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    frozen_prefixes: Vec<String>,
    mode: Mode,
    rng: SeededRng,
    pub(crate) updates: Vec<RunningUpdate>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            frozen_prefixes: Vec::new(),
            mode,
            rng: rng_from_seed(seed),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    fn is_frozen(&self, id: ParamId) -> bool {
        let name = self.store.name(id);
        self.store.kind(id) == ParamKind::Buffer
            || self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// The graph node of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.is_frozen(id) {
            self.graph.constant(t)
        } else {
            self.graph.param(t)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.graph.value(x).len();
        let scale = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        self.graph.dropout_with_scale(x, scale)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)
    }

    /// Gradients for every store entry. Trainable parameters bound in this
    /// session get a tensor (zero if the loss does not reach them); unbound or
    /// frozen entries get `None`.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| {
                let v = (*b)?;
                if !self.graph.requires_grad(v) {
                    return None;
                }
                Some(
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape())),
                )
            })
            .collect()
    }

    /// Running-statistic updates gathered in train mode, to be applied after
    /// the step with [`apply_running_updates`].
    pub fn take_updates(&mut self) -> Vec<RunningUpdateHandle> {
        std::mem::take(&mut self.updates)
            .into_iter()
            .map(RunningUpdateHandle)
            .collect()
    }
}

/// A pending running-statistics update produced by a train-mode forward.
pub struct RunningUpdateHandle(pub(crate) RunningUpdate);

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_running_updates(store: &mut ParamStore, updates: Vec<RunningUpdateHandle>) {
    for RunningUpdateHandle(u) in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }
}
