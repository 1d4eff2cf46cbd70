//! Parameter storage and the per-forward binding of parameters to a tape.

use std::cell::{RefCell, RefMut};

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.params.push(t.with_requires_grad(true));
        self.param_names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> BufferId {
        self.buffers.push(t);
        self.buffer_names.push(name.into());
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Folds a finished pass back into the store: accumulates parameter
    /// gradients and updates running statistics with `momentum`.
    pub fn apply(&mut self, outcome: PassOutcome<T>, momentum: T) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(outcome.grads) {
            if let Some(g) = g {
                p.accumulate_grad(&g)?;
            }
        }
        for upd in outcome.stats {
            for (buf, batch) in [(upd.mean, upd.stats.mean), (upd.var, upd.stats.var)] {
                let run = self.buffers[buf.0].data_mut();
                if run.len() != batch.len() {
                    return Err(Error::dim("running statistics length mismatch"));
                }
                for (r, b) in run.iter_mut().zip(batch) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct StatUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

/// Gradients and statistics produced by one forward/backward pass.
pub struct PassOutcome<T> {
    pub grads: Vec<Option<Vec<T>>>,
    pub(crate) stats: Vec<StatUpdate<T>>,
}

/// One forward evaluation: a fresh tape with parameters bound lazily.
pub struct Pass<'s, T: Real> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    training: bool,
    rng: RefCell<Rng>,
    stats: RefCell<Vec<StatUpdate<T>>>,
    warnings: RefCell<Vec<String>>,
}

impl<'s, T: Real> Pass<'s, T> {
    /// `seed` drives stochastic layers (dropout) in training mode.
    pub fn new(store: &'s ParamStore<T>, training: bool, seed: u64) -> Self {
        Pass {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            training,
            rng: RefCell::new(Rng::seed_from_u64(seed)),
            stats: RefCell::new(Vec::new()),
            warnings: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&self) -> RefMut<'_, Rng> {
        self.rng.borrow_mut()
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.leaf(self.store.param(id).clone()))
    }

    pub fn input(&self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub(crate) fn record_stats(&self, mean: BufferId, var: BufferId, stats: BatchStats<T>) {
        self.stats
            .borrow_mut()
            .push(StatUpdate { mean, var, stats });
    }

    pub fn warn(&self, msg: impl Into<String>) {
        self.warnings.borrow_mut().push(msg.into());
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    /// Runs backward from `loss` (when given) and collects per-parameter
    /// gradients in store order.
    pub fn finish(self, loss: Option<Var>) -> Result<PassOutcome<T>> {
        let bound = self.bound.into_inner();
        let grads = match loss {
            Some(loss) => {
                let mut g = self.tape.backward(loss)?;
                bound.iter().map(|b| b.and_then(|v| g.take(v))).collect()
            }
            None => vec![None; bound.len()],
        };
        Ok(PassOutcome {
            grads,
            stats: self.stats.into_inner(),
        })
    }
}
