//! Binding of a [`ParamStore`] onto a fresh [`Tape`] for one forward pass.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a> Session<'a> {
    /// `track_grads` decides whether parameters enter the tape as gradient
    /// leaves or as constants.
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track_grads {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Backpropagate `loss`; result is indexed by parameter id. Parameters
    /// the loss does not depend on get `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.tape.backward(loss)?;
        let out = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        self.bound.iter_mut().for_each(|b| *b = None);
        Ok(out)
    }
}
