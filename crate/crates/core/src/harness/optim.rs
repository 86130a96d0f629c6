//! Stochastic gradient descent with momentum and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    /// `v ← μ·v + g`, then `p ← p − lr·v − lr·λ·p`. Parameters without a
    /// gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("sgd step", g.shape(), p.shape()));
                }
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = self.momentum * *vi + gi;
                }
            } else {
                v.data_mut().iter_mut().for_each(|vi| *vi *= self.momentum);
            }
            let decay = lr * self.weight_decay;
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi + decay * *pi;
            }
        }
        Ok(())
    }
}
