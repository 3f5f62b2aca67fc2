use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::param::{Parameterized, Slot};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd<T> {
    /// Velocity per parameter name; created on first update.
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(model: &mut dyn Parameterized<T>) -> T {
        let mut sq = T::zero();
        model.visit_mut("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                sq += p.grad.dot(&p.grad).unwrap_or_else(|_| T::zero());
            }
        });
        sq.sqrt()
    }

    /// Applies one update from the accumulated gradients. When `clip > 0`
    /// gradients are first rescaled so their global norm is at most `clip`.
    pub fn step(&mut self, model: &mut dyn Parameterized<T>, lr: f64, momentum: f64, clip: f64) -> Result<()> {
        let scale = if clip > 0.0 {
            let norm = Self::grad_norm(model).as_f64();
            if norm > clip {
                T::lit(clip / norm)
            } else {
                T::one()
            }
        } else {
            T::one()
        };
        let (lr, mu) = (T::lit(lr), T::lit(momentum));
        let mut failure = None;
        model.visit_mut("", &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if v.shape() != p.value.shape() {
                failure = Some(Error::shape("sgd", v.shape(), p.value.shape()));
                return;
            }
            for ((vi, pi), &gi) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
                *vi = mu * *vi + scale * gi;
                *pi -= lr * *vi;
            }
        });
        failure.map_or(Ok(()), Err)
    }
}
