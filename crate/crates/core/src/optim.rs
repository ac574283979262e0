//! SGD with momentum and weight decay, and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// Stochastic gradient descent with one velocity buffer per trainable
/// parameter. Running statistics are skipped entirely.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// One update from the gradients currently held in `store`:
    ///
    /// ```text
    /// g = grad + wd * theta
    /// v = momentum * v + g
    /// theta -= lr * (g + momentum * v)   (nesterov)
    /// theta -= lr * v                    (otherwise)
    /// ```
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), Vec::new());
        }
        let lr = T::of(lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let v = &mut self.velocity[id.0];
            if v.len() != p.value.numel() {
                *v = vec![T::zero(); p.value.numel()];
            }
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i] + wd * theta[i];
                v[i] = mu * v[i] + g;
                let upd = if self.config.nesterov {
                    g + mu * v[i]
                } else {
                    v[i]
                };
                theta[i] = theta[i] - lr * upd;
            }
        }
    }
}

/// When the learning rate drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecayEpochs {
    /// Divide every `n` epochs.
    Every(usize),
    /// Divide at each listed epoch.
    Milestones(Vec<usize>),
}

impl DecayEpochs {
    pub fn validate(&self) -> Result<()> {
        match self {
            DecayEpochs::Every(0) => {
                Err(Error::config("learning-rate decay period must be positive"))
            }
            DecayEpochs::Milestones(m) if m.windows(2).any(|w| w[0] >= w[1]) => Err(Error::config(
                format!("learning-rate milestones {m:?} must be strictly increasing"),
            )),
            _ => Ok(()),
        }
    }

    fn drops_before(&self, epoch: usize) -> usize {
        match self {
            DecayEpochs::Every(n) => epoch / n,
            DecayEpochs::Milestones(m) => m.iter().filter(|&&e| e <= epoch).count(),
        }
    }
}

/// Piecewise-constant learning rate: `lr0` divided by `factor` once per
/// decay point reached.
pub fn lr_at(epoch: usize, lr0: f64, factor: f64, decay: &DecayEpochs) -> f64 {
    let mut lr = lr0;
    for _ in 0..decay.drops_before(epoch) {
        lr /= factor;
    }
    lr
}
