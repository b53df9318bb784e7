//! Stochastic gradient descent with classical momentum and L2 weight decay.
//!
//! The update follows the common deep-learning convention of folding decay
//! into the gradient before the momentum buffer:
//!
//! ```text
//! v ← μ·v + (g + λ·w)
//! w ← w − lr·v
//! ```

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Hyperparameters for [`Sgd`].
#[derive(Copy, Clone, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        // A zero rate is legal: the update is then an exact no-op, which the
        // trainers rely on for dry runs that must leave parameters unchanged.
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {weight_decay}"
            )));
        }
        Ok(SgdConfig {
            lr,
            momentum,
            weight_decay,
        })
    }
}

/// Optimizer state: one velocity buffer per parameter, allocated lazily so
/// the optimizer can be built before all parameters exist.
pub struct Sgd<T: Scalar> {
    config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    /// Change the learning rate between steps (for simple schedules).
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        self.config = SgdConfig::new(lr, self.config.momentum, self.config.weight_decay)?;
        Ok(())
    }

    /// Apply one update from the accumulated gradients, then zero them.
    /// A NaN/Inf gradient is reported as an error naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        let mu = T::from_f64(self.config.momentum);
        let lr = T::from_f64(self.config.lr);
        let wd = T::from_f64(self.config.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            p.grad
                .ensure_finite(&format!("gradient of `{}`", p.name))?;
            let v = self.velocity[i]
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((vi, &gi), wi) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut().iter_mut())
            {
                *vi = mu * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
            p.value
                .ensure_finite(&format!("parameter `{}` after update", p.name))?;
        }
        store.zero_grads();
        Ok(())
    }
}
