use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Polynomial learning-rate decay from `base_lr` to `min_lr` over `total_iters`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub power: f64,
    pub total_iters: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-3,
            min_lr: 1e-4,
            power: 0.9,
            total_iters: 80_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "schedule needs base_lr > min_lr >= 0, got {} / {}",
                self.base_lr, self.min_lr
            )));
        }
        if !(self.power > 0.0) || self.total_iters == 0 {
            return Err(Error::Config("schedule needs power > 0 and total_iters > 0".into()));
        }
        Ok(())
    }

    /// `(base - min) * (1 - t/T)^power + min`, clamped to `min` for `t >= T`.
    pub fn lr(&self, iter: usize) -> f64 {
        if iter == 0 {
            return self.base_lr;
        }
        if iter >= self.total_iters {
            return self.min_lr;
        }
        let frac = 1.0 - iter as f64 / self.total_iters as f64;
        (self.base_lr - self.min_lr) * frac.powf(self.power) + self.min_lr
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl Sgd {
    /// `v = momentum v + g + wd p; p -= lr v`, then clears gradients.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, lr: f64) {
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for p in params.iter_mut() {
            let data = p.value.data_mut();
            for ((x, v), g) in data.iter_mut().zip(p.velocity.iter_mut()).zip(p.grad.iter_mut()) {
                *v = mu * *v + *g + wd * *x;
                *x -= lr * *v;
                *g = T::zero();
            }
        }
    }

    pub fn step_scheduled<T: Scalar>(&self, params: &mut ParamStore<T>, schedule: &LrSchedule, iter: usize) -> f64 {
        let lr = schedule.lr(iter);
        self.step(params, lr);
        lr
    }
}
