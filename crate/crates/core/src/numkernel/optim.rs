use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{KernelError, ParamSet, Tensor};

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
            min_lr: lr,
        }
    }

    /// Learning rate applied by the step that starts at counter `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if t < self.warmup_steps {
            return self.base_lr * (t + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        if t >= self.total_steps || self.total_steps <= self.warmup_steps {
            return self.min_lr;
        }
        let progress = (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW state: moment buffers for trainable parameters only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(schedule: LrSchedule, weight_decay: f64) -> Self {
        Self {
            moments: BTreeMap::new(),
            step: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One AdamW update with decoupled weight decay. Returns the learning rate
/// used. Frozen parameters are neither read nor written.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<f64, KernelError> {
    let trainable = params.trainable_names();
    for name in &trainable {
        let g = grads
            .get(name)
            .ok_or_else(|| KernelError::MissingGradient(name.clone()))?;
        if g.len() != params.tensor(name)?.len() {
            return Err(KernelError::ShapeMismatch(format!("gradient for {name}")));
        }
    }
    let lr = state.schedule.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for name in &trainable {
        let g = grads[name].data();
        let w = params.get_mut(name).expect("checked above");
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(w.shape()),
            v: Tensor::zeros(w.shape()),
        });
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (i, wi) in w.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *wi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *wi);
        }
    }
    state.step += 1;
    Ok(lr)
}
