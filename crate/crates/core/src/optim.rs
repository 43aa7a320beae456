//! Rectified Adam and the constant-then-cosine learning-rate schedule.

use crate::error::{arg_err, Result};
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adaptive step is used once the SMA length exceeds this. The reference
    /// implementation uses 5; 4 is the bare analytic bound.
    pub rho_threshold: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rho_threshold: 5.0,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: RAdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub base_lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, base_lr: f64) -> Self {
        Self::with_config(store, base_lr, RAdamConfig::default())
    }

    pub fn with_config(store: &ParamStore<T>, base_lr: f64, config: RAdamConfig) -> Self {
        let zeros = |n| vec![T::zero(); n];
        Self {
            config,
            first: store.iter().map(|(_, p)| zeros(p.tensor.len())).collect(),
            second: store.iter().map(|(_, p)| zeros(p.tensor.len())).collect(),
            step: 0,
            base_lr,
        }
    }
}

/// One rectified-Adam update of every parameter that has a gradient, using
/// learning rate `lr`. The step counter advances even when `lr == 0`.
pub fn radam_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) {
    state.step += 1;
    let t = state.step as f64;
    let RAdamConfig {
        beta1,
        beta2,
        eps,
        rho_threshold,
    } = state.config;
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(t);
    let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    let bias1 = 1.0 - beta1.powf(t);
    let rect = if rho_t > rho_threshold {
        Some(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt(),
        )
    } else {
        None
    };
    let (b1, b2) = (T::c(beta1), T::c(beta2));
    let (ob1, ob2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
    for (i, p) in store.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let values = p.tensor.data_mut();
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + ob1 * g;
            v[j] = b2 * v[j] + ob2 * g * g;
            let m_hat = m[j].f64() / bias1;
            let delta = match rect {
                Some(r) => {
                    let v_hat = (v[j].f64() / (1.0 - b2t)).sqrt();
                    lr * r * m_hat / (v_hat + eps)
                }
                None => lr * m_hat,
            };
            values[j] -= T::c(delta);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub anneal_start_fraction: f64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            anneal_start_fraction: 2.0 / 3.0,
            floor: 0.0,
        }
    }

    /// Constant `base_lr` until the anneal start, then a half-cosine down to
    /// `floor` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(arg_err(
                "lr_at",
                format!("step {step} beyond {} total steps", self.total_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.anneal_start_fraction) {
            return Err(arg_err("lr_at", "anneal start fraction outside [0,1]"));
        }
        let start = self.anneal_start_fraction * self.total_steps as f64;
        let s = step as f64;
        if s <= start || self.total_steps == 0 {
            return Ok(self.base_lr);
        }
        let progress = ((s - start) / (self.total_steps as f64 - start)).min(1.0);
        Ok(self.floor
            + (self.base_lr - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
