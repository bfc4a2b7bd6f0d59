use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

/// Optimisation settings shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 5000, batch_size: 8, lr_start: 1e-4, lr_end: 1e-5, weight_decay: 0.01, clip_norm: Some(1.0), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(contract_err!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch_size == 0 {
            return Err(contract_err!("batch size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(contract_err!("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Linear decay from `lr_start` at step 0 to `lr_end` at `iterations`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.iterations {
        return Err(contract_err!("step {step} beyond {} iterations", cfg.iterations));
    }
    if cfg.iterations == 0 {
        return Ok(cfg.lr_start);
    }
    let f = step as f64 / cfg.iterations as f64;
    Ok(cfg.lr_start + (cfg.lr_end - cfg.lr_start) * f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { step: 0, m: z.clone(), v: z }
    }
}

/// One decoupled-weight-decay Adam update from the gradients in `store`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, opt: &AdamW, lr: f64, wd: f64) -> Result<()> {
    adamw_step_masked(store, state, opt, lr, wd, None)
}

/// [`adamw_step`] that leaves parameters with `active[i] == false` and
/// their moments untouched.
pub fn adamw_step_masked<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    opt: &AdamW,
    lr: f64,
    wd: f64,
    active: Option<&[bool]>,
) -> Result<()> {
    if state.m.len() != store.len() || active.is_some_and(|a| a.len() != store.len()) {
        return Err(contract_err!("optimizer state has {} slots for {} parameters", state.m.len(), store.len()));
    }
    for p in store.iter() {
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let c1 = T::lit(1.0 - opt.beta1.powi(t));
    let c2 = T::lit(1.0 - opt.beta2.powi(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(wd), T::lit(opt.eps));
    for (i, ((p, m), v)) in store.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()).enumerate() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = p.grad.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * g;
            let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let (mh, vh) = (mi / c1, vi / c2);
            theta[i] = theta[i] - lr * mh / (vh.sqrt() + eps) - lr * wd * theta[i];
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let n = store.grad_norm().as_f64();
    if n > max_norm && n.is_finite() {
        store.scale_grads(T::lit(max_norm / n));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[1, 1], theta));
        s.get_mut(id).grad = Tensor::full(&[1, 1], g);
        s
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = scalar_store(1.0, 1.0);
        let mut st = AdamState::zeros(&s);
        adamw_step(&mut s, &mut st, &AdamW::default(), 0.1, 0.0).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().value.data()[0] - want).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_cases() {
        let mut s = scalar_store(2.0, 0.0);
        let mut st = AdamState::zeros(&s);
        adamw_step(&mut s, &mut st, &AdamW::default(), 0.1, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 2.0);
        adamw_step(&mut s, &mut st, &AdamW::default(), 0.1, 0.5).unwrap();
        assert!((s.iter().next().unwrap().value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut st = AdamState::zeros(&s);
        assert!(matches!(adamw_step(&mut s, &mut st, &AdamW::default(), 0.1, 0.0), Err(Error::Numeric(_))));
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(5000, &cfg).unwrap() - 1e-5).abs() < 1e-18);
        assert!((lr_at(2500, &cfg).unwrap() - 5.5e-5).abs() < 1e-18);
        assert!(lr_at(5001, &cfg).is_err());
        let bad = TrainConfig { lr_start: 1e-6, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = scalar_store(0.0, 3.0);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 3.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
