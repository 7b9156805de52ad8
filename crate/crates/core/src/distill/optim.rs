//! AdamW with decoupled weight decay and the warmup/linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 1e-6,
        }
    }
}

/// First/second moments per parameter, aligned with the store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element = f64> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::arg(
                "adamw_step",
                format!(
                    "state holds {} slots for {} parameters",
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if p.value.shape() != m.shape() || p.value.shape() != v.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), m.shape()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected AdamW update at learning rate `lr`:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
///
/// Parameters without an accumulated gradient are left untouched.
pub fn adamw_step<T: Element>(
    state: &mut OptimizerState<T>,
    params: &mut ParamStore<T>,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::arg(
            "adamw_step",
            format!("negative learning rate {lr}"),
        ));
    }
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = T::c(1.0 - b1.powi(t));
    let bc2 = T::c(1.0 - b2.powi(t));
    let (b1, b2) = (T::c(b1), T::c(b2));
    let (one, eps, wd, lr) = (
        T::one(),
        T::c(hyper.epsilon),
        T::c(hyper.weight_decay),
        T::c(lr),
    );
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else {
            continue;
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grad.data();
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over the first `warmup_proportion` of
/// `total_steps`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_proportion: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::arg(
            "lr_at",
            format!("step {step} outside 0..={total_steps}"),
        ));
    }
    let warmup = warmup_steps(total_steps, warmup_proportion);
    Ok(if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// Warmup length in steps, at least one and at most `total − 1` (so the
/// schedule still decays to zero).
pub fn warmup_steps(total_steps: usize, warmup_proportion: f64) -> usize {
    let w = (warmup_proportion * total_steps as f64).round() as usize;
    w.clamp(1, total_steps.saturating_sub(1).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(value)).unwrap();
        if let Some(g) = grad {
            s.get_mut("p").unwrap().grad = Some(Tensor::scalar(g));
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr_over_one_plus_eps() {
        let mut params = single(0.0, Some(1.0));
        let mut state = OptimizerState::new(&params);
        adamw_step(&mut state, &mut params, 5e-4, &AdamWConfig::default()).unwrap();
        let expect = -5e-4 / (1.0 + 1e-6);
        assert!((params.get("p").unwrap().value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = single(0.3, Some(0.0));
        let mut state = OptimizerState::new(&params);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adamw_step(&mut state, &mut params, 5e-4, &hyper).unwrap();
        }
        assert_eq!(params.get("p").unwrap().value.item(), 0.3);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut params = single(2.0, Some(0.0));
        let mut state = OptimizerState::new(&params);
        let hyper = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut expect = 2.0;
        for _ in 0..3 {
            adamw_step(&mut state, &mut params, 0.01, &hyper).unwrap();
            expect *= 1.0 - 0.01 * 0.1;
        }
        assert!((params.get("p").unwrap().value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut params = single(1.0, Some(1.0));
        let mut state = OptimizerState::new(&ParamStore::<f64>::new());
        assert!(adamw_step(&mut state, &mut params, 1e-3, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn schedule_shape() {
        let lr = |s| lr_at(s, 1000, 5e-4, 0.05).unwrap();
        assert_eq!(lr(0), 0.0);
        assert!((lr(25) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr(50), 5e-4);
        assert_eq!(lr(1000), 0.0);
        assert!(lr(49) < lr(50) && lr(51) < lr(50));
        assert!(lr_at(1001, 1000, 5e-4, 0.05).is_err());
    }
}
