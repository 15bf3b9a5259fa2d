//! AdamW with decoupled weight decay and bias-corrected moments, plus the
//! learning-rate schedules used by the training loop.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{shape_err, Result, TiltError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(hyper: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at learning rate `lr` (the schedule's value for this step).
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(TiltError::Contract(format!("negative learning rate {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return shape_err(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.tensors_mut().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err(format!(
                "adamw: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            ));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - h.beta1.powi(t));
    let bc2 = T::lit(1.0 - h.beta2.powi(t));
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
    let lr_t = T::lit(lr);
    let decay = T::one() - T::lit(lr * h.weight_decay);
    let eps = T::lit(h.eps);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + one_b1 * *gi;
            vd[i] = b2 * vd[i] + one_b2 * *gi * *gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear decay from `base_lr` at step 0 to 0 at `total`.
pub fn lr_linear(step: u64, total: u64, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(TiltError::Contract("linear schedule over zero steps".into()));
    }
    Ok((base_lr * (1.0 - step as f64 / total as f64)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Constant,
}

impl Schedule {
    pub fn lr(self, step: u64, total: u64, base_lr: f64) -> Result<f64> {
        match self {
            Schedule::Linear => lr_linear(step, total, base_lr),
            Schedule::Constant => Ok(base_lr),
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let x = v.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(hyper, &p);
        adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
        let mut p = store(&[0.5, 0.5]);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            eps: 1e-12,
            ..Default::default()
        };
        let mut st = OptimizerState::new(hyper, &p);
        let g = Tensor::from_f64(&[2], &[0.3, -7.0]).unwrap();
        adamw_step(&mut p, &[g], &mut st, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        assert_abs_diff_eq!(w[0], 0.49, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], 0.51, epsilon = 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_proportionally() {
        let mut p = store(&[2.0, -4.0]);
        let hyper = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut st = OptimizerState::new(hyper, &p);
        let lr = 0.1;
        adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut st, lr).unwrap();
        let w = p.get("w").unwrap().data();
        assert_abs_diff_eq!(w[0], 2.0 - lr * 0.01 * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], -4.0 + lr * 0.01 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        assert!(adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 1e-3).is_err());
        assert!(adamw_step(&mut p, &[], &mut st, 1e-3).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut p = store(&[1.0]);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        for expected in 1..=4 {
            adamw_step(&mut p, &[Tensor::full(&[1], 0.5)], &mut st, 1e-3).unwrap();
            assert_eq!(st.step, expected);
        }
    }

    #[test]
    fn linear_schedule_endpoints() {
        assert_eq!(lr_linear(0, 100, 2e-4).unwrap(), 2e-4);
        assert_eq!(lr_linear(100, 100, 2e-4).unwrap(), 0.0);
        assert_abs_diff_eq!(lr_linear(50, 100, 2e-4).unwrap(), 1e-4, epsilon = 1e-18);
        assert_eq!(lr_linear(150, 100, 2e-4).unwrap(), 0.0);
        assert!(lr_linear(0, 0, 2e-4).is_err());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_abs_diff_eq!(n, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0].data()[0], 0.6, epsilon = 1e-12);
    }
}
