use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("adam step counter starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam over every tensor of a parameter store.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Element>(store: &ParamStore<T>) -> Self {
        Self {
            t: 0,
            states: store.iter().map(|p| AdamState::new(p.tensor.numel())).collect(),
        }
    }

    /// Applies the accumulated gradients and replaces each parameter tensor.
    /// Parameters without a gradient are treated as having zero gradient.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(Error::shape("adam", "optimizer built for a different parameter store"));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (id, state) in ids.into_iter().zip(&mut self.states) {
            let t = store.get(id);
            let mut p = t.to_f64_vec();
            let g: Vec<f64> = match t.grad() {
                Some(g) => g.iter().map(|v| v.f64()).collect(),
                None => vec![0.0; p.len()],
            };
            adam_step(&mut p, &g, state, lr, self.t)?;
            store.set(id, p.into_iter().map(T::of).collect())?;
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Invalid(format!("schedule step {t} beyond total {total}")));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, t).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1, 1).unwrap();
        // m_hat = 1, v_hat = 1
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + ADAM_EPS);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let mut last = vec![0.0, 0.0];
        for t in 1..=200 {
            last = p.clone();
            adam_step(&mut p, &[3.0, -0.2], &mut s, 0.01, t).unwrap();
        }
        assert!(((last[0] - p[0]) - 0.01).abs() < 1e-6);
        assert!(((last[1] - p[1]) + 0.01).abs() < 1e-6);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.01, 1).is_err());
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut s, 0.01, 0).is_err());
    }

    #[test]
    fn store_step_uses_accumulated_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.register("w", &[2], vec![1.0, 1.0]).unwrap();
        let mut opt = Adam::new(&store);
        let x = Tensor::new(&[2], vec![2.0f32, 0.0]).unwrap();
        store.get(id).mul(&x).unwrap().sum().unwrap().backward().unwrap();
        opt.step(&mut store, 0.5).unwrap();
        let w = store.get(id).data().to_vec();
        assert!((w[0] - 0.5).abs() < 1e-6);
        assert_eq!(w[1], 1.0);
        assert!(store.get(id).requires_grad());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(10, 10, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 1e-3, 0.0).is_err());
    }
}
