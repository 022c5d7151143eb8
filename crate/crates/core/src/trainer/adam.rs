use serde::{Deserialize, Serialize};

use crate::ndtensor::{Gradients, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of a store, in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments must line up with `params` one-to-one.
    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .all(|(id, p)| self.m[id.0].len() == p.tensor.numel() && self.v[id.0].len() == p.tensor.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer moments do not match the parameter set".into()))
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients reject the whole step
/// before any parameter is touched.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
    for (id, p) in params.iter() {
        if let Some(g) = grads.param_ref(id) {
            if !g.all_finite() {
                return Err(Error::divergence(p.name.clone(), "non-finite gradient"));
            }
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, p) in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let g = grads.param_ref(id);
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{ParamKind, Tape, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", ParamKind::Bias, Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    /// Gradients of `c * theta`, i.e. constant gradient `c`.
    fn grad_of_linear(store: &ParamStore, c: f64) -> Gradients {
        let tape = Tape::new();
        let id = store.ids().next().unwrap();
        let loss = tape.param(store, id).scale(c).sum();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = grad_of_linear(&store, 1.0);
        adam_step(&mut st, &mut store, &g).unwrap();
        let theta = store.get(store.ids().next().unwrap()).tensor.data()[0];
        assert!((theta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = scalar_store(0.7);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = grad_of_linear(&store, 0.0);
        adam_step(&mut st, &mut store, &g).unwrap();
        assert_eq!(store.get(store.ids().next().unwrap()).tensor.data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_steps_stay_near_lr() {
        let mut store = scalar_store(0.0);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = grad_of_linear(&store, 3.0);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut st, &mut store, &g).unwrap();
            let theta = store.get(store.ids().next().unwrap()).tensor.data()[0];
            assert!(((prev - theta) - 1e-3).abs() < 1e-9);
            prev = theta;
        }
        assert_eq!(st.t, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut st = AdamState::new(&store, AdamConfig::default());
        let g = grad_of_linear(&store, f64::NAN);
        match adam_step(&mut st, &mut store, &g) {
            Err(Error::Divergence { location, .. }) => assert_eq!(location, "theta"),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(st.t, 0);
        assert_eq!(store.get(store.ids().next().unwrap()).tensor.data()[0], 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let store = scalar_store(0.0);
        let mut g = grad_of_linear(&store, 500.0);
        assert_eq!(clip_global_norm(&mut g, 100.0), 500.0);
        assert!((g.global_norm() - 100.0).abs() < 1e-12);
    }
}
