//! Adam optimizer with bias correction and constant learning rate.

use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam {
    lr: f64,
    step: usize,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

/// Serializable optimizer state (first/second moments keyed by param name).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: usize,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads` must only contain trainable parameters;
    /// iteration follows the given order, so updates are deterministic.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in grads {
            let shape = g.shape();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(shape), Tensor::zeros(shape)));
            let mut p = store.get(*id).clone();
            {
                let pd = p.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..g.numel() {
                    let gi = g.data()[i];
                    md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                    vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    pd[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            store.set(*id, p);
        }
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        let mut moments = Vec::new();
        for (id, entry) in store.iter() {
            if let Some((m, v)) = self.moments.get(&id) {
                moments.push((entry.name.clone(), m.clone(), v.clone()));
            }
        }
        AdamState {
            step: self.step,
            moments,
        }
    }

    pub fn restore(lr: f64, store: &ParamStore, state: &AdamState) -> Self {
        let mut moments = HashMap::new();
        for (name, m, v) in &state.moments {
            if let Some(id) = store.id_of(name) {
                moments.insert(id, (m.clone(), v.clone()));
            }
        }
        Adam {
            lr,
            step: state.step,
            moments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_reference_formula() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::new([1, 1, 1, 2], vec![1.0, -2.0]), true);
        let mut adam = Adam::new(0.01);
        let g = Tensor::new([1, 1, 1, 2], vec![0.5, -0.25]);
        adam.step(&mut store, &[(id, g.clone())]);
        // first step with bias correction: update = lr * g / (|g| + eps)
        for i in 0..2 {
            let expect = [1.0, -2.0][i] - 0.01 * g.data()[i] / (g.data()[i].abs() + ADAM_EPS);
            assert!((store.get(id).data()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn nonzero_gradient_changes_parameters() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::full([1, 1, 2, 2], 0.3), true);
        let before = store.get(id).clone();
        let mut adam = Adam::new(1e-4);
        adam.step(
            &mut store,
            &[(id, Tensor::full([1, 1, 2, 2], 1e-3))],
        );
        assert_ne!(&before, store.get(id));
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (p - 3)^2 by feeding analytic gradients
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(0.0), true);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let p = store.get(id).item();
            let g = Tensor::scalar(2.0 * (p - 3.0));
            adam.step(&mut store, &[(id, g)]);
        }
        assert!((store.get(id).item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(1.0), true);
        let mut adam = Adam::new(0.01);
        adam.step(&mut store, &[(id, Tensor::scalar(0.3))]);
        let state = adam.state(&store);
        let restored = Adam::restore(0.01, &store, &state);
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.moments.len(), 1);
    }
}
