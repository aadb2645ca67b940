//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zero moments shaped like the store's tensors.
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self::with_moments(config, zeros)
    }

    pub fn with_moments(config: AdamConfig, zeros: Vec<Vec<f64>>) -> Self {
        AdamState {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            learning_rate: config.learning_rate,
        }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        self.step_count += 1;
        let (c1, c2) = self.corrections();
        let hyper = self.hyper(c1, c2);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            update(
                t.values_mut(),
                &grad,
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                hyper,
            )?;
        }
        Ok(())
    }

    /// Update raw slices; `moments` selects which tracked tensor they are.
    pub fn step_slices(&mut self, updates: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        if updates.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                updates.len()
            )));
        }
        self.step_count += 1;
        let (c1, c2) = self.corrections();
        let hyper = self.hyper(c1, c2);
        for (i, (params, grads)) in updates.iter_mut().enumerate() {
            update(params, grads, &mut self.first_moment[i], &mut self.second_moment[i], hyper)?;
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step_count as f64;
        (1.0 - math::pow(self.beta1, t), 1.0 - math::pow(self.beta2, t))
    }

    fn hyper(&self, c1: f64, c2: f64) -> Hyper {
        Hyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            c1,
            c2,
        }
    }
}

#[derive(Clone, Copy)]
struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

fn update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], h: Hyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Dimension(format!(
            "adam: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / h.c1;
        let v_hat = v[i] / h.c2;
        params[i] -= h.lr * m_hat / (math::sqrt(v_hat) + h.eps);
    }
    Ok(())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = math::sqrt(total);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in store.tensors_mut() {
            if t.grad().is_some() {
                let scaled: Vec<f64> = t.grad().unwrap().iter().map(|g| g * (scale - 1.0)).collect();
                // grad += grad * (scale - 1)
                t.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Tensor};

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.98, 1e-6));
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(&[3], |i| i as f64)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(adam.step_count, 1);
        assert_eq!(store.get(store.id("w").unwrap()).values(), &[0.0, 1.0, 2.0]);
        assert!(adam.first_moment[0].iter().all(|m| *m == 0.0));
    }

    #[test]
    fn minimises_square_from_five() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(5.0)).unwrap();
        let mut adam = AdamState::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
        for _ in 0..200 {
            store.zero_grad();
            let mut g = Graph::new();
            let xv = g.param(&store, x);
            let sq = g.mul(xv, xv).unwrap();
            g.backward(sq).unwrap();
            g.accumulate_param_grads(&mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert_eq!(adam.step_count, 200);
        assert!(store.get(x).values()[0].abs() < 0.5, "{}", store.get(x).values()[0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &ParamStore::new());
        assert!(matches!(adam.step(&mut store), Err(Error::Dimension(_))));
        let mut p = [0.0; 2];
        let mut adam = AdamState::with_moments(AdamConfig::default(), vec![vec![0.0; 3]]);
        assert!(adam.step_slices(&mut [(&mut p[..], &[0.0, 0.0][..])]).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        store.get_mut(w).accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(w).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
