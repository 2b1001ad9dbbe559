use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| {
                let t = params.get(id);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched, but still see the step count advance.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.params().len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.m.len(),
                params.len(),
                grads.params().len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                let p = params.get(id);
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        lhs: p.shape(),
                        rhs: g.shape(),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(v));
        s
    }

    fn grads_for(store: &ParamStore, k: f64) -> Gradients {
        // loss = k * x
        let mut tape = Tape::new(store);
        let id = store.ids().next().unwrap();
        let x = tape.param(id);
        let l = tape.scale(x, k);
        tape.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut store = scalar_store(1.0);
            let grads = grads_for(&store, g);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            adam.step(&mut store, &grads).unwrap();
            let moved = 1.0 - store.get(store.ids().next().unwrap()).item();
            // closed form: lr * g / (|g| + eps)
            let expect = 1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expect).abs() < 1e-15, "{moved} vs {expect}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = scalar_store(0.7);
        let grads = grads_for(&store, 0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(store.ids().next().unwrap()).item(), 0.7);
    }

    #[test]
    fn rejects_foreign_store() {
        let store = scalar_store(0.0);
        let grads = grads_for(&store, 1.0);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(1, 1));
        other.add("b", Tensor::zeros(1, 1));
        let mut adam = AdamState::new(&other, AdamConfig::default());
        assert!(adam.step(&mut other, &grads).is_err());
    }
}
