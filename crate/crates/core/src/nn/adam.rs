use serde::{Deserialize, Serialize};

use super::network::Params;
use super::tensor::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Params<T>>,
    pub v: Vec<Params<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Params<T>]) -> Self {
        let zeros: Vec<Params<T>> = params
            .iter()
            .map(|p| Params {
                weights: vec![T::zero(); p.weights.len()],
                bias: vec![T::zero(); p.bias.len()],
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update; advances `state.t` by one.
    pub fn step<T: Real>(&self, params: &mut [Params<T>], grads: &[Params<T>], state: &mut AdamState<T>) {
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        let one = T::one();
        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            update(&mut p.weights, &g.weights, &mut state.m[k].weights, &mut state.v[k].weights);
            update(&mut p.bias, &g.bias, &mut state.m[k].bias, &mut state.v[k].bias);
        }
    }
}
