use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    steps: u32,
}

/// AdamW with decoupled weight decay. Moment state is keyed by parameter id.
///
/// Parameters without a gradient in a given step are left untouched
/// (no decay, no moment update).
#[derive(Debug, Clone)]
pub struct AdamW<T, K> {
    pub config: AdamWConfig,
    state: BTreeMap<K, Moments<T>>,
}

impl<T: Scalar, K: Ord + Clone> AdamW<T, K> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, key: &K, param: &mut Matrix<T>, grad: &Matrix<T>) {
        let c = self.config;
        let entry = self.state.entry(key.clone()).or_insert_with(|| Moments {
            m: Matrix::zeros(param.rows(), param.cols()),
            v: Matrix::zeros(param.rows(), param.cols()),
            steps: 0,
        });
        entry.steps += 1;
        let t = entry.steps as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(c.lr * c.weight_decay);

        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *p = *p - decay * *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
