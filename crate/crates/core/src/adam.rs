//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter and clears all
    /// gradients. Frozen paths are skipped, moments included.
    pub fn step(&mut self, params: &mut ParamTree) -> Result<()> {
        let missing = params
            .iter()
            .find(|(p, t)| !params.is_frozen(p) && t.grad.is_none())
            .map(|(p, _)| p.clone());
        if let Some(p) = missing {
            return Err(Error::MissingGrad(p));
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let frozen: Vec<String> = params.frozen().map(str::to_string).collect();

        for (path, tensor) in params.iter_mut() {
            if frozen.binary_search(path).is_ok() {
                continue;
            }
            let grad = tensor.grad.take().expect("checked above");
            let n = grad.len();
            let m = self.first_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, value) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if update != 0.0 {
                    *value -= update;
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}
