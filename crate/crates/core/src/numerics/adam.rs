//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{Mat, NumericsError, ParamStore};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moment estimates and the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First moments, one per parameter in store registration order.
    pub m: Vec<Mat>,
    /// Second moments, same layout as `m`.
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let m = params
            .ids()
            .map(|id| {
                let p = params.value(id);
                Mat::zeros(p.rows(), p.cols())
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// One Adam update from the gradients currently accumulated in `params`.
    /// Deterministic: identical inputs produce bit-identical parameters.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumericsError> {
        if self.m.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "adam_step",
                expected: format!("{} parameters", self.m.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if params.grad(id).shape() != self.m[i].shape() {
                return Err(NumericsError::ShapeMismatch {
                    context: "adam_step",
                    expected: format!("{:?}", self.m[i].shape()),
                    actual: format!("{:?}", params.grad(id).shape()),
                });
            }
            let g = params.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mj, vj), &gj) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            }
            let value = params.value_mut(id);
            for ((pj, &mj), &vj) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *pj -= c.lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(
            "w",
            Mat::from_vec(1, values.len(), values.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = store_with(&[1.5, -2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            store.zero_grads();
            adam.step(&mut store).unwrap();
        }
        let id = store.lookup("w").unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_magnitude_close_to_lr_times_sign() {
        // At t=1, mhat = g and vhat = g^2, so the update is
        // lr * g / (|g| + eps) = lr * sign(g) up to epsilon smoothing.
        let mut store = store_with(&[0.0, 0.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut adam = AdamState::new(cfg, &store);
        let id = store.lookup("w").unwrap();
        store
            .accumulate_grad(id, &Mat::from_vec(1, 2, vec![3.0, -0.25]).unwrap())
            .unwrap();
        adam.step(&mut store).unwrap();
        let w = store.value(id).data();
        let expect0 = -0.01 * 3.0 / (3.0 + 1e-8);
        let expect1 = 0.01 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn replay_is_bit_exact() {
        let run = || {
            let mut store = store_with(&[0.3, 0.7, -0.1]);
            let mut adam = AdamState::new(AdamConfig::default(), &store);
            let id = store.lookup("w").unwrap();
            for k in 0..20 {
                store.zero_grads();
                let g = Mat::from_vec(1, 3, vec![0.1 * k as f64, -0.2, 0.05]).unwrap();
                store.accumulate_grad(id, &g).unwrap();
                adam.step(&mut store).unwrap();
            }
            store.value(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
