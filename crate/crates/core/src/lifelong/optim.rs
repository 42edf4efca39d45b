//! Adam over a [`ParamStore`].

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Matrix, Matrix)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are skipped even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let value = store.value_mut(*id);
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
            if m.shape() != grad.shape() {
                // the head grew since the last step
                *m = Matrix::zeros(grad.rows(), grad.cols());
                *v = Matrix::zeros(grad.rows(), grad.cols());
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
            for (i, gi) in grad.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
