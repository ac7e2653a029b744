use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Self::default() }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW { config, step: 0, first: vec![None; num_params], second: vec![None; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i] == None` leaves parameter `i` untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(c.lr * c.weight_decay);
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            let p = params.get_mut(id);
            assert_eq!(p.shape(), g.shape(), "gradient shape for {id:?}");
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - decay * *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
