//! Adam over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Gradients, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `vars` are the tape handles the store was bound to.
    pub fn update(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.wrt(vars[k]);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                theta[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn ten_steps_match_scalar_recurrence() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.5));
        let mut adam = Adam::new(&store, 0.1, AdamConfig::default());
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            // f(x) = x³ - 2x
            let xv = b.vars()[0];
            let sq = tape.square(xv);
            let cube = tape.mul(sq, xv).unwrap();
            let lin = tape.scale(xv, -2.0);
            let f = tape.add(cube, lin).unwrap();
            let g = tape.backward(f).unwrap();
            adam.update(&mut store, b.vars(), &g);

            let grad = 3.0 * x * x - 2.0;
            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(store.find("x").unwrap()).item() - x).abs() < 1e-12, "step {t}");
        }
        assert_eq!(adam.steps(), 10);
    }
}
