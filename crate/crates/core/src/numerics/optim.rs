use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor2};

/// Settings for [`Adam`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient slots of `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                (
                    Tensor2::zeros(p.value.rows(), p.value.cols()),
                    Tensor2::zeros(p.value.rows(), p.value.cols()),
                )
            });
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    /// Least squares `0.5 * ||X w - y||^2` with a well-conditioned `X`.
    #[test]
    fn reduces_convex_loss_by_three_orders_within_500_steps() {
        let x = Tensor2::from_rows(&[&[1.0, 0.2], &[0.1, 1.0], &[0.5, 0.5], &[1.0, -1.0]]);
        let y = Tensor2::from_rows(&[&[1.0], &[2.0], &[1.5], &[-1.0]]);
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::from_rows(&[&[0.0], &[0.0]])).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });

        // Optimum is not exactly zero loss, so measure the excess loss.
        let loss_at = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let w = tape.param(store, "w").unwrap();
            let pred = tape.matmul(xv, w).unwrap();
            let r = tape.sub(pred, yv).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let s = tape.sum(sq);
            let l = tape.scale(s, 0.5);
            (tape, l)
        };
        // Closed-form optimum via normal equations.
        let xtx = x.t_matmul(&x).unwrap();
        let xty = x.t_matmul(&y).unwrap();
        let det = xtx.get(0, 0) * xtx.get(1, 1) - xtx.get(0, 1) * xtx.get(1, 0);
        let w0 = (xtx.get(1, 1) * xty.get(0, 0) - xtx.get(0, 1) * xty.get(1, 0)) / det;
        let w1 = (xtx.get(0, 0) * xty.get(1, 0) - xtx.get(1, 0) * xty.get(0, 0)) / det;
        let mut best = ParamStore::new();
        best.insert("w", Tensor2::from_rows(&[&[w0], &[w1]])).unwrap();
        let (t, l) = loss_at(&best);
        let floor = t.scalar(l);

        let (t, l) = loss_at(&store);
        let initial = t.scalar(l) - floor;
        for _ in 0..500 {
            let (mut tape, l) = loss_at(&store);
            let g = tape.backward(l).unwrap();
            store.zero_grad();
            store.accumulate(&g).unwrap();
            opt.step(&mut store);
        }
        let (t, l) = loss_at(&store);
        let last = t.scalar(l) - floor;
        assert!(last < 1e-3 * initial, "excess loss {last} vs initial {initial}");
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::row_vector(vec![1.0, -2.0])).unwrap();
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut store);
        assert_eq!(store.value("w").unwrap(), before.value("w").unwrap());
    }
}
