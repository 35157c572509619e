use std::collections::BTreeMap;

use ndarray::Zip;

use super::params::ParameterStore;
use super::tape::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        params.check_grads(grads)?;
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParameterStore::new();
        params.insert("w", array![[1.0, -1.0]]);
        let mut grads = Gradients::new();
        grads.insert("w".into(), array![[0.5, -3.0]]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParameterStore::new();
        params.insert("w", array![[3.0]]);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = params.get("w").unwrap()[[0, 0]];
            let mut grads = Gradients::new();
            grads.insert("w".into(), array![[2.0 * (w - 1.0)]]);
            adam.step(&mut params, &grads).unwrap();
        }
        assert!((params.get("w").unwrap()[[0, 0]] - 1.0).abs() < 1e-3);
    }
}
