//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::Params;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names holding optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    /// One update of every tensor in `grads`, at the learning rate `lr(name)`.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Matrix>, lr: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let rate = lr(name);
            for (((pv, &gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= rate * (update + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_moves_against_gradient() {
        for g in [2.5, -0.3] {
            let mut params = Params::new();
            params.insert("w", Matrix::filled(1, 1, 1.0));
            let grads: BTreeMap<String, Matrix> = [("w".to_string(), Matrix::filled(1, 1, g))].into();
            let mut opt = AdamW::new(0.0);
            opt.step(&mut params, &grads, |_| 0.01).unwrap();
            let moved = params.get("w").unwrap().get(0, 0) - 1.0;
            assert!(moved * g < 0.0);
            // Adam's first step has magnitude ≈ lr
            assert!((moved.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut params = Params::new();
        params.insert("w", Matrix::filled(1, 1, 2.0));
        let grads: BTreeMap<String, Matrix> = [("w".to_string(), Matrix::zeros(1, 1))].into();
        let mut opt = AdamW::new(0.1);
        opt.step(&mut params, &grads, |_| 0.5).unwrap();
        assert!((params.get("w").unwrap().get(0, 0) - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }
}
