//! Adaptive-moment optimizer over named parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Pulls the gradients of every bound parameter out of a gradient table.
pub fn collect_grads(bound: &Bound, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .map(|(k, &v)| (k.clone(), grads.take(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape, true);
            let x = b.get("x").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum_all(sq).unwrap();
            let mut g = tape.backward(l).unwrap();
            let grads = collect_grads(&b, &mut g);
            opt.step(&mut ps, &grads).unwrap();
        }
        assert!(ps.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(5.0));
        let mut opt = Adam::new(1e-3);
        opt.step(&mut ps, &g).unwrap();
        assert!((ps.get("w").unwrap().data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
