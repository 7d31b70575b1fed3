//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn merge(&mut self, other: ParamSet) {
        self.map.extend(other.map);
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Exact bit patterns, for freezing checks.
    pub fn fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.to_bits()))
            .collect()
    }

    /// Records every tensor as a leaf. `trainable=false` yields gradient-free constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { map }
    }
}

/// Parameter name -> tape handle.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("parameter {name} not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn extend(&mut self, other: Bound) {
        self.map.extend(other.map);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

/// Glorot-uniform `[fan_in x fan_out]` matrix.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Inserts `{prefix}.weight` (Glorot) and a zero `{prefix}.bias`.
pub fn init_linear(ps: &mut ParamSet, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{prefix}.weight"), glorot(rng, fan_in, fan_out));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]));
}

/// `x W + b` using `{prefix}.weight` / `{prefix}.bias`.
pub fn apply_linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.try_get(&format!("{prefix}.bias"));
    tape.linear(x, w, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = glorot(&mut seeded(3), 10, 20);
        let b = glorot(&mut seeded(3), 10, 20);
        assert_eq!(a, b);
        let lim = (6.0f64 / 30.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn scalar_count() {
        let mut ps = ParamSet::new();
        init_linear(&mut ps, &mut seeded(0), "l", 8, 16);
        assert_eq!(ps.scalar_count(), 8 * 16 + 16);
    }
}
