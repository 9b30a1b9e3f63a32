//! Named parameter arrays and their per-step tensor bindings.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One learnable array: plain data between steps, bound to a fresh leaf
/// tensor inside each loss graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(transparent)]
pub struct ParamSet {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape/data mismatch");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), shape, data });
    }

    /// Normal(0, sd) initialized array.
    pub fn add_normal(&mut self, name: &str, shape: Vec<usize>, sd: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal_draw(rng) * sd).collect();
        self.add(name, shape, data);
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![value; n]);
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[*self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Create gradient-requiring leaf tensors for every parameter.
    pub fn bind(&self) -> BoundParams {
        BoundParams {
            tensors: self
                .params
                .iter()
                .map(|p| Tensor::param(p.shape.clone(), p.data.clone()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tensor bindings for one loss graph; gradients are read back from here
/// after `backward`.
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Tensor {
        self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"))].clone()
    }

    /// Gradients in ParamSet order; zeros where a parameter did not
    /// participate in the loss graph.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

/// Box-Muller standard normal draw.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_read_grads() {
        let mut set = ParamSet::new();
        set.add("w", vec![2], vec![1.0, 2.0]);
        set.add("unused", vec![1], vec![5.0]);
        let bound = set.bind();
        let loss = bound.get("w").l2_norm();
        loss.backward();
        let grads = bound.grads();
        let n = 5f64.sqrt();
        assert!((grads[0][0] - 1.0 / n).abs() < 1e-12);
        assert_eq!(grads[1], vec![0.0]);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.add_normal("w", vec![16], 0.02, &mut ChaCha8Rng::seed_from_u64(7));
        b.add_normal("w", vec![16], 0.02, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.get("w").data, b.get("w").data);
    }

    #[test]
    fn serde_roundtrip_is_lossless() {
        let mut set = ParamSet::new();
        set.add("w", vec![3], vec![0.1234567890123456789, -1e-300, 3.5e17]);
        let json = serde_json::to_string(&set).unwrap();
        let mut back: ParamSet = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(set.get("w").data, back.get("w").data);
    }
}
