//! Named parameter registry, kept outside any [`Graph`].
//!
//! A [`ParamSet`] owns the persistent state of a model: arrays keyed by
//! stable names, in registration order. Each forward/backward cycle binds
//! the set onto a fresh graph with [`ParamSet::bind`], producing one leaf
//! per parameter; losses built from several windows on the same graph
//! therefore accumulate into a single gradient per parameter. Optimizers
//! walk parameters in registration order, which keeps update order (and so
//! floating-point results) reproducible.

use std::collections::HashMap;

use rand::Rng;

use super::array::Array;
use super::graph::{Graph, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter under a unique name.
    pub fn register(&mut self, name: &str, array: Array) {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} registered twice"
        );
        self.index.insert(name.to_string(), self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    /// Register with uniform init on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.register(name, Array::uniform(shape, -bound, bound, rng));
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.arrays.iter().map(Array::numel).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    /// `(name, array)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn array_at(&self, i: usize) -> &Array {
        &self.arrays[i]
    }

    pub fn array_at_mut(&mut self, i: usize) -> &mut Array {
        &mut self.arrays[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Record every parameter as a differentiable leaf on `graph`.
    ///
    /// Call once per graph: re-binding would create distinct leaves whose
    /// gradients no longer pool together.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            tensors: self
                .arrays
                .iter()
                .map(|a| graph.leaf(a.clone()))
                .collect(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }
}

/// A [`ParamSet`] bound onto one graph as leaf tensors.
pub struct Bound<'g> {
    tensors: Vec<Tensor<'g>>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl<'g> Bound<'g> {
    /// Leaf tensor for a parameter. Panics on unknown names: lookups are
    /// compiled into the model code, so a miss is a bug, not input error.
    pub fn get(&self, name: &str) -> Tensor<'g> {
        match self.index.get(name) {
            Some(&i) => self.tensors[i],
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor_at(&self, i: usize) -> Tensor<'g> {
        self.tensors[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Gradient of parameter `i` after backward; zeros if the parameter
    /// did not participate in the loss.
    pub fn grad_at(&self, i: usize) -> Array {
        let t = self.tensors[i];
        t.grad()
            .unwrap_or_else(|| Array::zeros(&t.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registration_order_is_preserved() {
        let mut p = ParamSet::new();
        p.register("b", Array::zeros(&[2]));
        p.register("a", Array::zeros(&[3]));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.total_scalars(), 5);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_name_panics() {
        let mut p = ParamSet::new();
        p.register("w", Array::zeros(&[1]));
        p.register("w", Array::zeros(&[1]));
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        p.register_uniform("w", &[16, 16], 16, &mut rng);
        let bound = 1.0 / 4.0;
        for &v in p.get("w").unwrap().data() {
            assert!(v >= -bound && v <= bound);
        }
    }

    #[test]
    fn gradients_pool_across_uses_of_one_binding() {
        let mut p = ParamSet::new();
        p.register("w", Array::from_vec(vec![2.0]));
        let g = Graph::new();
        let bound = p.bind(&g);
        let w = bound.get("w");
        // Two separate uses of the same leaf: d(w*3 + w*4)/dw = 7.
        let loss = w.scale(3.0).add(w.scale(4.0)).unwrap().sum_all();
        g.backward(loss).unwrap();
        assert_eq!(bound.grad_at(0).data(), &[7.0]);
    }

    #[test]
    fn unused_parameter_reports_zero_gradient() {
        let mut p = ParamSet::new();
        p.register("used", Array::from_vec(vec![1.0]));
        p.register("idle", Array::from_vec(vec![1.0, 1.0]));
        let g = Graph::new();
        let bound = p.bind(&g);
        let loss = bound.get("used").sum_all();
        g.backward(loss).unwrap();
        assert_eq!(bound.grad_at(1).data(), &[0.0, 0.0]);
    }
}
