//! Named parameter tensors with gradient slots, and the layout used to create them.

use std::ops::Index;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Ordered list of parameter declarations. Ids are positions in this list, so the same
/// layout always yields the same ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "parameter `{name}` declared twice"
        );
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Draws every tensor in declaration order. Values are drawn in 64-bit and then cast,
    /// so 32- and 64-bit stores built from one seed agree up to rounding.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let data: Vec<f64> = match spec.init {
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..spec.rows * spec.cols)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect()
                }
                Init::Zeros => vec![0.0; spec.rows * spec.cols],
                Init::Constant(c) => vec![c; spec.rows * spec.cols],
            };
            let t = Tensor::from_f64(spec.rows, spec.cols, &data).expect("declared shape");
            store.push(spec.name.clone(), t);
        }
        store
    }

    /// Checks that a store (for example one read from a checkpoint) matches this layout.
    pub fn validate<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: layout has {}, store has {}",
                self.specs.len(),
                store.len()
            )));
        }
        for (i, spec) in self.specs.iter().enumerate() {
            let t = &store.values[i];
            if store.names[i] != spec.name || t.shape() != (spec.rows, spec.cols) {
                return Err(Error::Config(format!(
                    "parameter {i}: expected `{}` [{}, {}], found `{}` {:?}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    store.names[i],
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameter values plus same-shaped gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

// Gradients are scratch space and never persisted, so equality ignores them.
impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|t| t.shape()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Puts every parameter on `graph` as a gradient-receiving leaf.
    pub fn register(&self, graph: &Graph<T>) -> ParamVars {
        ParamVars(self.values.iter().map(|t| graph.leaf(t.clone())).collect())
    }

    /// Adds the gradients reached by a backward pass into the gradient slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, vars: &ParamVars) {
        for (slot, &v) in self.grads.iter_mut().zip(&vars.0) {
            if let Some(g) = grads.get(v) {
                slot.add_assign(g);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            grads: self.grads.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut layout = ParamLayout::new();
        layout.declare("w", 16, 4, Init::FanInUniform { fan_in: 16 });
        layout.declare("b", 1, 4, Init::Zeros);
        let a: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(3));
        let b: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.values()[0].data().iter().all(|v| v.abs() < 0.25));
        assert!(a.values()[1].data().iter().all(|&v| v == 0.0));
        layout.validate(&a).unwrap();
    }

    #[test]
    fn validate_rejects_shape_change() {
        let mut layout = ParamLayout::new();
        layout.declare("w", 2, 2, Init::Zeros);
        let mut store = ParamStore::<f32>::new();
        store.push("w".into(), Tensor::zeros(2, 3));
        assert!(layout.validate(&store).is_err());
    }
}
