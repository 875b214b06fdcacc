//! Named parameter storage and its binding to a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Names are unique.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Registers every parameter on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.variable(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape variables of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaves in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter, zeros for parameters the loss ignores.
    pub fn gradients<S: Real>(&self, tape: &Tape<S>, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(tape, v)).collect()
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<S: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..=bound)))
}

/// Variance-preserving init for layers followed by ReLU.
pub fn he_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Variance-preserving init for saturating activations.
pub fn xavier_uniform<S: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_collect_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 3.0));
        let b = store.add("b", Tensor::full(&[1], 1.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let s = tape.sum(bound.var(a)).unwrap();
        let g = tape.backward(s).unwrap();
        let grads = bound.gradients(&tape, &g);
        assert_eq!(grads[a.index()].data(), &[1.0, 1.0]);
        assert_eq!(grads[b.index()].data(), &[0.0]);
        assert_eq!(store.scalar_count(), 3);
        assert_eq!(store.find("b"), Some(b));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let x: Tensor<f32> = he_uniform(&[64], 6, &mut r1);
        let y: Tensor<f32> = he_uniform(&[64], 6, &mut r2);
        assert_eq!(x, y);
        assert!(x.data().iter().all(|v| v.abs() <= 1.0));
    }
}
