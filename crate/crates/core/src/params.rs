//! Named parameter storage, initialization, and binding onto a tape.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{AnyTensor, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// `U(-bound, bound)`.
    Uniform(f64),
    Constant(f64),
}

/// Receives parameter declarations while a model lays itself out. Allows the
/// same layout code to allocate weights or merely count them.
pub trait ParamSink {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
}

/// Counts parameters without allocating them.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counter {
    pub tensors: usize,
    pub values: usize,
}

impl ParamSink for Counter {
    fn declare(&mut self, _name: &str, shape: &[usize], _init: Init) -> ParamId {
        self.tensors += 1;
        self.values += shape.iter().product::<usize>();
        ParamId(self.tensors - 1)
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor by name, checking its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let Some(id) = self.find(name) else {
            bail!(Load, "unknown tensor `{name}`");
        };
        if self.tensors[id.0].shape() != tensor.shape() {
            bail!(
                Load,
                "tensor `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                self.tensors[id.0].shape()
            );
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect() }
    }
}

/// Tape handles for the tensors of one store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order, `None` where no sweep reached the tensor.
    pub fn grads<'a, T: Scalar>(&self, tape: &'a Tape<T>) -> Vec<Option<&'a [T]>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Allocates parameters into a store, drawing initial values from a seeded RNG.
pub struct Initializer<'a, T> {
    pub store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Initializer<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Initializer { store: ParamStore::default(), rng }
    }
}

impl<T: Scalar> ParamSink for Initializer<'_, T> {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let bound = match init {
            Init::FanIn(fan_in) => 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64),
            Init::Uniform(b) => b,
            Init::Constant(c) => {
                return self.store.push(name, Tensor::full(shape, T::from_f64(c)));
            }
        };
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)));
        self.store.push(name, t)
    }
}

/// Replaces every tensor of `store` from named tensors. Rejects unknown,
/// duplicate, missing, mistyped and misshapen entries, naming the first one.
pub fn import_into<T: Scalar>(store: &mut ParamStore<T>, tensors: Vec<(String, AnyTensor)>) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let Some(id) = store.find(&name) else {
            bail!(Load, "unknown tensor `{name}`");
        };
        if core::mem::replace(&mut seen[id.0], true) {
            bail!(Load, "duplicate tensor `{name}`");
        }
        if t.dtype() != T::DTYPE {
            bail!(Load, "tensor `{name}` has type {:?}, expected {:?}", t.dtype(), T::DTYPE);
        }
        store.assign(&name, t.into_typed::<T>().expect("dtype checked"))?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        bail!(Load, "missing tensor `{}`", store.names[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::SeedableRng;

    fn sample() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Initializer::new(&mut rng);
        init.declare("w", &[4, 3], Init::FanIn(3));
        init.declare("b", &[4], Init::Constant(1.0));
        init.store
    }

    #[test]
    fn initializer_respects_bounds_and_constants() {
        let s = sample();
        let bound = 1.0 / 3f32.sqrt();
        assert!(s.get(ParamId(0)).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s.get(ParamId(1)).data(), &[1.0; 4]);
        assert_eq!(s.count(), 16);
        let mut c = Counter::default();
        c.declare("w", &[4, 3], Init::FanIn(3));
        c.declare("b", &[4], Init::Constant(1.0));
        assert_eq!((c.tensors, c.values), (2, 16));
    }

    #[test]
    fn import_round_trips() {
        let s = sample();
        let mut t = sample();
        t.get_mut(ParamId(0)).data_mut()[0] = 9.0;
        let exported: Vec<(String, AnyTensor)> = s.iter().map(|(n, v)| (n.to_string(), AnyTensor::from(v.clone()))).collect();
        import_into(&mut t, exported).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn import_names_the_first_offender() {
        let s = sample();
        let good = || s.iter().map(|(n, v)| (n.to_string(), AnyTensor::from(v.clone()))).collect::<Vec<_>>();
        let mut t = sample();

        let mut extra = good();
        extra.push(("ghost".into(), AnyTensor::from(Tensor::<f32>::zeros(&[1]))));
        assert!(matches!(import_into(&mut t, extra), Err(Error::Load(m)) if m.contains("ghost")));

        let missing = good().into_iter().filter(|(n, _)| n != "b").collect();
        assert!(matches!(import_into(&mut t, missing), Err(Error::Load(m)) if m.contains("missing") && m.contains('b')));

        let mut dup = good();
        dup.push(dup[0].clone());
        assert!(matches!(import_into(&mut t, dup), Err(Error::Load(m)) if m.contains("duplicate")));

        let mut shape = good();
        shape[0].1 = AnyTensor::from(Tensor::<f32>::zeros(&[3, 4]));
        assert!(matches!(import_into(&mut t, shape), Err(Error::Load(m)) if m.contains("`w`")));

        let mut dtype = good();
        dtype[1].1 = AnyTensor::from(Tensor::<f64>::zeros(&[4]));
        assert!(matches!(import_into(&mut t, dtype), Err(Error::Load(m)) if m.contains("`b`")));
    }
}
