//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Scalar, Tape, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    /// LSTM gate bias of width 4·hidden: zeros with the forget-gate block at 1.
    ForgetBias { hidden: usize },
}

/// Declaration of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Glorot-initialized matrix `[rows, cols]`.
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, &[rows, cols], Init::Glorot { fan_in: rows, fan_out: cols })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Zeros)
    }

    fn materialize<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self.init {
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(self.shape.clone(), |_| T::lit(rng.random_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::ForgetBias { hidden } => Tensor::from_fn(self.shape.clone(), |i| {
                if (hidden..2 * hidden).contains(&i) {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        }
    }
}

/// Trainable tensors keyed by name, in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Initializes every declared parameter, drawing in declaration order
    /// from a generator seeded by `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| (s.name.clone(), s.materialize(&mut rng)))
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter on `tape`, as leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, looked up by name.
pub struct Bound<'t, T: Scalar = f32> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Pairs names with already-recorded vars.
    pub fn from_vars(names: &[String], vars: &[Var<'t, T>]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Per-parameter gradients, zero-filled for parameters the loss did not
    /// touch.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_forget_bias() {
        let specs = [
            ParamSpec::matrix("w", 10, 20),
            ParamSpec::new("b", &[8], Init::ForgetBias { hidden: 2 }),
        ];
        let p: ParamSet<f64> = ParamSet::init(&specs, 3);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() < bound));
        assert_eq!(p.get("b").unwrap().data(), &[0., 0., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn init_is_seeded() {
        let specs = [ParamSpec::matrix("w", 4, 4)];
        let a: ParamSet<f32> = ParamSet::init(&specs, 1);
        let b: ParamSet<f32> = ParamSet::init(&specs, 1);
        let c: ParamSet<f32> = ParamSet::init(&specs, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
