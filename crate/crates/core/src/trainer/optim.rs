//! Global-norm gradient clipping and the Adadelta update.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamSet;

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// L2 norm of all gradients taken together.
pub fn global_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads.values().map(|g| g.sq_norm().to_f64_lossy()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6, lr: 1.0 }
    }
}

/// Running averages of squared gradients and squared updates, one pair per
/// parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta<T: Scalar = f32> {
    pub config: AdadeltaConfig,
    pub sq_grad: BTreeMap<String, Tensor<T>>,
    pub sq_delta: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(config: AdadeltaConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        Self { config, sq_grad: zeros(), sq_delta: zeros() }
    }

    /// Applies one update. Parameters without a gradient entry are left
    /// alone.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        let rho = T::lit(self.config.rho);
        let one_minus = T::lit(1.0 - self.config.rho);
        let eps = T::lit(self.config.eps);
        let lr = T::lit(self.config.lr);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let (Some(eg), Some(ed)) = (self.sq_grad.get_mut(name), self.sq_delta.get_mut(name)) else {
                return Err(Error::Config(format!("no optimizer state for `{name}`")));
            };
            if g.shape() != p.shape() || eg.shape() != p.shape() || ed.shape() != p.shape() {
                return Err(shape_err("adadelta_update", format!("`{name}`: grad {:?}, param {:?}", g.shape(), p.shape())));
            }
            for (((x, &gi), a), d) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.data_mut().iter_mut())
                .zip(ed.data_mut().iter_mut())
            {
                *a = rho * *a + one_minus * gi * gi;
                let delta = -((*d + eps).sqrt() / (*a + eps).sqrt()) * gi;
                *d = rho * *d + one_minus * delta * delta;
                *x = *x + lr * delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(v: &[f64]) -> Grads<f64> {
        BTreeMap::from([("w".to_string(), Tensor::vector(v))])
    }

    #[test]
    fn clip_examples() {
        let mut g = grads(&[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 5.0);
        assert_eq!(g["w"].data(), &[3.0, 4.0]);

        let mut g = grads(&[6.0, 8.0]);
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g["w"].data(), &[3.0, 4.0]);

        let mut g = grads(&[0.0, 0.0]);
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g["w"].data(), &[0.0, 0.0]);
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn first_step_matches_formula() {
        let mut params = ParamSet::from_map(BTreeMap::from([("w".to_string(), Tensor::vector(&[0.0]))]));
        let mut opt = Adadelta::new(AdadeltaConfig::default(), &params);
        opt.update(&mut params, &grads(&[1.0])).unwrap();
        let eg = 0.05;
        let want = -(1e-6f64).sqrt() / (eg + 1e-6f64).sqrt();
        assert!((params.get("w").unwrap().item() - want).abs() < 1e-15);
        assert!((want + 4.472e-3).abs() < 1e-6);
        assert!((opt.sq_grad["w"].item() - eg).abs() < 1e-15);
        assert!((opt.sq_delta["w"].item() - 0.05 * want * want).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_state() {
        let mut params = ParamSet::from_map(BTreeMap::from([("w".to_string(), Tensor::vector(&[0.3, -0.2]))]));
        let mut opt = Adadelta::new(AdadeltaConfig::default(), &params);
        opt.update(&mut params, &grads(&[1.0, -2.0])).unwrap();
        let before = params.clone();
        let (g0, d0) = (opt.sq_grad["w"].clone(), opt.sq_delta["w"].clone());
        opt.update(&mut params, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(params, before);
        for (a, b) in opt.sq_grad["w"].data().iter().zip(g0.data()) {
            assert!((a - 0.95 * b).abs() < 1e-15);
        }
        for (a, b) in opt.sq_delta["w"].data().iter().zip(d0.data()) {
            assert!((a - 0.95 * b).abs() < 1e-20);
        }
    }

    #[test]
    fn identical_histories_give_identical_updates() {
        let mut params = ParamSet::from_map(BTreeMap::from([("w".to_string(), Tensor::vector(&[1.0, 1.0]))]));
        let mut opt = Adadelta::new(AdadeltaConfig::default(), &params);
        for g in [0.5, -1.5, 2.0] {
            opt.update(&mut params, &grads(&[g, g])).unwrap();
        }
        let p = params.get("w").unwrap().data();
        assert_eq!(p[0], p[1]);
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm_and_is_idempotent(v in proptest::collection::vec(-50.0f64..50.0, 1..20), max in 0.1f64..10.0) {
            let mut g = grads(&v);
            clip_gradients(&mut g, max).unwrap();
            prop_assert!(global_norm(&g) <= max + 1e-6);
            let once = g.clone();
            clip_gradients(&mut g, max).unwrap();
            for (a, b) in g["w"].data().iter().zip(once["w"].data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn zero_rate_is_identity(v in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let p0 = Tensor::vector(&vec![0.25; v.len()]);
            let mut params = ParamSet::from_map(BTreeMap::from([("w".to_string(), p0.clone())]));
            let mut opt = Adadelta::new(AdadeltaConfig { lr: 0.0, ..Default::default() }, &params);
            opt.update(&mut params, &grads(&v)).unwrap();
            prop_assert_eq!(params.get("w").unwrap(), &p0);
            prop_assert!(opt.sq_grad["w"].data().iter().all(|&a| a >= 0.0));
        }
    }
}
