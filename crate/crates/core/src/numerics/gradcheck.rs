use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Which coordinates of each input a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_input` coordinates per input, chosen by `seed`.
    Sample { per_input: usize, seed: u64 },
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences; returns the largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, Coords::All)
}

/// Multi-input variant of [`finite_diff_check`].
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coords: Coords) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(shape_err("finite_diff_check", format!("f must be scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let picked: Vec<usize> = match coords {
            Coords::All => (0..input.len()).collect(),
            Coords::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let mut idx = sample(&mut rng, input.len(), per_input.min(input.len())).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in picked {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}
