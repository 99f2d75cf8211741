//! Token-mean cross-entropy.

use crate::corpus::Vocabulary;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor, Var};

fn check(op: &'static str, shape: &[usize], targets: &[usize], mask: &[bool]) -> Result<usize> {
    if shape.len() != 3 || targets.len() != shape[0] * shape[1] || mask.len() != targets.len() {
        return Err(shape_err(op, format!("{:?} with {} targets, {} mask", shape, targets.len(), mask.len())));
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= shape[2]).map(|(t, _)| t) {
        return Err(Error::IndexOutOfRange { op, index: t, extent: shape[2] });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Data(format!("{op}: every position is padding")));
    }
    Ok(count)
}

/// Constant `[N,T,V]` tensor holding `value` at each unmasked target.
fn target_weights<T: Scalar>(shape: &[usize], targets: &[usize], mask: &[bool], value: T) -> Tensor<T> {
    let v = shape[2];
    let mut w = Tensor::zeros(shape.to_vec());
    for (pos, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            w.data_mut()[pos * v + t] = value;
        }
    }
    w
}

/// Mean of `−log p(target)` over unmasked positions of `distributions`
/// (`[N,T,V]`, rows summing to one).
pub fn xent_loss<'t, T: Scalar>(distributions: Var<'t, T>, targets: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
    let shape = distributions.shape();
    let count = check("xent_loss", &shape, targets, mask)?;
    let tape = distributions.tape();
    let picked = distributions
        .mul(tape.constant(target_weights(&shape, targets, mask, T::one())))?
        .sum_axis(2)?;
    // Padding positions read probability one so their log is zero.
    let pad_fill = Tensor::from_fn(vec![shape[0], shape[1]], |i| if mask[i] { T::zero() } else { T::one() });
    let logp = picked.add(tape.constant(pad_fill))?.log()?;
    logp.sum_all()?.scale(T::lit(-1.0 / count as f64))
}

/// [`xent_loss`] computed from logits through a fused log-softmax; positions
/// labelled PAD are masked.
pub fn sequence_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let mask: Vec<bool> = labels.iter().map(|&l| l != Vocabulary::PAD).collect();
    let count = check("sequence_loss", &shape, labels, &mask)?;
    let w = target_weights(&shape, labels, &mask, T::lit(-1.0 / count as f64));
    logits.log_softmax()?.mul(logits.tape().constant(w))?.sum_all()
}
