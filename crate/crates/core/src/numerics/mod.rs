//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;


pub use gradcheck::{finite_diff_check, finite_diff_check_many, Coords};
pub use tape::{BnMode, BnStats, Gradients, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Scalar, Tensor};

/// Softmax of a 1-D score vector, computed with max subtraction.
pub fn softmax_vector<T: Scalar>(scores: &Tensor<T>) -> crate::Result<Tensor<T>> {
    let tape = Tape::new();
    let v = tape.constant(scores.clone()).softmax(None)?;
    Ok((*v.value()).clone())
}
