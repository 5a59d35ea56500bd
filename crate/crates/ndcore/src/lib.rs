//! Deterministic dense tensor arithmetic with tape-based reverse-mode
//! automatic differentiation.
//!
//! All arithmetic is `f64`. A [`Tape`] records one forward pass; calling
//! [`Tape::backward`] on a scalar node fills gradients for every node that
//! depends on a grad-requiring leaf. Tapes are independent, so separate
//! forward passes may run on separate threads.

pub mod error;
pub mod gradcheck;
mod linalg;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use error::{NdError, Result};
pub use tape::{fault, OpKind, Tape, TapeEntry, Var};
pub use tensor::Tensor;

/// Softmax of a tensor along `axis`, outside of any tape.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(NdError::Axis { axis, shape: x.shape().to_vec() });
    }
    Tensor::new(x.shape().to_vec(), tape::softmax_values(x.shape(), x.data(), axis))
}

/// Matrix product outside of any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}
