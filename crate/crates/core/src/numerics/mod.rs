//! Dense-array substrate: tensors, a reverse-mode tape and a
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod real;
pub mod rotation;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Single-shot attention without a parameter store, for callers that hold
/// plain tensors.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttnMask,
    heads: usize,
) -> crate::Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(q, k, v, mask, heads)?;
    Ok(tape.value(out).clone())
}
