//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation eagerly as it runs; [`Tape::backward`]
//! walks the record once in reverse and returns [`Gradients`] for every node
//! that depends on a leaf marked as requiring gradients.
//!
//! Only the primitives the model needs are provided. There is no general
//! broadcasting: the single broadcast is [`Tape::mul_channel`].

mod gemm;
mod resample;
mod tape;
mod tensor;

pub use resample::Interpolation;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::entropy_value;

/// Upsamples a `[B, C, h, w]` tensor outside of any tape.
pub fn upsample(x: &Tensor, scale: usize, kind: Interpolation) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.upsample(v, scale, kind)?;
    Ok(tape.value(out).clone())
}
