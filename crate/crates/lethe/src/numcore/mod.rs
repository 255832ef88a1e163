//! Dense linear algebra, a recording autodiff tape, and Adam.
//!
//! Everything downstream — the transformer, the editing engines, the
//! deletion objectives — is built from these pieces. All arithmetic is
//! 64-bit and sequential, so identical inputs produce bit-identical
//! outputs everywhere in the crate.

mod adam;
mod matrix;
mod tape;

pub use adam::{adam_step, AdamState};
pub use matrix::{dot, log_sum_exp, softmax, softmax_unchecked, Matrix};
pub use tape::{
    gelu_scalar, layer_norm_forward, row_softmax_forward, Gradients, Tape, ValueId,
    LAYER_NORM_EPS,
};
