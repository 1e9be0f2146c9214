//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Every model and actor computation is written against [`Tape`]. A fresh
//! tape is built per training step or per decoding step; parameters are
//! recorded by reference so re-binding is free.

mod tape;
mod tensor;

pub use tape::{sigmoid, BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Row-wise log-softmax of a plain tensor, outside any tape.
pub fn log_softmax(x: &Tensor) -> Result<Tensor, NumError> {
    let mut tape = Tape::inference();
    let v = tape.constant_ref(x);
    let out = tape.log_softmax(v)?;
    Ok(tape.value(out).clone())
}
