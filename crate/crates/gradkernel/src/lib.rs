//! Dense `f64` tensors with a recording tape for reverse-mode gradients.
//!
//! The op set is deliberately small: matrix products, elementwise
//! arithmetic, masked softmax, a few nonlinearities, reductions and
//! binary cross-entropy. Broadcasting is limited to bias addition.

pub mod checkpoint;
pub mod init;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, Sgd};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var, MASK_VALUE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward called before any forward computation")]
    NoForward,
    #[error("{0}")]
    BadArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
