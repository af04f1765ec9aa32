//! Dense `f64` tensors with define-by-run reverse-mode differentiation and an
//! Adam optimizer.

mod error;
mod gradcheck;
mod linalg;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::gradient_check;
pub use optim::{Adam, AdamConfig, ParamStore};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
