//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! The operator set is deliberately small: it covers exactly what the
//! grid-attention encoder, the convolutional decoder and the reweighted
//! regression loss need. Every differentiable op has a backward rule that is
//! checked against central finite differences by [`grad_check`].
//!
//! ```
//! use routecast_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport, InputReport};
pub use real::Real;
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;
