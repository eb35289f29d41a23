//! Minimal reverse-mode automatic differentiation over dense 1D/2D tensors.
//!
//! A fresh [`Tape`] is recorded for every forward pass. Leaves are either
//! trainable ([`Tape::param`]) or constant ([`Tape::constant`]); every other
//! node is produced by an op method on the tape and remembers the context it
//! needs for the backward sweep.
//!
//! ```
//! use usdeconv::tensorgraph::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

pub mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::Kernel2d;
pub use gradcheck::{grad_check, relative_error, GradCheck, REL_ERR_FLOOR};
pub use tape::{Axis, CornerLookup, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
