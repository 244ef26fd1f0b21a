//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are plain [`Tensor`]s. Differentiable computation happens on a
//! [`Tape`]: leaves are registered with [`Tape::leaf`], operations append
//! nodes, and [`Tape::backward`] consumes the tape to produce [`Gradients`].
//!
//! ```
//! use flor_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use kernels::norm::{Grouping, View3};
pub use scalar::{gemm, Scalar};
pub use tape::{Gradients, GroupStats, Primitive, Tape, Var};
pub use tensor::Tensor;
