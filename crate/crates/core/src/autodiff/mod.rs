//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they run (define-by-run; a fresh tape is
//! built for every forward pass). [`Tensor`]s are immutable values; a tensor
//! returned by a tape operation carries a handle to its node so a later
//! [`Tape::backward`] can deliver its gradient. Tensors that never touch a
//! tracked input bypass the tape entirely, which doubles as the inference
//! path: frozen model parameters enter as plain tensors and never get
//! gradient buffers.
//!
//! There is no broadcasting: shapes must match exactly, and expansion is
//! done by explicit operations only.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Grads, Tape};
pub use tensor::Tensor;
