//! Tensor math: plain kernels, a reverse-mode tape, parameters, Adam.

pub mod func;
pub mod gradcheck;
pub mod nn;
pub mod tape;

pub use nn::{Adam, ParamStore, Session};
pub use tape::{Grads, Tape, Var};

#[cfg(test)]
mod op_grad_tests;
