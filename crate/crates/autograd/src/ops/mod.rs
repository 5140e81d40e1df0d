//! Differentiable operations, implemented as methods on [`Var`](crate::Var).

pub mod elementwise;
pub mod linalg;
pub mod sample;
pub mod shape;
