//! Scalar-generic tensors, a reverse-mode tape, and the small set of layers
//! the scene flow model is assembled from.
//!
//! The same code runs in `f32` (training) and `f64` (gradient checks and
//! geometric identities); see the aliases below.

mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod ops;

pub use ops::sample::sample_plane;
pub use scalar::Scalar;
pub use tape::{BackwardArgs, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
