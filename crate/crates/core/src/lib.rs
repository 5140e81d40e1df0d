//! Multi-frame self-supervised scene flow: geometry, network, losses,
//! evaluation, synthetic data and training.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! uses the `f32` aliases below; gradient checks and geometry identities use
//! the `f64` ones.

pub mod camera;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gmf;
pub mod losses;
pub mod model;
pub mod train;
pub mod update;

pub use msf_autograd::{Scalar, Tape, Tensor, Var};

pub use config::RunConfig;
pub use error::{MsfError, Result};

pub type Camera32 = camera::CameraModel<f32>;
pub type Camera64 = camera::CameraModel<f64>;
pub type Net32 = model::SceneFlowNet<f32>;
pub type Net64 = model::SceneFlowNet<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
