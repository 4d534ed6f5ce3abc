//! Spatiotemporal predictive learning: convolutional recurrent cells with a
//! zigzag memory flow and decoupled dual memories, trained with reverse
//! scheduled sampling on synthetic bouncing-sprite video.
//!
//! Everything runs on a small CPU autodiff engine ([`autodiff`]) over dense
//! rank-4 [`Tensor`]s.

pub mod autodiff;
pub mod cells;
pub mod curriculum;
pub mod data;
pub mod decoupling;
pub mod error;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
