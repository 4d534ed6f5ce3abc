//! Tape-based reverse-mode differentiation over [`Tensor`](crate::Tensor),
//! plus parameter storage, Adam, and a finite-difference checker.

mod conv;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
