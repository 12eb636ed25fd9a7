//! Physics-informed training of contraction-based observer gains.
//!
//! A neural gain `k(x_hat, y)` is trained so that the observer
//! `x_hat' = f(x_hat) + k(x_hat, y)` contracts at rate `lambda` in the
//! identity metric, then certified on a grid and simulated against the
//! plant under measurement noise.

pub mod error;
pub mod linalg;
pub mod loss;
pub mod network;
pub mod optimize;
pub mod sampling;
pub mod simulate;
pub mod systems;
pub mod verify;

pub use error::{Error, Result};
pub use loss::{LossSpec, PenaltyForm};
pub use network::{Activation, Mlp, ParamVector};
pub use sampling::CollocationSet;
pub use systems::{BoxDomain, SystemModel};
