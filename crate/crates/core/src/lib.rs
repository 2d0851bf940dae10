//! Feedback and robust (H-infinity) stabilization of the truncated sabra
//! shell model.
//!
//! States live in `C^M`; every linear operator is handled on the realified
//! space `R^{2M}` with coordinates `[Re u_1..Re u_M, Im u_1..Im u_M]` and the
//! inner product `Re(u, v)`. The system convention is `du/dt + A u = B1 U + B2 w`,
//! so a mode with eigenvalue `lambda` decays like `exp(-Re(lambda) t)`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod hinf;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod stabilization;
pub mod verify;
pub mod spectral;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{ShellParams, ShellState, Trajectory};
