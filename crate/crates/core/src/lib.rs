//! Learning asymptotically stabilizing neural controllers.
//!
//! Soft actor-critic training on discrete-time plants, augmented with an
//! online least-squares model of the dynamics near the equilibrium and an
//! LQR gain penalty on the actor's Jacobian. Evaluation and sampling-based
//! Lyapunov checks live alongside.

pub mod agent;
pub mod cli;
mod csvfmt;
pub mod envs;
pub mod eval;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod sysid;
