//! Small differentiable-network engine: tanh MLPs with exact reverse-mode
//! gradients (including through the input Jacobian), Adam, and the squashed
//! Gaussian policy head.

mod adam;
mod mlp;
mod policy;

pub use adam::AdamState;
pub use mlp::{ForwardCache, JacobianTape, Layer, Mlp, MlpGrads};
pub use policy::{
    log_one_minus_tanh_sq, BatchSample, GaussianPolicy, PolicyDocument, PolicySample, LOG_STD_CLAMP,
    POLICY_FORMAT_VERSION,
};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    InvalidLayers(String),
    #[error("policy format: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
