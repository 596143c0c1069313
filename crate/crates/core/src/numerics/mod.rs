//! Dense linear algebra for small control problems.
//!
//! Everything here is a pure function of its inputs. Sizes are expected to
//! stay well below a hundred, so the algorithms favour clarity over blocking.

mod decomp;
mod matrix;
mod riccati;

pub use decomp::{cholesky, cholesky_solve, lu_solve, min_eigenvalue_sym, solve_least_squares};
pub use matrix::Matrix;
pub use riccati::{
    dare_residual, gain_from_p, is_schur_stable, lyapunov_residual, solve_dare,
    solve_discrete_lyapunov, DareSolution, LyapunovOptions, DARE_MAX_ITER, DARE_TOL,
    LYAPUNOV_TOL,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("data length {got} does not match shape ({expected} entries)")]
    InvalidData { expected: usize, got: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("singular system: dimension {dimension} is not identifiable")]
    Singular { dimension: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("Lyapunov series diverged: closed loop is not Schur stable")]
    Unstable,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
