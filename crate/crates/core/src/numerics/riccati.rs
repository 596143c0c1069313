//! Discrete algebraic Riccati and Lyapunov equations.

use serde::{Deserialize, Serialize};

use super::{cholesky, lu_solve, Matrix, NumericsError};

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;
pub const LYAPUNOV_TOL: f64 = 1e-12;

/// Converged Riccati solution with its LQR gain (`u = −K·x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DareSolution {
    pub p: Matrix,
    pub k: Matrix,
    /// `‖P − F(P)‖_F` for the returned `P`, where `F` is the Riccati map.
    pub residual: f64,
    pub iterations: usize,
}

fn check_dims(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<(usize, usize), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if b.rows() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, b.cols()),
            got: b.shape(),
        });
    }
    let m = b.cols();
    if q.shape() != (n, n) {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, n),
            got: q.shape(),
        });
    }
    if r.shape() != (m, m) {
        return Err(NumericsError::DimensionMismatch {
            expected: (m, m),
            got: r.shape(),
        });
    }
    Ok((n, m))
}

/// One application of the Riccati map
/// `F(P) = Q + Aᵀ(P − P·B·(R + Bᵀ·P·B)⁻¹·Bᵀ·P)·A`, symmetrized.
fn riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix, NumericsError> {
    let btp = b.t_matmul(p)?;
    let s = r.add(&btp.matmul(b)?)?;
    let x = lu_solve(&s, &btp)?;
    let inner = p.sub(&btp.t_matmul(&x)?)?;
    let mut next = q.add(&a.t_matmul(&inner)?.matmul(a)?)?;
    next.symmetrize();
    Ok(next)
}

/// Frobenius norm of the Riccati defect `P − F(P)`.
pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64, NumericsError> {
    check_dims(a, b, q, r)?;
    Ok(riccati_map(a, b, q, r, p)?.sub(p)?.frobenius_norm())
}

/// Solves the DARE by fixed-point iteration of the Riccati map from `P₀ = Q`.
pub fn solve_dare(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution, NumericsError> {
    check_dims(a, b, q, r)?;
    cholesky(r)?;
    let mut p = q.clone();
    p.symmetrize();
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = match riccati_map(a, b, q, r, &p) {
            Ok(next) if next.is_finite() => next,
            _ => {
                return Err(NumericsError::NonConvergence {
                    iterations: it,
                    residual,
                })
            }
        };
        residual = next.sub(&p)?.frobenius_norm();
        if residual <= tol {
            let k = gain_from_p(a, b, r, &p)?;
            return Ok(DareSolution {
                p,
                k,
                residual,
                iterations: it,
            });
        }
        p = next;
    }
    Err(NumericsError::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// LQR gain `K = (R + BᵀPB)⁻¹BᵀPA`.
pub fn gain_from_p(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    if p.shape() != (n, n) || b.rows() != n || r.shape() != (b.cols(), b.cols()) {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, n),
            got: p.shape(),
        });
    }
    let btp = b.t_matmul(p)?;
    let s = r.add(&btp.matmul(b)?)?;
    lu_solve(&s, &btp.matmul(a)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovOptions {
    /// Defect tolerance, relative to `max(1, ‖P‖_F)`.
    pub tol: f64,
    /// Maximum number of doubling steps (each one doubles the series length).
    pub max_iter: usize,
    /// Partial sums whose Frobenius norm exceeds this bound count as divergence.
    pub divergence_bound: f64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            tol: LYAPUNOV_TOL,
            max_iter: 64,
            divergence_bound: 1e12,
        }
    }
}

/// `‖AᵀPA − P + Q‖_F`.
pub fn lyapunov_residual(a: &Matrix, p: &Matrix, q: &Matrix) -> Result<f64, NumericsError> {
    Ok(a.t_matmul(p)?.matmul(a)?.sub(p)?.add(q)?.frobenius_norm())
}

/// Solves `AᵀPA − P + Q = 0` through the series `Σ (Aᵀ)ᵏ Q Aᵏ`, summed by
/// squaring (`P ← P + A_kᵀ P A_k`, `A_k ← A_k²`).
pub fn solve_discrete_lyapunov(a: &Matrix, q: &Matrix, opts: LyapunovOptions) -> Result<Matrix, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if q.shape() != (n, n) {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, n),
            got: q.shape(),
        });
    }
    let mut p = q.clone();
    p.symmetrize();
    let mut ak = a.clone();
    for _ in 0..opts.max_iter {
        let incr = ak.t_matmul(&p)?.matmul(&ak)?;
        p = p.add(&incr)?;
        p.symmetrize();
        let p_norm = p.frobenius_norm();
        if !p.is_finite() || p_norm > opts.divergence_bound {
            return Err(NumericsError::Unstable);
        }
        if incr.frobenius_norm() <= 1e-17 * p_norm {
            let defect = lyapunov_residual(a, &p, q)?;
            if defect <= opts.tol * p_norm.max(1.0) {
                return Ok(p);
            }
            return Err(NumericsError::Unstable);
        }
        ak = ak.matmul(&ak)?;
        if !ak.is_finite() {
            return Err(NumericsError::Unstable);
        }
    }
    Err(NumericsError::Unstable)
}

/// Spectrum strictly inside the unit disk, decided through the Lyapunov
/// equation with `Q = I` and a Cholesky test of the solution.
pub fn is_schur_stable(a: &Matrix) -> bool {
    if !a.is_square() || !a.is_finite() {
        return false;
    }
    match solve_discrete_lyapunov(a, &Matrix::identity(a.rows()), LyapunovOptions::default()) {
        Ok(p) => cholesky(&p).is_ok(),
        Err(_) => false,
    }
}
