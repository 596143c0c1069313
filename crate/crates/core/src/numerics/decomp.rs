use super::{Matrix, NumericsError};

/// Relative threshold on Householder diagonal entries below which a
/// regressor column counts as linearly dependent.
const RANK_TOL: f64 = 1e-10;

fn require_square(m: &Matrix) -> Result<usize, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(m.rows())
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = P`.
///
/// Only the lower triangle of `p` is read.
pub fn cholesky(p: &Matrix) -> Result<Matrix, NumericsError> {
    let n = require_square(p)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = p[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L·Lᵀ·X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    let n = require_square(l)?;
    if b.rows() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, b.cols()),
            got: b.shape(),
        });
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `A·X = B` by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    let n = require_square(a)?;
    if b.rows() != n {
        return Err(NumericsError::DimensionMismatch {
            expected: (n, b.cols()),
            got: b.shape(),
        });
    }
    let scale = a.max_abs();
    let mut lu = a.clone();
    let mut x = b.clone();
    let m = b.cols();
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= f64::EPSILON * scale * n as f64 || piv_abs == 0.0 {
            return Err(NumericsError::Singular { dimension: col });
        }
        if piv != col {
            for c in 0..n {
                let tmp = lu[(col, c)];
                lu[(col, c)] = lu[(piv, c)];
                lu[(piv, c)] = tmp;
            }
            for c in 0..m {
                let tmp = x[(col, c)];
                x[(col, c)] = x[(piv, c)];
                x[(piv, c)] = tmp;
            }
        }
        let d = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                lu[(r, c)] -= f * lu[(col, c)];
            }
            for c in 0..m {
                x[(r, c)] -= f * x[(col, c)];
            }
        }
    }
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Least-squares fit of a linear map from regressor rows to target rows.
///
/// Returns `M` (targets × regressors) minimizing
/// `‖Y − X·Mᵀ‖² + ridge·‖M‖²`, so that `y_row ≈ M · x_row`.
/// `ridge = 0` uses Householder QR; otherwise the regularized normal
/// equations are solved by Cholesky.
pub fn solve_least_squares(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix, NumericsError> {
    if x.rows() != y.rows() || x.rows() == 0 {
        return Err(NumericsError::DimensionMismatch {
            expected: (x.rows(), y.cols()),
            got: y.shape(),
        });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(NumericsError::InvalidArgument(format!(
            "ridge must be finite and non-negative, got {ridge}"
        )));
    }
    let w = if ridge == 0.0 {
        qr_least_squares(x, y)?
    } else {
        let mut g = x.t_matmul(x)?;
        for i in 0..g.rows() {
            g[(i, i)] += ridge;
        }
        let l = cholesky(&g).map_err(|e| match e {
            NumericsError::NotPositiveDefinite { pivot } => {
                NumericsError::Singular { dimension: pivot }
            }
            other => other,
        })?;
        cholesky_solve(&l, &x.t_matmul(y)?)?
    };
    if !w.is_finite() {
        return Err(NumericsError::Singular { dimension: 0 });
    }
    Ok(w.transpose())
}

/// Householder QR solve of `min ‖X·W − Y‖`, returning `W` (p × q).
fn qr_least_squares(x: &Matrix, y: &Matrix) -> Result<Matrix, NumericsError> {
    let (n, p) = x.shape();
    let q = y.cols();
    let mut r = x.clone();
    let mut qty = y.clone();
    let col_scale = (0..p)
        .map(|c| (0..n).map(|i| x[(i, c)] * x[(i, c)]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if col_scale == 0.0 {
        return Err(NumericsError::Singular { dimension: 0 });
    }
    let steps = p.min(n);
    for k in 0..steps {
        let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if norm <= RANK_TOL * col_scale {
            return Err(NumericsError::Singular { dimension: k });
        }
        let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|a| a * a).sum();
        if vnorm2 > 0.0 {
            for c in k..p {
                let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * r[(k + i, c)]).sum();
                let f = 2.0 * dot / vnorm2;
                for (i, vi) in v.iter().enumerate() {
                    r[(k + i, c)] -= f * vi;
                }
            }
            for c in 0..q {
                let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * qty[(k + i, c)]).sum();
                let f = 2.0 * dot / vnorm2;
                for (i, vi) in v.iter().enumerate() {
                    qty[(k + i, c)] -= f * vi;
                }
            }
        }
        if r[(k, k)].abs() <= RANK_TOL * col_scale {
            return Err(NumericsError::Singular { dimension: k });
        }
    }
    if n < p {
        return Err(NumericsError::Singular { dimension: n });
    }
    let mut w = Matrix::zeros(p, q);
    for c in 0..q {
        for i in (0..p).rev() {
            let mut s = qty[(i, c)];
            for k in (i + 1)..p {
                s -= r[(i, k)] * w[(k, c)];
            }
            w[(i, c)] = s / r[(i, i)];
        }
    }
    Ok(w)
}

/// Smallest eigenvalue of a symmetric matrix, by bisection on the shift
/// at which Cholesky of `A − s·I` stops succeeding.
pub fn min_eigenvalue_sym(a: &Matrix) -> Result<f64, NumericsError> {
    let n = require_square(a)?;
    if n == 0 {
        return Err(NumericsError::InvalidArgument("empty matrix".into()));
    }
    // Gershgorin interval
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let radius: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
        lo = lo.min(a[(i, i)] - radius);
        hi = hi.max(a[(i, i)] + radius);
    }
    let pd_after_shift = |s: f64| {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] -= s;
        }
        cholesky(&shifted).is_ok()
    };
    let mut lo = lo - 1e-12 * (1.0 + lo.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pd_after_shift(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cholesky_identity() {
        let i3 = Matrix::identity(3);
        assert_eq!(cholesky(&i3).unwrap(), i3);
    }

    #[test]
    fn cholesky_two_by_two() {
        let p = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 2.0]]);
        let l = cholesky(&p).unwrap();
        assert_eq!(l, Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 1.0]]));
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&p).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn cholesky_indefinite_reports_pivot() {
        let p = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert_eq!(
            cholesky(&p),
            Err(NumericsError::NotPositiveDefinite { pivot: 1 })
        );
    }

    #[test]
    fn lu_solve_recovers_solution() {
        let a = Matrix::from_rows(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]);
        let x = Matrix::column(&[1.0, -2.0, 0.5]);
        let b = a.matmul(&x).unwrap();
        let sol = lu_solve(&a, &b).unwrap();
        assert!(sol.sub(&x).unwrap().max_abs() < 1e-14);
        let sing = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            lu_solve(&sing, &Matrix::column(&[1.0, 1.0])),
            Err(NumericsError::Singular { .. })
        ));
    }

    #[test]
    fn least_squares_identity_regressors() {
        let x = Matrix::identity(2);
        let y = Matrix::from_rows(&[&[0.9, 0.0], &[0.1, 0.8]]);
        let m = solve_least_squares(&x, &y, 0.0).unwrap();
        let expected = Matrix::from_rows(&[&[0.9, 0.1], &[0.0, 0.8]]);
        assert!(m.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn least_squares_single_sample_is_singular() {
        let x = Matrix::from_rows(&[&[1.0, 0.0]]);
        let y = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert_eq!(
            solve_least_squares(&x, &y, 0.0),
            Err(NumericsError::Singular { dimension: 1 })
        );
    }

    #[test]
    fn least_squares_exact_recovery_both_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::from_rows(&[&[0.5, 0.2], &[-0.1, 0.9]]);
        let mut xs = Vec::new();
        for _ in 0..50 {
            xs.push(rng.random_range(-1.0..1.0));
            xs.push(rng.random_range(-1.0..1.0));
        }
        let x = Matrix::new(50, 2, xs).unwrap();
        let y = x.matmul(&a.transpose()).unwrap();
        let m = solve_least_squares(&x, &y, 0.0).unwrap();
        assert!(m.sub(&a).unwrap().max_abs() < 1e-10);
        let m_ridge = solve_least_squares(&x, &y, 1e-12).unwrap();
        assert!(m_ridge.sub(&a).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn least_squares_identical_rows_singular() {
        let x = Matrix::from_rows(&[&[0.1, 0.2], &[0.1, 0.2], &[0.1, 0.2]]);
        let y = x.clone();
        assert!(matches!(
            solve_least_squares(&x, &y, 0.0),
            Err(NumericsError::Singular { dimension: 1 })
        ));
    }

    #[test]
    fn min_eigenvalue_of_known_spectrum() {
        // eigenvalues 1 and 3
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((min_eigenvalue_sym(&a).unwrap() - 1.0).abs() < 1e-10);
        assert!((min_eigenvalue_sym(&Matrix::identity(3)).unwrap() - 1.0).abs() < 1e-10);
    }
}
