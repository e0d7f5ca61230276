//! Guarded dense solves shared by the closed-form solutions and oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted before a solve is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition number from the singular values; `inf` when rank deficient.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves the square system `a x = b` by LU after checking conditioning.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let condition = condition_number(a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem { condition });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularSystem { condition })
}

/// Least-squares solution of the tall system `a x ≈ b` via Householder QR.
///
/// The condition guard is applied to `a` itself, not to the normal matrix.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if m < n || b.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "least squares needs m >= n and len(b) = m, got {m}x{n} and {}",
            b.len()
        )));
    }
    let condition = condition_number(a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem { condition });
    }
    let qr = a.clone().qr();
    let qtb = qr.q().transpose() * b;
    let r = qr.r();
    r.solve_upper_triangular(&qtb)
        .ok_or(Error::SingularSystem { condition })
}
