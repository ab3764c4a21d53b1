//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{BridgeError, Result};

/// Returns `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky_spd(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    symmetrize(m)
        .cholesky()
        .ok_or_else(|| BridgeError::NotPd(format!("{what} (dim {})", m.nrows())))
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| BridgeError::SingularGamma(format!("LU solve failed for {what}")))
}

/// Computes `b a^{-1}` (right division) via LU on the transposed system.
pub fn right_divide(b: &DMatrix<f64>, a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let xt = lu_solve(&a.transpose(), &b.transpose(), what)?;
    Ok(xt.transpose())
}

/// 2-norm condition number estimate via singular values.
pub fn cond_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank: singular values above `n * eps * sigma_max`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    let tol = (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * max;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Frobenius residual of `a - b` normalized by `max(1, |a|, |b|)`.
pub fn relative_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm()).max(1.0);
    (a - b).norm() / scale
}

/// Mean-square weighted error norm used by the embedded RK controller.
pub fn scaled_error_norm(
    err: &DMatrix<f64>,
    y0: &DMatrix<f64>,
    y1: &DMatrix<f64>,
    atol: f64,
    rtol: f64,
) -> f64 {
    let n = err.len() as f64;
    let mut acc = 0.0;
    for ((e, a), b) in err.iter().zip(y0.iter()).zip(y1.iter()) {
        let scale = atol + rtol * a.abs().max(b.abs());
        let r = e / scale;
        acc += r * r;
    }
    (acc / n).sqrt()
}

/// Stacks per-time mean vectors into one long vector.
pub fn stack_vectors(blocks: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.len()).copy_from(b);
        at += b.len();
    }
    out
}
