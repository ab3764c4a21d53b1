//! Adaptive panel-based Gauss-Legendre quadrature for matrix-valued
//! integrands.
//!
//! A fixed 15-point rule is applied per panel and panels are bisected until
//! the two-half estimate agrees with the whole-panel estimate in Frobenius
//! norm. The integrands in this crate (products of evolution matrices and
//! polynomial or tabulated coefficients) are piecewise smooth, so bisection
//! converges quickly.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{BridgeError, Result};

const PANEL_POINTS: usize = 15;
const MAX_DEPTH: usize = 40;

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-based initial guess, then Newton.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre_with_deriv(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre_with_deriv(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Applies the rule to `f` on `[a, b]`.
    pub fn apply<F>(&self, f: &F, a: f64, b: f64) -> DMatrix<f64>
    where
        F: Fn(f64) -> DMatrix<f64>,
    {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut acc = f(c + h * self.nodes[0]) * (self.weights[0] * h);
        for i in 1..self.nodes.len() {
            acc += f(c + h * self.nodes[i]) * (self.weights[i] * h);
        }
        acc
    }
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn panel_rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(PANEL_POINTS))
}

/// Integrates a matrix-valued function over `[a, b]` to relative tolerance
/// `rtol` (with absolute floor `atol`). `a > b` flips the sign.
pub fn integrate_matrix<F>(f: &F, a: f64, b: f64, rtol: f64, atol: f64) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    if a == b {
        let probe = f(a);
        return Ok(DMatrix::zeros(probe.nrows(), probe.ncols()));
    }
    if a > b {
        return Ok(-integrate_matrix(f, b, a, rtol, atol)?);
    }
    let rule = panel_rule();
    let whole = rule.apply(f, a, b);
    bisect(f, a, b, whole, rtol, atol, 0)
}

/// Scalar convenience wrapper around [`integrate_matrix`].
pub fn integrate_scalar<F>(f: &F, a: f64, b: f64, rtol: f64, atol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let wrapped = |t: f64| DMatrix::from_element(1, 1, f(t));
    Ok(integrate_matrix(&wrapped, a, b, rtol, atol)?[(0, 0)])
}

fn bisect<F>(
    f: &F,
    a: f64,
    b: f64,
    whole: DMatrix<f64>,
    rtol: f64,
    atol: f64,
    depth: usize,
) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let rule = panel_rule();
    let m = 0.5 * (a + b);
    let left = rule.apply(f, a, m);
    let right = rule.apply(f, m, b);
    let sum = &left + &right;
    let err = (&sum - &whole).norm();
    if err <= atol + rtol * sum.norm() {
        return Ok(sum);
    }
    if depth >= MAX_DEPTH {
        return Err(BridgeError::Quad(format!(
            "panel [{a}, {b}] did not converge (err {err:.3e})"
        )));
    }
    let l = bisect(f, a, m, left, rtol, 0.5 * atol, depth + 1)?;
    let r = bisect(f, m, b, right, rtol, 0.5 * atol, depth + 1)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        // 15-point Gauss-Legendre is exact through degree 29.
        let rule = GaussLegendre::new(15);
        let f = |t: f64| DMatrix::from_element(1, 1, t.powi(20) - 3.0 * t.powi(7) + 1.0);
        let got = rule.apply(&f, 0.0, 1.0)[(0, 0)];
        let expect = 1.0 / 21.0 - 3.0 / 8.0 + 1.0;
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn adaptive_handles_boundary_peak() {
        let f = |t: f64| (-50.0 * t).exp();
        let got = integrate_scalar(&f, 0.0, 2.0, 1e-12, 1e-15).unwrap();
        let expect = (1.0 - (-100.0f64).exp()) / 50.0;
        assert_relative_eq!(got, expect, max_relative = 1e-11);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let f = |t: f64| t;
        let fwd = integrate_scalar(&f, 0.0, 1.0, 1e-12, 1e-15).unwrap();
        let bwd = integrate_scalar(&f, 1.0, 0.0, 1e-12, 1e-15).unwrap();
        assert_relative_eq!(fwd, -bwd, max_relative = 1e-14);
        assert_relative_eq!(fwd, 0.5, max_relative = 1e-14);
    }

    #[test]
    fn empty_interval_is_zero() {
        let f = |t: f64| DMatrix::from_element(2, 2, t);
        let got = integrate_matrix(&f, 0.3, 0.3, 1e-10, 1e-14).unwrap();
        assert_eq!(got, DMatrix::zeros(2, 2));
    }
}
