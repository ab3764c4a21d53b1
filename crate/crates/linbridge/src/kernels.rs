//! Bridge kernels for a fixed horizon: the Kalman-type covariance
//! `kappa(s,t)`, the derived kernels `Gamma(s,t)` and `Sigma(s,t)`, the
//! conditional means, the controllability sufficient conditions and the
//! algebraic identities tying all of them together.
//!
//! Notation (for horizon `T`, endpoints `a`, `b`):
//!
//! ```text
//! kappa(s,t) = int_s^t E(t,u) S(u) S(u)^T E(t,u)^T du
//! Gamma(s,t) = E(s,t) kappa(s,t)
//! Sigma(s,t) = Gamma(t,T) Gamma(s,T)^{-1} Gamma(s,t)
//! m_x^+(s,t) = x + int_s^t E(s,u) r(u) du
//! m_x^-(s,t) = x - int_s^t E(t,u) r(u) du
//! m_x(s,t)   = E(t,s) m_x^+(s,t)
//! n_{x,b}(s,t) = Gamma(t,T) Gamma(s,T)^{-1} m_x^+(s,t)
//!              + Gamma(s,t)^T Gamma(s,T)^{-T} m_b^-(t,T)
//! ```
//!
//! `Sigma(s,t)` is the bridge transition covariance and `n_{x,b}(s,t)` the
//! bridge transition mean.

use std::cell::RefCell;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{BridgeError, Result};
use crate::evolution::{EvolutionOperator, SolverTol};
use crate::linalg;
use crate::model::LinearModel;
use crate::quad;

/// Numerical policy of a [`BridgeKernel`].
#[derive(Clone, Copy, Debug)]
pub struct KernelOptions {
    /// Relative tolerance of the adaptive quadrature.
    pub quad_rtol: f64,
    /// Absolute floor of the adaptive quadrature.
    pub quad_atol: f64,
    /// Tolerances of the evolution-matrix integrator.
    pub solver_tol: SolverTol,
    /// Kernel evaluations require `t <= T - horizon_eps_factor * T`; closer
    /// to the horizon the Sigma kernel is dominated by cancellation.
    pub horizon_eps_factor: f64,
    /// Warn when the condition estimate of an inverted Gamma exceeds this.
    pub cond_warn: f64,
    /// Number of grid points of the positive-definiteness probe.
    pub probe_points: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            quad_rtol: 1e-10,
            quad_atol: 1e-13,
            solver_tol: SolverTol::default(),
            horizon_eps_factor: 1e-9,
            cond_warn: 1e10,
            probe_points: 5,
        }
    }
}

impl KernelOptions {
    /// Tighter tolerances for identity verification on awkward models.
    pub fn strict() -> Self {
        KernelOptions {
            quad_rtol: 1e-12,
            quad_atol: 1e-15,
            solver_tol: SolverTol {
                rtol: 1e-12,
                atol: 1e-14,
            },
            ..Default::default()
        }
    }
}

/// Outcome of the kappa positive-definiteness probe run at construction.
#[derive(Clone, Copy, Debug)]
pub struct KappaProbe {
    /// Smallest eigenvalue seen over the probe grid.
    pub min_eigenvalue: f64,
    /// Number of `(s, t)` pairs probed.
    pub pairs: usize,
}

/// All kernels of one bridge: model, horizon `T` and endpoints `a`, `b`.
///
/// Construction probes `kappa` for positive definiteness on a validation
/// grid and freezes the evolution cache, after which every evaluation is a
/// pure function and the kernel may be shared across threads.
pub struct BridgeKernel {
    model: LinearModel,
    evol: EvolutionOperator,
    horizon: f64,
    start: DVector<f64>,
    end: DVector<f64>,
    opts: KernelOptions,
    probe: KappaProbe,
}

impl BridgeKernel {
    pub fn new(
        model: LinearModel,
        horizon: f64,
        start: DVector<f64>,
        end: DVector<f64>,
        opts: KernelOptions,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(BridgeError::Domain(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let d = model.dim();
        if start.len() != d || end.len() != d {
            return Err(BridgeError::Domain(format!(
                "endpoints must have length {d}, got {} and {}",
                start.len(),
                end.len()
            )));
        }
        let evol = EvolutionOperator::new(model.clone(), opts.solver_tol);
        let mut kernel = BridgeKernel {
            model,
            evol,
            horizon,
            start,
            end,
            opts,
            probe: KappaProbe {
                min_eigenvalue: f64::NAN,
                pairs: 0,
            },
        };
        kernel.probe = kernel.run_probe()?;
        kernel.evol.freeze();
        Ok(kernel)
    }

    pub fn with_defaults(
        model: LinearModel,
        horizon: f64,
        start: DVector<f64>,
        end: DVector<f64>,
    ) -> Result<Self> {
        Self::new(model, horizon, start, end, KernelOptions::default())
    }

    fn run_probe(&self) -> Result<KappaProbe> {
        let n = self.opts.probe_points.max(3);
        let times: Vec<f64> = (0..n)
            .map(|i| self.horizon * i as f64 / (n - 1) as f64)
            .collect();
        let mut min_eig = f64::INFINITY;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let k = self.kappa(times[i], times[j])?;
                let eig = k.symmetric_eigenvalues().min();
                min_eig = min_eig.min(eig);
                linalg::cholesky_spd(&k, "kappa probe")
                    .map_err(|_| {
                        BridgeError::NotPd(format!(
                            "kappa({}, {}) is not positive definite; \
                             the model violates the standing assumption",
                            times[i], times[j]
                        ))
                    })?;
                pairs += 1;
            }
        }
        // A short Sigma probe on interior pairs.
        for (s, t) in [
            (times[0], times[n - 2]),
            (times[1].min(self.horizon * 0.25), self.horizon * 0.5),
        ] {
            if s < t && t < self.horizon {
                self.sigma_bridge(s, t)?;
            }
        }
        Ok(KappaProbe {
            min_eigenvalue: min_eig,
            pairs,
        })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn evolution(&self) -> &EvolutionOperator {
        &self.evol
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }

    pub fn end(&self) -> &DVector<f64> {
        &self.end
    }

    pub fn options(&self) -> &KernelOptions {
        &self.opts
    }

    pub fn probe(&self) -> KappaProbe {
        self.probe
    }

    fn horizon_eps(&self) -> f64 {
        self.opts.horizon_eps_factor * self.horizon
    }

    fn guard_below_horizon(&self, t: f64, what: &str) -> Result<()> {
        if t >= self.horizon {
            return Err(BridgeError::Domain(format!(
                "{what} requires t < horizon {} (got {t})",
                self.horizon
            )));
        }
        if t > self.horizon - self.horizon_eps() {
            return Err(BridgeError::NearHorizon(format!(
                "{what} at t={t} lies within eps={} of the horizon {}",
                self.horizon_eps(),
                self.horizon
            )));
        }
        Ok(())
    }

    fn guard_times(&self, s: f64, t: f64) -> Result<()> {
        if !(s.is_finite() && t.is_finite()) || s < 0.0 || t < s {
            return Err(BridgeError::Domain(format!(
                "need 0 <= s <= t, got s={s}, t={t}"
            )));
        }
        Ok(())
    }

    /// Adaptive quadrature of a fallible matrix integrand.
    fn integrate<F>(&self, f: F, a: f64, b: f64, shape: (usize, usize)) -> Result<DMatrix<f64>>
    where
        F: Fn(f64) -> Result<DMatrix<f64>>,
    {
        let slot: RefCell<Option<BridgeError>> = RefCell::new(None);
        let wrapped = |u: f64| match f(u) {
            Ok(m) => m,
            Err(e) => {
                slot.borrow_mut().get_or_insert(e);
                DMatrix::zeros(shape.0, shape.1)
            }
        };
        let out = quad::integrate_matrix(&wrapped, a, b, self.opts.quad_rtol, self.opts.quad_atol);
        if let Some(e) = slot.into_inner() {
            return Err(e);
        }
        out
    }

    /// Kalman-type covariance `kappa(s, t)`; the result is symmetrized.
    pub fn kappa(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.guard_times(s, t)?;
        let d = self.model.dim();
        if s == t {
            return Ok(DMatrix::zeros(d, d));
        }
        let raw = self.integrate(
            |u| {
                let e = self.evol.evolve(u, t)?;
                let a = e * self.model.noise_matrix(u);
                Ok(&a * a.transpose())
            },
            s,
            t,
            (d, d),
        )?;
        Ok(linalg::symmetrize(&raw))
    }

    /// `Gamma(s, t) = E(s, t) kappa(s, t)`.
    pub fn gamma(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        let k = self.kappa(s, t)?;
        let e_st = self.evol.evolve(t, s)?;
        Ok(e_st * k)
    }

    /// `Gamma(s, t)` by its direct integral `int_s^t E(s,u) S S^T E(t,u)^T du`;
    /// slower than [`Self::gamma`] and kept as the second algebraic route.
    pub fn gamma_integral_form(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.guard_times(s, t)?;
        let d = self.model.dim();
        self.integrate(
            |u| {
                let left = self.evol.evolve(u, s)? * self.model.noise_matrix(u);
                let right = self.evol.evolve(u, t)? * self.model.noise_matrix(u);
                Ok(left * right.transpose())
            },
            s,
            t,
            (d, d),
        )
    }

    fn gamma_to_horizon_inv(&self, s: f64) -> Result<DMatrix<f64>> {
        let g = self.gamma(s, self.horizon)?;
        let cond = linalg::cond_estimate(&g);
        if cond > self.opts.cond_warn {
            log::warn!(
                "Gamma({s}, {}) condition estimate {cond:.3e} exceeds {:.1e}",
                self.horizon,
                self.opts.cond_warn
            );
        }
        g.clone().lu().try_inverse().ok_or_else(|| {
            BridgeError::SingularGamma(format!("Gamma({s}, {}) is singular", self.horizon))
        })
    }

    /// Bridge transition covariance `Sigma(s, t)`, symmetric positive
    /// definite for `0 <= s < t < T`.
    pub fn sigma_bridge(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.guard_times(s, t)?;
        if s == t {
            return Ok(DMatrix::zeros(self.model.dim(), self.model.dim()));
        }
        self.guard_below_horizon(t, "Sigma(s,t)")?;
        let g_st = self.gamma(s, t)?;
        let g_tt = self.gamma(t, self.horizon)?;
        let g_s_inv = self.gamma_to_horizon_inv(s)?;
        let sigma = linalg::symmetrize(&(g_tt * g_s_inv * g_st));
        linalg::cholesky_spd(&sigma, "Sigma(s,t)")?;
        Ok(sigma)
    }

    /// `m_x^+(s, t) = x + int_s^t E(s,u) r(u) du`.
    pub fn m_plus(&self, x: &DVector<f64>, s: f64, t: f64) -> Result<DVector<f64>> {
        self.guard_times(s, t)?;
        if self.model.forcing_is_zero() || s == t {
            return Ok(x.clone());
        }
        let d = self.model.dim();
        let integral = self.integrate(
            |u| Ok(self.evol.evolve(u, s)? * self.model.forcing(u)),
            s,
            t,
            (d, 1),
        )?;
        Ok(x + integral.column(0).into_owned())
    }

    /// `m_x^-(s, t) = x - int_s^t E(t,u) r(u) du`.
    pub fn m_minus(&self, x: &DVector<f64>, s: f64, t: f64) -> Result<DVector<f64>> {
        self.guard_times(s, t)?;
        if self.model.forcing_is_zero() || s == t {
            return Ok(x.clone());
        }
        let d = self.model.dim();
        let integral = self.integrate(
            |u| Ok(self.evol.evolve(u, t)? * self.model.forcing(u)),
            s,
            t,
            (d, 1),
        )?;
        Ok(x - integral.column(0).into_owned())
    }

    /// Conditional mean of the unconditioned process,
    /// `m_x(s, t) = E(t,s) x + int_s^t E(t,u) r(u) du`.
    pub fn mean_forward(&self, x: &DVector<f64>, s: f64, t: f64) -> Result<DVector<f64>> {
        self.guard_times(s, t)?;
        let e = self.evol.evolve(s, t)?;
        if self.model.forcing_is_zero() {
            return Ok(e * x);
        }
        let d = self.model.dim();
        let integral = self.integrate(
            |u| Ok(self.evol.evolve(u, t)? * self.model.forcing(u)),
            s,
            t,
            (d, 1),
        )?;
        Ok(e * x + integral.column(0).into_owned())
    }

    /// Bridge transition mean `n_{x,b}(s, t)`. Returns `x` at `t == s` and
    /// the endpoint `b` exactly at `t == T`.
    pub fn bridge_mean(&self, x: &DVector<f64>, s: f64, t: f64) -> Result<DVector<f64>> {
        self.guard_times(s, t)?;
        if t == s {
            return Ok(x.clone());
        }
        if t == self.horizon {
            return Ok(self.end.clone());
        }
        self.guard_below_horizon(t, "n_{x,b}(s,t)")?;
        let mp = self.m_plus(x, s, t)?;
        let mm = self.m_minus(&self.end, t, self.horizon)?;
        let g_st = self.gamma(s, t)?;
        let g_tt = self.gamma(t, self.horizon)?;
        let g_s_inv = self.gamma_to_horizon_inv(s)?;
        let term1 = &g_tt * &g_s_inv * mp;
        let term2 = g_st.transpose() * g_s_inv.transpose() * mm;
        Ok(term1 + term2)
    }

    /// `Cov(Z_s, Z_t) = (E(t,0) Gamma(0,s))^T` for `s <= t` with a
    /// deterministic start `Z_0`.
    pub fn cov_z(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.guard_times(s, t)?;
        let g = self.gamma(0.0, s)?;
        let e = self.evol.evolve(0.0, t)?;
        Ok((e * g).transpose())
    }

    /// Bridge covariance function
    /// `Cov(U_s, U_t) = (Gamma(t,T) Gamma(0,T)^{-1} Gamma(0,s))^T`, `s <= t`.
    pub fn bridge_cov(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.guard_times(s, t)?;
        let g_0s = self.gamma(0.0, s)?;
        let g_tt = self.gamma(t, self.horizon)?;
        let g_inv = self.gamma_to_horizon_inv(0.0)?;
        Ok((g_tt * g_inv * g_0s).transpose())
    }

    /// Frobenius residuals of the algebraic identities relating the kernels,
    /// each normalized by `max(1, |lhs|, |rhs|)`:
    ///
    /// * `I1`  inverse split of `Sigma(s,t)`
    /// * `I2a`..`I2d` the four Gamma/kappa exchange identities
    /// * `I3`  the reversed-time Gramian identity
    /// * `I4`  the bridge evolution identity at `u = (s+t)/2`
    pub fn identity_residuals(&self, s: f64, t: f64) -> Result<BTreeMap<String, f64>> {
        self.identity_residuals_scaled(s, t, 1.0)
    }

    /// Residuals with every direct `kappa` factor multiplied by
    /// `kappa_scale`; a scale of 1 gives the true residuals, anything else is
    /// an inconsistent perturbation used as a negative control by the
    /// verification harness.
    pub(crate) fn identity_residuals_scaled(
        &self,
        s: f64,
        t: f64,
        kappa_scale: f64,
    ) -> Result<BTreeMap<String, f64>> {
        self.guard_times(s, t)?;
        if s >= t {
            return Err(BridgeError::Domain("identities need s < t".into()));
        }
        self.guard_below_horizon(t, "identity residuals")?;
        let tt = self.horizon;
        let d = self.model.dim();

        let k_st = self.kappa(s, t)? * kappa_scale;
        let k_tt = self.kappa(t, tt)? * kappa_scale;
        let k_st_full = self.kappa(s, tt)? * kappa_scale;
        let g_st = self.gamma(s, t)?;
        let g_t_t = self.gamma(t, tt)?;
        let g_s_t = self.gamma(s, tt)?;
        let g_0t = self.gamma(0.0, t)?;
        let g_0s = self.gamma(0.0, s)?;
        let g_0_t = self.gamma(0.0, tt)?;
        let sigma = self.sigma_bridge(s, t)?;

        let inv_spd = |m: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
            Ok(linalg::cholesky_spd(m, what)?.inverse())
        };
        let inv_lu = |m: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
            m.clone()
                .lu()
                .try_inverse()
                .ok_or_else(|| BridgeError::SingularGamma(format!("{what} is singular")))
        };

        let k_st_inv = inv_spd(&k_st, "kappa(s,t)")?;
        let k_tt_inv = inv_spd(&k_tt, "kappa(t,T)")?;
        let k_full_inv = inv_spd(&k_st_full, "kappa(s,T)")?;
        let sigma_inv = inv_spd(&sigma, "Sigma(s,t)")?;
        let g_s_t_inv = inv_lu(&g_s_t, "Gamma(s,T)")?;
        let g_t_t_inv = inv_lu(&g_t_t, "Gamma(t,T)")?;
        let g_0_t_inv = inv_lu(&g_0_t, "Gamma(0,T)")?;

        let e_t_horizon = self.evol.evolve(t, tt)?; // E(T, t)
        let e_s_horizon = self.evol.evolve(s, tt)?; // E(T, s)
        let e_t0 = self.evol.evolve(0.0, t)?; // E(t, 0)
        let e_big_t0 = self.evol.evolve(0.0, tt)?; // E(T, 0)
        let e_0_big_t = self.evol.evolve(tt, 0.0)?; // E(0, T)
        let e_ts = self.evol.evolve(s, t)?; // E(t, s)

        let mut out = BTreeMap::new();
        let mut put = |name: &str, lhs: &DMatrix<f64>, rhs: &DMatrix<f64>| {
            out.insert(name.to_string(), linalg::relative_residual(lhs, rhs));
        };

        // I1: Sigma^{-1} = kappa(s,t)^{-1} + E(T,t)^T kappa(t,T)^{-1} E(T,t)
        let i1_rhs = &k_st_inv + e_t_horizon.transpose() * &k_tt_inv * &e_t_horizon;
        put("I1", &sigma_inv, &i1_rhs);

        // I2a: kappa(t,T)^{-1} - kappa(s,T)^{-1}
        //        = Gamma(s,T)^{-1} Gamma(s,t) Gamma(t,T)^{-T}
        let i2a_lhs = &k_tt_inv - &k_full_inv;
        let i2a_rhs = &g_s_t_inv * &g_st * g_t_t_inv.transpose();
        put("I2a", &i2a_lhs, &i2a_rhs);

        // I2b: Sigma(s,t) = Gamma(t,T) [ int_s^t G(u)^{-1} S S^T G(u)^{-T} du ]
        //        Gamma(t,T)^T  with G(u) = Gamma(u,T)
        let inner = self.integrate(
            |u| {
                let g_u = self.gamma(u, tt)?;
                let x = linalg::lu_solve(&g_u, &self.model.noise_matrix(u), "Gamma(u,T)")?;
                Ok(&x * x.transpose())
            },
            s,
            t,
            (d, d),
        )?;
        let i2b_rhs = &g_t_t * inner * g_t_t.transpose();
        put("I2b", &sigma, &i2b_rhs);

        // I2c: E(t,0) - Gamma(0,t)^T Gamma(0,T)^{-T} E(T,0)
        //        = Gamma(t,T) Gamma(0,T)^{-1}
        let i2c_lhs = &e_t0 - g_0t.transpose() * g_0_t_inv.transpose() * &e_big_t0;
        let i2c_rhs = &g_t_t * &g_0_t_inv;
        put("I2c", &i2c_lhs, &i2c_rhs);

        // I2d: Gamma(s,T)^T E(t,s)^T - E(T,s) Gamma(s,t) = Gamma(t,T)^T
        let i2d_lhs = g_s_t.transpose() * e_ts.transpose() - &e_s_horizon * &g_st;
        put("I2d", &i2d_lhs, &g_t_t.transpose());

        // I3: int_t^T E(0,u) S S^T E(0,u)^T du = E(0,T) kappa(t,T) E(0,T)^T
        let m_t = self.integrate(
            |u| {
                let a = self.evol.evolve(u, 0.0)? * self.model.noise_matrix(u);
                Ok(&a * a.transpose())
            },
            t,
            tt,
            (d, d),
        )?;
        let i3_rhs = &e_0_big_t * &k_tt * e_0_big_t.transpose();
        put("I3", &m_t, &i3_rhs);

        // I4: Gamma(s,T) Gamma(0,T)^{-1} E(0,u)
        //       + Gamma(0,s)^T Gamma(0,T)^{-T} E(T,u) = E(s,u)
        let u = 0.5 * (s + t);
        let e_0u = self.evol.evolve(u, 0.0)?;
        let e_tu = self.evol.evolve(u, tt)?;
        let e_su = self.evol.evolve(u, s)?;
        let i4_lhs =
            &g_s_t * &g_0_t_inv * e_0u + g_0s.transpose() * g_0_t_inv.transpose() * e_tu;
        put("I4", &i4_lhs, &e_su);

        Ok(out)
    }
}

/// Result of the controllability sufficient-condition check.
#[derive(Clone, Copy, Debug)]
pub struct ControllabilityReport {
    /// Rank of `[S(t0), Delta S(t0), ..., Delta^k S(t0)]` at `k = k_used`.
    pub rank: usize,
    /// Whether full rank `d` was reached (sufficient for kappa > 0).
    pub satisfied: bool,
    /// Smallest `k` achieving full rank, or `k_max` if none did.
    pub k_used: usize,
    /// Whether `S(t0)` alone has full rank (condition (a)).
    pub condition_a: bool,
}

/// Builds the controllability matrix `[S, Delta S, ..., Delta^k S]` at `t0`,
/// `Delta S = S' - Q S`, growing `k` until full rank or `k_max`.
///
/// Constant and polynomial coefficients are differentiated exactly through
/// matrix-polynomial arithmetic; tables use nested central differences and
/// fail with a differentiation error when the stencil leaves the knot range.
pub fn controllability_check(
    model: &LinearModel,
    t0: f64,
    k_max: usize,
) -> Result<ControllabilityReport> {
    if !(t0.is_finite() && t0 >= 0.0) {
        return Err(BridgeError::Domain(format!("t0 must be >= 0, got {t0}")));
    }
    let d = model.dim();
    let exact = model
        .drift_coeff()
        .as_poly()
        .zip(model.noise_coeff().as_poly());
    let blocks: Vec<DMatrix<f64>> = match exact {
        Some((q_poly, s_poly)) => delta_chain_poly(&q_poly, &s_poly, t0, k_max),
        None => delta_chain_numeric(model, t0, k_max)?,
    };
    let condition_a = linalg::rank(&blocks[0]) == d;
    let p = model.noise_dim();
    let mut stacked = DMatrix::zeros(d, (k_max + 1) * p);
    let mut rank = 0usize;
    let mut k_used = k_max;
    for (k, block) in blocks.iter().enumerate() {
        stacked.view_mut((0, k * p), (d, p)).copy_from(block);
        rank = linalg::rank(&stacked.columns(0, (k + 1) * p).into_owned());
        if rank == d {
            k_used = k;
            break;
        }
    }
    Ok(ControllabilityReport {
        rank,
        satisfied: rank == d,
        k_used,
        condition_a,
    })
}

type MatrixPoly = Vec<DMatrix<f64>>;

fn poly_eval(p: &MatrixPoly, t: f64) -> DMatrix<f64> {
    let (r, c) = p[0].shape();
    let mut acc = DMatrix::zeros(r, c);
    for a in p.iter().rev() {
        acc = acc * t + a;
    }
    acc
}

fn poly_deriv(p: &MatrixPoly) -> MatrixPoly {
    if p.len() <= 1 {
        let (r, c) = p[0].shape();
        return vec![DMatrix::zeros(r, c)];
    }
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(k, a)| a * (k as f64))
        .collect()
}

fn poly_mul(a: &MatrixPoly, b: &MatrixPoly) -> MatrixPoly {
    let (ra, _) = a[0].shape();
    let (_, cb) = b[0].shape();
    let mut out = vec![DMatrix::zeros(ra, cb); a.len() + b.len() - 1];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn delta_chain_poly(q: &MatrixPoly, s: &MatrixPoly, t0: f64, k_max: usize) -> Vec<DMatrix<f64>> {
    let mut chain = Vec::with_capacity(k_max + 1);
    let mut current = s.clone();
    chain.push(poly_eval(&current, t0));
    for _ in 0..k_max {
        let deriv = poly_deriv(&current);
        let qs = poly_mul(q, &current);
        let deg = deriv.len().max(qs.len());
        let (r, c) = current[0].shape();
        let mut next = vec![DMatrix::zeros(r, c); deg];
        for (k, m) in deriv.into_iter().enumerate() {
            next[k] += m;
        }
        for (k, m) in qs.into_iter().enumerate() {
            next[k] -= m;
        }
        chain.push(poly_eval(&next, t0));
        current = next;
    }
    chain
}

fn delta_chain_numeric(
    model: &LinearModel,
    t0: f64,
    k_max: usize,
) -> Result<Vec<DMatrix<f64>>> {
    // Knot range available to the finite-difference stencil.
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    for coeff in [model.drift_coeff(), model.noise_coeff()] {
        if let Some((a, b)) = coeff.knot_range() {
            lo = lo.max(a);
            hi = hi.min(b);
            if let crate::model::CoefficientFn::Table { knots, .. } = coeff {
                for w in knots.windows(2) {
                    min_gap = min_gap.min(w[1] - w[0]);
                }
            }
        }
    }
    let h = min_gap / 16.0;
    let reach = k_max as f64 * h;
    if t0 - reach < lo || t0 + reach > hi {
        return Err(BridgeError::Differentiation(format!(
            "stencil [{}, {}] leaves the table knot range [{lo}, {hi}]",
            t0 - reach,
            t0 + reach
        )));
    }
    fn delta(model: &LinearModel, j: usize, t: f64, h: f64) -> DMatrix<f64> {
        if j == 0 {
            return model.noise_matrix(t);
        }
        let upper = delta(model, j - 1, t + h, h);
        let lower = delta(model, j - 1, t - h, h);
        let mid = delta(model, j - 1, t, h);
        (upper - lower) / (2.0 * h) - model.drift_matrix(t) * mid
    }
    Ok((0..=k_max).map(|j| delta(model, j, t0, h)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{constant_scalar_model, integrated_wiener_model, CoefficientFn};
    use approx::assert_relative_eq;

    fn scalar_kernel(q: f64, sigma: f64, horizon: f64) -> BridgeKernel {
        BridgeKernel::with_defaults(
            constant_scalar_model(q, 0.0, sigma),
            horizon,
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap()
    }

    fn ou_kappa(q: f64, sigma: f64, dt: f64) -> f64 {
        if q == 0.0 {
            sigma * sigma * dt
        } else {
            sigma * sigma * ((2.0 * q * dt).exp() - 1.0) / (2.0 * q)
        }
    }

    #[test]
    fn kappa_wiener_is_linear_in_time() {
        let k = scalar_kernel(0.0, 0.7, 1.0);
        let got = k.kappa(0.0, 0.6).unwrap()[(0, 0)];
        assert_relative_eq!(got, 0.49 * 0.6, max_relative = 1e-10);
    }

    #[test]
    fn kappa_ou_closed_form() {
        for q in [-1.0, 0.5, 2.0] {
            let k = scalar_kernel(q, 1.0, 1.0);
            let got = k.kappa(0.25, 0.9).unwrap()[(0, 0)];
            assert_relative_eq!(got, ou_kappa(q, 1.0, 0.65), max_relative = 1e-9);
        }
    }

    #[test]
    fn kappa_integrated_wiener() {
        let k = BridgeKernel::with_defaults(
            integrated_wiener_model(),
            1.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let t = 0.8;
        let got = k.kappa(0.0, t).unwrap();
        let expect = DMatrix::from_row_slice(
            2,
            2,
            &[t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t],
        );
        assert!((got - expect).norm() < 1e-10);
    }

    #[test]
    fn gamma_equals_kappa_when_drift_vanishes() {
        let k = scalar_kernel(0.0, 1.0, 1.0);
        let g = k.gamma(0.2, 0.7).unwrap()[(0, 0)];
        let kv = k.kappa(0.2, 0.7).unwrap()[(0, 0)];
        assert_relative_eq!(g, kv, max_relative = 1e-12);
    }

    #[test]
    fn gamma_ou_closed_form_and_integral_route() {
        let (q, s, t) = (0.8, 0.1, 0.9);
        let k = scalar_kernel(q, 1.0, 1.0);
        let g = k.gamma(s, t).unwrap()[(0, 0)];
        let expect = (-q * (t - s)).exp() * ou_kappa(q, 1.0, t - s);
        assert_relative_eq!(g, expect, max_relative = 1e-9);
        let g2 = k.gamma_integral_form(s, t).unwrap()[(0, 0)];
        assert_relative_eq!(g, g2, max_relative = 1e-9);
    }

    #[test]
    fn gamma_integrated_wiener_matrix_product() {
        let k = BridgeKernel::with_defaults(
            integrated_wiener_model(),
            1.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let t: f64 = 0.5;
        let kap = DMatrix::from_row_slice(
            2,
            2,
            &[t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t],
        );
        let e_0t = DMatrix::from_row_slice(2, 2, &[1.0, -t, 0.0, 1.0]);
        let expect = e_0t * kap;
        let got = k.gamma(0.0, t).unwrap();
        assert!((got - expect).norm() < 1e-10);
    }

    #[test]
    fn sigma_bridge_wiener_and_ou() {
        let horizon = 1.0;
        let k = scalar_kernel(0.0, 1.3, horizon);
        let (s, t) = (0.2, 0.7);
        let got = k.sigma_bridge(s, t).unwrap()[(0, 0)];
        let expect = 1.3 * 1.3 * (horizon - t) * (t - s) / (horizon - s);
        assert_relative_eq!(got, expect, max_relative = 1e-9);

        let q = 1.4;
        let k = scalar_kernel(q, 1.0, horizon);
        let got = k.sigma_bridge(s, t).unwrap()[(0, 0)];
        let expect =
            (q * (horizon - t)).sinh() * (q * (t - s)).sinh() / ((q * (horizon - s)).sinh() * q);
        assert_relative_eq!(got, expect, max_relative = 1e-9);
    }

    #[test]
    fn sigma_degenerates_at_short_intervals() {
        let k = scalar_kernel(0.5, 1.0, 1.0);
        let got = k.sigma_bridge(0.0, 1e-6).unwrap()[(0, 0)];
        assert!(got.abs() < 1e-5);
    }

    #[test]
    fn bridge_mean_wiener_interpolates_endpoints() {
        let (a, b, horizon) = (1.5, -0.5, 2.0);
        let k = BridgeKernel::with_defaults(
            constant_scalar_model(0.0, 0.0, 1.0),
            horizon,
            DVector::from_element(1, a),
            DVector::from_element(1, b),
        )
        .unwrap();
        let t = 0.8;
        let got = k
            .bridge_mean(&DVector::from_element(1, a), 0.0, t)
            .unwrap()[0];
        assert_relative_eq!(
            got,
            a * (horizon - t) / horizon + b * t / horizon,
            max_relative = 1e-9
        );
        // Exact pins.
        let at_horizon = k
            .bridge_mean(&DVector::from_element(1, a), 0.0, horizon)
            .unwrap()[0];
        assert_eq!(at_horizon, b);
        let at_s = k
            .bridge_mean(&DVector::from_element(1, 0.33), 0.4, 0.4)
            .unwrap()[0];
        assert_eq!(at_s, 0.33);
    }

    #[test]
    fn bridge_mean_ou_sinh_form() {
        let (q, a, b, horizon) = (0.9, 0.4, -1.1, 1.0);
        let k = BridgeKernel::with_defaults(
            constant_scalar_model(q, 0.0, 1.0),
            horizon,
            DVector::from_element(1, a),
            DVector::from_element(1, b),
        )
        .unwrap();
        let t = 0.35;
        let got = k
            .bridge_mean(&DVector::from_element(1, a), 0.0, t)
            .unwrap()[0];
        let expect = a * (q * (horizon - t)).sinh() / (q * horizon).sinh()
            + b * (q * t).sinh() / (q * horizon).sinh();
        assert_relative_eq!(got, expect, max_relative = 1e-9);
    }

    #[test]
    fn forward_means() {
        // r = 0: m_x(s,t) = E(t,s) x.
        let k = scalar_kernel(0.7, 1.0, 1.0);
        let x = DVector::from_element(1, 2.0);
        let got = k.mean_forward(&x,  0.1, 0.6).unwrap()[0];
        assert_relative_eq!(got, 2.0 * (0.7f64 * 0.5).exp(), max_relative = 1e-10);
        // q = 0, r = c: m_x(s,t) = x + c (t-s).
        let model = constant_scalar_model(0.0, 0.4, 1.0);
        let k = BridgeKernel::with_defaults(
            model,
            1.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        let got = k.mean_forward(&x, 0.2, 0.9).unwrap()[0];
        assert_relative_eq!(got, 2.0 + 0.4 * 0.7, max_relative = 1e-10);
        // m_b^-(t,T) = b when r = 0.
        let k = scalar_kernel(0.7, 1.0, 1.0);
        let got = k.m_minus(&x, 0.3, 1.0).unwrap()[0];
        assert_eq!(got, 2.0);
    }

    #[test]
    fn kappa_additivity_under_evolution() {
        let k = BridgeKernel::with_defaults(
            integrated_wiener_model(),
            1.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let (s, u, t) = (0.1, 0.45, 0.9);
        let e = k.evolution().evolve(u, t).unwrap();
        let lhs = k.kappa(s, t).unwrap();
        let rhs = &e * k.kappa(s, u).unwrap() * e.transpose() + k.kappa(u, t).unwrap();
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn identities_hold_for_ou() {
        let k = BridgeKernel::with_defaults(
            constant_scalar_model(-0.5, 0.0, 1.0),
            1.0,
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let res = k.identity_residuals(0.2, 0.7).unwrap();
        assert_eq!(res.len(), 7);
        for (name, r) in &res {
            assert!(*r < 1e-8, "{name} residual {r}");
        }
    }

    #[test]
    fn identity_i2c_for_pure_wiener() {
        // Q = 0, S = I: kappa is additive so I2c collapses to an exact sum.
        let k = scalar_kernel(0.0, 1.0, 1.0);
        let res = k.identity_residuals(0.3, 0.6).unwrap();
        assert!(res["I2c"] < 1e-12);
    }

    #[test]
    fn perturbed_kappa_breaks_identities() {
        let k = scalar_kernel(-0.5, 1.0, 1.0);
        let res = k.identity_residuals_scaled(0.2, 0.7, 1.01).unwrap();
        assert!(res["I1"] > 1e-4, "I1 residual {} too small", res["I1"]);
    }

    #[test]
    fn sigma_zero_noise_model_fails_probe() {
        let err = BridgeKernel::with_defaults(
            constant_scalar_model(0.3, 0.0, 0.0),
            1.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .err()
        .unwrap();
        assert!(matches!(err, BridgeError::NotPd(_)));
    }

    #[test]
    fn controllability_scalar_and_integrated_wiener() {
        let m = constant_scalar_model(0.3, 0.0, 0.8);
        let rep = controllability_check(&m, 0.5, 3).unwrap();
        assert!(rep.satisfied && rep.condition_a);
        assert_eq!((rep.rank, rep.k_used), (1, 0));

        let m = integrated_wiener_model();
        let rep = controllability_check(&m, 0.5, 3).unwrap();
        assert!(rep.satisfied && !rep.condition_a);
        assert_eq!((rep.rank, rep.k_used), (2, 1));
    }

    #[test]
    fn controllability_zero_noise() {
        let m = constant_scalar_model(0.3, 0.0, 0.0);
        let rep = controllability_check(&m, 0.5, 4).unwrap();
        assert_eq!(rep.rank, 0);
        assert!(!rep.satisfied && !rep.condition_a);
    }

    #[test]
    fn controllability_table_coefficients() {
        let table = CoefficientFn::table(
            vec![0.0, 0.5, 1.0],
            vec![
                DMatrix::from_element(1, 1, 0.5),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.5),
            ],
        );
        let m = crate::model::LinearModel::new(
            1,
            1,
            CoefficientFn::constant(DMatrix::from_element(1, 1, 0.2)),
            CoefficientFn::constant(DMatrix::zeros(1, 1)),
            table,
        )
        .unwrap();
        let rep = controllability_check(&m, 0.4, 2).unwrap();
        assert!(rep.satisfied);
        // Stencil outside the knot range must fail.
        let err = controllability_check(&m, 0.0, 2).unwrap_err();
        assert!(matches!(err, BridgeError::Differentiation(_)));
    }

    #[test]
    fn bridge_cov_wiener() {
        let horizon = 1.0;
        let k = scalar_kernel(0.0, 1.0, horizon);
        let (s, t) = (0.3, 0.7);
        let got = k.bridge_cov(s, t).unwrap()[(0, 0)];
        assert_relative_eq!(got, s * (horizon - t) / horizon, max_relative = 1e-9);
    }

    #[test]
    fn near_horizon_guard_triggers() {
        let k = scalar_kernel(0.0, 1.0, 1.0);
        let err = k.sigma_bridge(0.1, 1.0 - 1e-12).unwrap_err();
        assert!(matches!(err, BridgeError::NearHorizon(_)));
    }
}
