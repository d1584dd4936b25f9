//! Control and adaptation laws, gain conditions, and the tracking-error
//! bound evaluator.
//!
//! Every law takes the metric through the [`Metric`] trait, so the same code
//! runs with a trained network, a per-step exact solver-backed metric, or an
//! analytic stub in tests.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    matched_phi, matched_phi_lstsq, sdc_matrix, AffineUncertainSystem, BasisFunctionModel,
    DynamicsError, LagrangianSystem, ParametricSystem, SystemModel,
};
use crate::lmi::{max_eig, min_eig, solve_sdp_warm, LmiError, LmiProblem, SdpStatus};

/// Central-difference step for metric derivatives.
pub const METRIC_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error("psi Hessian inverse is not positive definite")]
    SingularHessian,
    #[error("printed lagrangian leakage (sigma * s) needs p == n, got p={p}, n={n}")]
    LeakageDimension { p: usize, n: usize },
}

/// A positive-definite metric function `M(x, x_d, theta_hat)`.
pub trait Metric: Send + Sync {
    fn eval(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> DMatrix<f64>;
}

/// Row `i` of the result is `((dM/dq_i) e)^T / 2`, with the partials by
/// central difference.
pub fn metric_derivatives(
    metric: &dyn Metric,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    theta_hat: Option<&DVector<f64>>,
    e: &DVector<f64>,
    step: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut dm_x = DMatrix::zeros(n, n);
    let mut dm_xd = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        xp[i] = x[i] + step;
        xm[i] = x[i] - step;
        let dm = (metric.eval(&xp, x_d, theta_hat) - metric.eval(&xm, x_d, theta_hat))
            / (2.0 * step);
        dm_x.set_row(i, &((dm * e) * 0.5).transpose());
        xp[i] = x[i];
        xm[i] = x[i];
    }
    let mut xdp = x_d.clone();
    let mut xdm = x_d.clone();
    for i in 0..n {
        xdp[i] = x_d[i] + step;
        xdm[i] = x_d[i] - step;
        let dm = (metric.eval(x, &xdp, theta_hat) - metric.eval(x, &xdm, theta_hat))
            / (2.0 * step);
        dm_xd.set_row(i, &((dm * e) * 0.5).transpose());
        xdp[i] = x_d[i];
        xdm[i] = x_d[i];
    }
    (dm_x, dm_xd)
}

/// Printed adaptation laws differ on what the leakage term damps; the
/// Lagrangian theorem prints `sigma * s` while the affine law uses
/// `sigma * theta_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagrangianLeakage {
    /// `-Gamma (... + sigma s)` exactly as printed (requires `p == n`).
    StateAsPrinted,
    /// `-Gamma (... + sigma theta_hat)`, the form the other laws use.
    Estimate,
}

/// How the matched regressor `phi` is recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Residual above tolerance is an error.
    Strict,
    /// Plain least squares; used when the matched condition only holds
    /// approximately and the law is applied through the pseudo-inverse.
    PseudoInverse,
}

/// Norm bounds feeding the gain conditions and the error envelope.
#[derive(Debug, Clone, Copy)]
pub struct CertBounds {
    pub b_bar: f64,
    pub rho_bar: f64,
    /// `phi_bar`, `delta_bar`, `y_bar`, or `zeta_bar` depending on the law.
    pub unc_bar: f64,
    pub theta_bar: f64,
    pub omega_lower: f64,
    pub omega_upper: f64,
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    /// Disturbance bound (`d_bar`, `b_bar * d_s_bar`, or the modeling-error
    /// difference bound, per the law).
    pub d_bar: f64,
}

#[derive(Clone)]
pub struct ControllerConfig {
    pub r_weight: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma: f64,
    pub alpha: f64,
    pub bounds: CertBounds,
    pub leakage: LagrangianLeakage,
    pub match_mode: MatchMode,
}

impl ControllerConfig {
    pub fn new(r_weight: DMatrix<f64>, gamma: DMatrix<f64>, sigma: f64, alpha: f64, bounds: CertBounds) -> Self {
        assert!(sigma >= 0.0);
        let lo = min_eig(&gamma).expect("gamma symmetric");
        let hi = max_eig(&gamma).expect("gamma symmetric");
        assert!(lo > 0.0, "gamma must be positive definite");
        assert!(
            lo >= bounds.gamma_lower - 1e-12 && hi <= bounds.gamma_upper + 1e-12,
            "gamma bounds must dominate gamma ({lo}, {hi})"
        );
        ControllerConfig {
            r_weight,
            gamma,
            sigma,
            alpha,
            bounds,
            leakage: LagrangianLeakage::StateAsPrinted,
            match_mode: MatchMode::Strict,
        }
    }

    fn r_inv(&self) -> DMatrix<f64> {
        self.r_weight
            .clone()
            .try_inverse()
            .expect("R is positive definite")
    }
}

fn feedback_u(
    u_d: &DVector<f64>,
    r_inv: &DMatrix<f64>,
    b: &DMatrix<f64>,
    m: &DMatrix<f64>,
    e: &DVector<f64>,
) -> DVector<f64> {
    u_d - r_inv * (b.transpose() * (m * e))
}

/// Robust metric feedback `u = u_d - R^-1 B(x)^T M(x, x_d) (x - x_d)`.
pub fn robust_ncm_u(
    metric: &dyn Metric,
    sys: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    r_weight: &DMatrix<f64>,
) -> DVector<f64> {
    let m = metric.eval(x, x_d, None);
    let r_inv = r_weight
        .clone()
        .try_inverse()
        .expect("R is positive definite");
    feedback_u(u_d, &r_inv, &sys.b_at(x), &m, &(x - x_d))
}

/// Matched-uncertainty adaptive law:
/// `u = u_d - R^-1 B^T M e + phi^T theta_hat`,
/// `dtheta = -Gamma (phi B^T M e + sigma theta_hat)`.
pub fn affine_adaptive_step(
    metric: &dyn Metric,
    sys: &AffineUncertainSystem,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    theta_hat: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
    let phi = match cfg.match_mode {
        MatchMode::Strict => matched_phi(sys, x, x_d, 1e-8)?,
        MatchMode::PseudoInverse => matched_phi_lstsq(sys, x, x_d),
    };
    let m = metric.eval(x, x_d, None);
    let b = sys.base.b_at(x);
    let e = x - x_d;
    let u = feedback_u(u_d, &cfg.r_inv(), &b, &m, &e) + phi.transpose() * theta_hat;
    let dtheta = -(&cfg.gamma) * (&phi * (b.transpose() * (&m * &e)) + theta_hat * cfg.sigma);
    Ok((u, dtheta))
}

/// Lagrangian-system law `tau = -R^-1 H^-T M s + Delta theta_hat` with the
/// printed or estimate-side leakage.
pub fn lagrangian_adaptive_step(
    metric: &dyn Metric,
    lsys: &LagrangianSystem,
    s: &DVector<f64>,
    theta_hat: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
    let h_inv = lsys.inertia_inverse(s)?;
    let origin = DVector::zeros(s.len());
    let m = metric.eval(s, &origin, None);
    let delta = (lsys.delta)(s);
    let hm_s = h_inv.transpose() * (&m * s);
    let tau = -(cfg.r_inv() * &hm_s) + &delta * theta_hat;
    let leak = match cfg.leakage {
        LagrangianLeakage::StateAsPrinted => {
            if lsys.p != lsys.n {
                return Err(ControlError::LeakageDimension {
                    p: lsys.p,
                    n: lsys.n,
                });
            }
            s * cfg.sigma
        }
        LagrangianLeakage::Estimate => theta_hat * cfg.sigma,
    };
    let dtheta = -(&cfg.gamma) * (delta.transpose() * &hm_s + leak)
        ;
    Ok((tau, dtheta))
}

/// Multiplicatively-separable adaptive law:
/// `u = u_d - R^-1 B(x; th)^T M e`,
/// `dtheta = Gamma ((Y^T dM_x + Y_d^T dM_xd + Ytilde^T M) e - sigma th)`.
///
/// `Y_b` is evaluated with the previous step's input to break the algebraic
/// loop through `u`.
pub fn ancm_control_step(
    metric: &dyn Metric,
    psys: &ParametricSystem,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    u_prev: &DVector<f64>,
    theta_hat: &DVector<f64>,
    cfg: &ControllerConfig,
) -> (DVector<f64>, DVector<f64>) {
    assert!(psys.augmented, "adaptive law requires the augmented form");
    let e = x - x_d;
    let m = metric.eval(x, x_d, Some(theta_hat));
    let b = psys.b_at(x, theta_hat);
    let u = feedback_u(u_d, &cfg.r_inv(), &b, &m, &e);

    if psys.q_z == 0 {
        return (u, DVector::zeros(0));
    }
    let y = (psys.y_f)(x) + psys.y_b_combined(x, u_prev);
    let y_d = (psys.y_f)(x_d) + psys.y_b_combined(x_d, u_d);
    let y_tilde = &y - &y_d;
    let (dm_x, dm_xd) =
        metric_derivatives(metric, x, x_d, Some(theta_hat), &e, METRIC_FD_STEP);
    let signal =
        y.transpose() * (&dm_x * &e) + y_d.transpose() * (&dm_xd * &e) + y_tilde.transpose() * (&m * &e);
    let dtheta = &cfg.gamma * (signal - theta_hat * cfg.sigma);
    (u, dtheta)
}

/// Feedback part of the basis-weight controller, with `B` from the current
/// weight estimates.
pub fn basis_control_u(
    metric: &dyn Metric,
    bm: &BasisFunctionModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    cfg: &ControllerConfig,
) -> DVector<f64> {
    let m = metric.eval(x, x_d, None);
    feedback_u(u_d, &cfg.r_inv(), &bm.b_matrix(x), &m, &(x - x_d))
}

/// Weight adaptation
/// `dW = (dM_x e zeta^T + dM_xd e zeta_d^T + M e ztilde^T - sigma W) / gamma`
/// per weight block, with the isotropic fourth-order gain `gamma`.
pub fn basis_weight_step(
    metric: &dyn Metric,
    bm: &BasisFunctionModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u: &DVector<f64>,
    u_d: &DVector<f64>,
    cfg: &ControllerConfig,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let e = x - x_d;
    let m = metric.eval(x, x_d, None);
    let (dm_x, dm_xd) = metric_derivatives(metric, x, x_d, None, &e, METRIC_FD_STEP);
    let gamma = cfg.gamma[(0, 0)];
    let me = &m * &e;
    let dmx_e = &dm_x * &e;
    let dmxd_e = &dm_xd * &e;

    let rank1 = |zeta: &DVector<f64>, zeta_d: &DVector<f64>, w_hat: &DMatrix<f64>| {
        let zt = zeta - zeta_d;
        (&dmx_e * zeta.transpose() + &dmxd_e * zeta_d.transpose() + &me * zt.transpose()
            - w_hat * cfg.sigma)
            / gamma
    };

    let zeta_f = (bm.phi)(x);
    let zeta_f_d = (bm.phi)(x_d);
    let df = rank1(&zeta_f, &zeta_f_d, &bm.f_hat);
    let mut dbs = Vec::with_capacity(bm.m);
    for i in 0..bm.m {
        let zeta = (bm.varphi[i])(x) * u[i];
        let zeta_d = (bm.varphi[i])(x_d) * u_d[i];
        dbs.push(rank1(&zeta, &zeta_d, &bm.b_hat[i]));
    }
    (df, dbs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainKind {
    Affine,
    Lagrangian,
    Ancm,
    /// Basis-function adaptation over one drift block and `m` input blocks.
    Basis { m: usize },
}

/// Result of the gain-condition search: the largest rate `alpha_a` for which
/// `condition + 2 alpha_a scaling <= 0`.
#[derive(Debug, Clone)]
pub struct GainCertificate {
    pub alpha_a: f64,
    pub condition: DMatrix<f64>,
    pub scaling: DMatrix<f64>,
    pub pass: bool,
}

/// Builds the gain-condition matrices and bisects for the largest admissible
/// `alpha_a`.
pub fn check_gain_condition(
    kind: GainKind,
    bounds: &CertBounds,
    sigma: f64,
    eps_ell: f64,
    alpha_ncm: f64,
) -> GainCertificate {
    let coupling = match kind {
        GainKind::Affine | GainKind::Lagrangian => bounds.unc_bar * bounds.b_bar * eps_ell,
        GainKind::Ancm => bounds.unc_bar * eps_ell,
        GainKind::Basis { .. } => bounds.unc_bar * eps_ell,
    };
    let (condition, scaling) = match kind {
        GainKind::Basis { m } => {
            let k = m + 2;
            let mut c = DMatrix::zeros(k, k);
            c[(0, 0)] = -2.0 * alpha_ncm / bounds.omega_upper;
            for i in 1..k {
                c[(0, i)] = coupling;
                c[(i, 0)] = coupling;
                c[(i, i)] = -2.0 * sigma;
            }
            let mut d = DMatrix::zeros(k, k);
            d[(0, 0)] = 1.0 / bounds.omega_lower;
            for i in 1..k {
                d[(i, i)] = 1.0 / bounds.gamma_lower;
            }
            (c, d)
        }
        _ => {
            let c = DMatrix::from_row_slice(
                2,
                2,
                &[
                    -2.0 * alpha_ncm / bounds.omega_upper,
                    coupling,
                    coupling,
                    -2.0 * sigma,
                ],
            );
            let d = DMatrix::from_row_slice(
                2,
                2,
                &[1.0 / bounds.omega_lower, 0.0, 0.0, 1.0 / bounds.gamma_lower],
            );
            (c, d)
        }
    };

    let holds = |a: f64| -> bool {
        let s = &condition + &scaling * (2.0 * a);
        max_eig(&s).expect("symmetric by construction") <= 0.0
    };

    if !holds(0.0) || max_eig(&condition).unwrap() >= 0.0 {
        return GainCertificate {
            alpha_a: 0.0,
            condition,
            scaling,
            pass: false,
        };
    }
    // Diagonal entries give an upper bracket.
    let mut hi = (alpha_ncm * bounds.omega_lower / bounds.omega_upper)
        .min(sigma * bounds.gamma_lower)
        + 1.0;
    let mut lo = 0.0;
    if holds(hi) {
        // Should not happen: the diagonal fails above the bracket.
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    GainCertificate {
        alpha_a: lo,
        condition,
        scaling,
        pass: lo > 0.0,
    }
}

impl GainCertificate {
    /// Structured one-key-per-line text block.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "pass = {}", self.pass).unwrap();
        writeln!(out, "alpha_a = {:.16e}", self.alpha_a).unwrap();
        for i in 0..self.condition.nrows() {
            for j in 0..self.condition.ncols() {
                writeln!(out, "condition[{i}][{j}] = {:.16e}", self.condition[(i, j)]).unwrap();
            }
        }
        out
    }
}

/// Exponential tracking-error envelope
/// `sqrt(omega_upper) (sqrt(V0) e^{-a t} + d_a (1 - e^{-a t}) / a)` with
/// `d_a = sigma sqrt(gamma_upper) theta_bar + d_bar / sqrt(omega_lower)`.
pub fn tracking_error_bound(
    cert: &GainCertificate,
    v0: f64,
    t: f64,
    sigma: f64,
    bounds: &CertBounds,
) -> f64 {
    assert!(cert.pass, "bound requires a passing certificate");
    assert!(v0 >= 0.0);
    let a = cert.alpha_a;
    let d_a = sigma * bounds.gamma_upper.sqrt() * bounds.theta_bar
        + bounds.d_bar / bounds.omega_lower.sqrt();
    bounds.omega_upper.sqrt() * (v0.sqrt() * (-a * t).exp() + (1.0 - (-a * t).exp()) * d_a / a)
}

/// Pointwise CLF relaxation: minimize `||K e||^2 + p^2` subject to
/// `Mdot + 2 sym(M A + M K) <= -2 alpha M + p I`, always feasible through
/// the relaxation variable.
pub fn clf_qp_gain(
    metric: &dyn Metric,
    psys: &ParametricSystem,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    theta_hat: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_d: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(DMatrix<f64>, f64), ControlError> {
    let n = x.len();
    let m_in = u_d.len();
    let e = x - x_d;
    let m = metric.eval(x, x_d, Some(theta_hat));

    // Directional derivative of the metric along the parameter-frozen flow.
    let xdot = psys.f_at(x, theta_hat) + psys.b_at(x, theta_hat) * u_prev;
    let xd_dot = psys.f_at(x_d, theta_hat) + psys.b_at(x_d, theta_hat) * u_d;
    let delta = 1e-5 / (1.0 + xdot.norm().max(xd_dot.norm()));
    let m_plus = metric.eval(&(x + &xdot * delta), &(x_d + &xd_dot * delta), Some(theta_hat));
    let m_minus = metric.eval(&(x - &xdot * delta), &(x_d - &xd_dot * delta), Some(theta_hat));
    let m_dot_raw = (m_plus - m_minus) / (2.0 * delta);
    let m_dot = (&m_dot_raw + m_dot_raw.transpose()) * 0.5;

    let sys = psys.system_at(theta_hat);
    let a = sdc_matrix(&sys, x, x_d, u_d, 8)?;

    let mut prob = LmiProblem::new();
    // K entries as free 1x1 matrix variables, row-major.
    let k_vars: Vec<_> = (0..m_in * n).map(|_| prob.add_sym_var(1)).collect();
    let p_var = prob.add_sym_var(1);
    let s_var = prob.add_scalar_var();
    prob.objective_scalar(s_var, 1.0);

    let alpha = cfg.alpha;
    let (mc, ac, ec) = (m.clone(), a.clone(), e.clone());
    let kv = k_vars.clone();
    let m_dot_c = m_dot.clone();
    prob.add_constraint(n, "clf", move |v| {
        let mut kmat = DMatrix::zeros(m_in, n);
        for i in 0..m_in {
            for j in 0..n {
                kmat[(i, j)] = v.matrix(kv[i * n + j])[(0, 0)];
            }
        }
        let _ = &ec;
        let inner = &mc * &ac + &mc * kmat;
        let p = v.matrix(p_var)[(0, 0)];
        &m_dot_c + (&inner + inner.transpose()) + &mc * (2.0 * alpha)
            - DMatrix::identity(n, n) * p
    })?;

    // Epigraph with a tiny Tikhonov term on K to keep the barrier coercive
    // in K's null directions:
    // s >= ||K e||^2 + p^2 + epsK ||K||_F^2.
    let eps_k_sqrt = 1e-9f64.sqrt();
    let dim = 1 + m_in + 1 + m_in * n;
    let kv2 = k_vars.clone();
    let e2 = e.clone();
    prob.add_constraint(dim, "epigraph", move |v| {
        let mut kmat = DMatrix::zeros(m_in, n);
        for i in 0..m_in {
            for j in 0..n {
                kmat[(i, j)] = v.matrix(kv2[i * n + j])[(0, 0)];
            }
        }
        let ke = &kmat * &e2;
        let p = v.matrix(p_var)[(0, 0)];
        let mut g = DMatrix::zeros(dim, dim);
        g[(0, 0)] = v.scalar(s_var);
        for i in 0..m_in {
            g[(0, 1 + i)] = ke[i];
            g[(1 + i, 0)] = ke[i];
            g[(1 + i, 1 + i)] = 1.0;
        }
        let pi = 1 + m_in;
        g[(0, pi)] = p;
        g[(pi, 0)] = p;
        g[(pi, pi)] = 1.0;
        for i in 0..m_in {
            for j in 0..n {
                let at = pi + 1 + i * n + j;
                let val = eps_k_sqrt * kmat[(i, j)];
                g[(0, at)] = val;
                g[(at, 0)] = val;
                g[(at, at)] = 1.0;
            }
        }
        -g
    })?;

    // The relaxation admits an analytic interior point: K = 0 and p above
    // the unrelaxed constraint's worst eigenvalue.
    let clf_at_zero = &m_dot + (&m * &a + (&m * &a).transpose()) + &m * (2.0 * cfg.alpha);
    let p0 = max_eig(&clf_at_zero)? + 1.0;
    let mut init = prob.zero_assignment();
    init.set_matrix(p_var, &DMatrix::from_element(1, 1, p0));
    init.set_scalar(s_var, p0 * p0 + 1.0);
    let sol = solve_sdp_warm(&prob, Some(&init), 1e-9, 8000)?;
    debug_assert_ne!(sol.status, SdpStatus::Infeasible, "relaxation is always feasible");
    let mut k = DMatrix::zeros(m_in, n);
    for i in 0..m_in {
        for j in 0..n {
            k[(i, j)] = sol.values.matrix(k_vars[i * n + j])[(0, 0)];
        }
    }
    let p = sol.values.matrix(p_var)[(0, 0)];
    Ok((k, p))
}

/// Replaces the gain scaling of a unit-gain adaptation signal with the
/// inverse Hessian of a strictly convex potential.
pub fn bregman_adaptation_wrap(
    base_dtheta_unit_gain: &DVector<f64>,
    psi_hessian_inverse: &DMatrix<f64>,
) -> Result<DVector<f64>, ControlError> {
    let sym_defect = (psi_hessian_inverse - psi_hessian_inverse.transpose()).amax();
    if sym_defect > 1e-9 * (1.0 + psi_hessian_inverse.amax()) {
        return Err(ControlError::SingularHessian);
    }
    match min_eig(psi_hessian_inverse) {
        Ok(lo) if lo > 0.0 => Ok(psi_hessian_inverse * base_dtheta_unit_gain),
        _ => Err(ControlError::SingularHessian),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DomainBox, SystemBounds};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    /// Constant metric for tests.
    struct ConstMetric(DMatrix<f64>);
    impl Metric for ConstMetric {
        fn eval(&self, _: &DVector<f64>, _: &DVector<f64>, _: Option<&DVector<f64>>) -> DMatrix<f64> {
            self.0.clone()
        }
    }

    /// Analytic synthetic metric M(x) = diag(1 + x1^2, 1).
    struct QuadMetric;
    impl Metric for QuadMetric {
        fn eval(&self, x: &DVector<f64>, _: &DVector<f64>, _: Option<&DVector<f64>>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[1.0 + x[0] * x[0], 0.0, 0.0, 1.0])
        }
    }

    fn unit_bounds() -> CertBounds {
        CertBounds {
            b_bar: 1.0,
            rho_bar: 1.0,
            unc_bar: 1.0,
            theta_bar: 1.0,
            omega_lower: 1.0,
            omega_upper: 1.0,
            gamma_lower: 1.0,
            gamma_upper: 1.0,
            d_bar: 0.0,
        }
    }

    fn scalar_cfg(gamma: f64, sigma: f64) -> ControllerConfig {
        let mut b = unit_bounds();
        b.gamma_lower = gamma;
        b.gamma_upper = gamma;
        ControllerConfig::new(
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, gamma),
            sigma,
            1.0,
            b,
        )
    }

    fn scalar_system(a: f64, b: f64) -> SystemModel {
        SystemModel::new(
            1,
            1,
            Arc::new(move |x: &DVector<f64>| DVector::from_element(1, a * x[0])),
            Arc::new(move |_: &DVector<f64>| DMatrix::from_element(1, 1, b)),
            SystemBounds {
                b_bar: b.abs().max(1.0),
                rho_bar: 1.0,
                d_bar: 0.0,
            },
            DomainBox::symmetric(&[2.0]),
        )
    }

    #[test]
    fn metric_derivative_zero_for_zero_error() {
        let m = QuadMetric;
        let x = DVector::from_column_slice(&[0.7, -0.2]);
        let xd = DVector::zeros(2);
        let (dmx, dmxd) = metric_derivatives(&m, &x, &xd, None, &DVector::zeros(2), 1e-5);
        assert!(dmx.amax() < 1e-12);
        assert!(dmxd.amax() < 1e-12);
    }

    #[test]
    fn metric_derivative_zero_for_constant_metric() {
        let m = ConstMetric(DMatrix::identity(2, 2) * 3.0);
        let x = DVector::from_column_slice(&[0.7, -0.2]);
        let e = DVector::from_column_slice(&[0.5, 1.0]);
        let (dmx, dmxd) = metric_derivatives(&m, &x, &x, None, &e, 1e-5);
        assert!(dmx.amax() < 1e-12);
        assert!(dmxd.amax() < 1e-12);
    }

    #[test]
    fn metric_derivative_matches_analytic_quadratic() {
        // dM/dx1 = diag(2 x1, 0); row 1 of dM_x = (x1 e1, 0).
        let m = QuadMetric;
        let x = DVector::from_column_slice(&[0.8, 0.3]);
        let xd = DVector::from_column_slice(&[0.1, 0.1]);
        let e = DVector::from_column_slice(&[0.4, -0.9]);
        let (dmx, dmxd) = metric_derivatives(&m, &x, &xd, None, &e, 1e-5);
        assert_abs_diff_eq!(dmx[(0, 0)], x[0] * e[0], epsilon = 1e-6);
        assert_abs_diff_eq!(dmx[(0, 1)], 0.0, epsilon = 1e-9);
        assert!(dmx.row(1).amax() < 1e-9);
        assert!(dmxd.amax() < 1e-9);
    }

    #[test]
    fn robust_u_identity_cases() {
        let sys = scalar_system(-1.0, 1.0);
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let x = DVector::from_element(1, 0.7);
        let ud = DVector::from_element(1, 0.3);
        // x == x_d -> u = u_d
        let u = robust_ncm_u(&metric, &sys, &x, &x, &ud, &DMatrix::identity(1, 1));
        assert_abs_diff_eq!(u[0], 0.3, epsilon = 1e-15);
        // scalar unit feedback
        let xd = DVector::from_element(1, 0.2);
        let u = robust_ncm_u(&metric, &sys, &x, &xd, &ud, &DMatrix::identity(1, 1));
        assert_abs_diff_eq!(u[0], 0.3 - 0.5, epsilon = 1e-15);
    }

    fn matched_const_system() -> AffineUncertainSystem {
        // Delta(x)^T = -x * 1 (matched through B = 1): phi = -(x - x_d).
        AffineUncertainSystem {
            base: scalar_system(-1.0, 1.0),
            delta: Arc::new(|x: &DVector<f64>| DMatrix::from_element(1, 1, -x[0])),
            p: 1,
            theta_bar: 2.0,
            phi_bar: 5.0,
        }
    }

    #[test]
    fn affine_law_zero_error_cases() {
        let sys = matched_const_system();
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let x = DVector::from_element(1, 0.4);
        let ud = DVector::from_element(1, 0.1);
        let th = DVector::from_element(1, 0.8);

        // e = 0, sigma = 0: dtheta = 0, u = u_d + phi^T theta (phi = 0 here).
        let cfg = scalar_cfg(1.0, 0.0);
        let (u, dth) = affine_adaptive_step(&metric, &sys, &x, &x, &ud, &th, &cfg).unwrap();
        assert_abs_diff_eq!(dth[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[0], ud[0], epsilon = 1e-12);

        // e = 0, sigma > 0: pure leakage decay.
        let cfg = scalar_cfg(2.0, 0.5);
        let (_, dth) = affine_adaptive_step(&metric, &sys, &x, &x, &ud, &th, &cfg).unwrap();
        assert_abs_diff_eq!(dth[0], -2.0 * 0.5 * th[0], epsilon = 1e-12);
    }

    /// Constant Delta makes phi vanish, so the closed-loop error obeys the
    /// exact linear ODE edot = -(1 + M) e regardless of theta.
    #[test]
    fn affine_closed_loop_matches_linear_solution() {
        // x-dynamics: xdot = -x + u - Delta^T theta with Delta = -1 (const).
        let sys = AffineUncertainSystem {
            base: scalar_system(-1.0, 1.0),
            delta: Arc::new(|_: &DVector<f64>| DMatrix::from_element(1, 1, -1.0)),
            p: 1,
            theta_bar: 2.0,
            phi_bar: 1.0,
        };
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let cfg = scalar_cfg(1.0, 0.0);
        let theta_true = 1.3;
        let mut x = DVector::from_element(1, 2.0);
        let mut xd = DVector::from_element(1, 0.5);
        let mut th = DVector::from_element(1, 0.0);
        let ud = DVector::zeros(1);
        let dt = 1e-3;
        let steps = 2000;
        let e0: f64 = x[0] - xd[0];
        for _ in 0..steps {
            let rk4 = |x: &DVector<f64>, xd: &DVector<f64>, th: &DVector<f64>| {
                let (u, dth) =
                    affine_adaptive_step(&metric, &sys, x, xd, &ud, th, &cfg).unwrap();
                let dx = sys.base.f_at(x) + sys.base.b_at(x) * &u
                    - sys.delta_at(x).transpose() * DVector::from_element(1, theta_true);
                let dxd = sys.base.f_at(xd) + sys.base.b_at(xd) * &ud
                    - sys.delta_at(xd).transpose() * DVector::from_element(1, theta_true);
                (dx, dxd, dth)
            };
            // classic RK4 on the composite state
            let (k1x, k1d, k1t) = rk4(&x, &xd, &th);
            let (k2x, k2d, k2t) = rk4(&(&x + &k1x * (dt / 2.0)), &(&xd + &k1d * (dt / 2.0)), &(&th + &k1t * (dt / 2.0)));
            let (k3x, k3d, k3t) = rk4(&(&x + &k2x * (dt / 2.0)), &(&xd + &k2d * (dt / 2.0)), &(&th + &k2t * (dt / 2.0)));
            let (k4x, k4d, k4t) = rk4(&(&x + &k3x * dt), &(&xd + &k3d * dt), &(&th + &k3t * dt));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
            xd += (k1d + k2d * 2.0 + k3d * 2.0 + k4d) * (dt / 6.0);
            th += (k1t + k2t * 2.0 + k3t * 2.0 + k4t) * (dt / 6.0);
        }
        let t_end = dt * steps as f64;
        let expected = e0 * (-2.0 * t_end).exp();
        assert_abs_diff_eq!(x[0] - xd[0], expected, epsilon = 1e-6);
        // theta never moved: phi = 0.
        assert_abs_diff_eq!(th[0], 0.0, epsilon = 1e-12);
    }

    /// State-dependent matched uncertainty: adaptation drives e to zero.
    #[test]
    fn affine_adaptation_converges_with_state_dependent_uncertainty() {
        let sys = matched_const_system();
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let cfg = scalar_cfg(1.0, 0.0);
        let theta_true = DVector::from_element(1, 0.9);
        let mut x = DVector::from_element(1, 1.5);
        let xd = DVector::zeros(1);
        let mut th = DVector::from_element(1, 0.0);
        let ud = DVector::zeros(1);
        let dt = 1e-3;
        for _ in 0..8000 {
            let f = |x: &DVector<f64>, th: &DVector<f64>| {
                let (u, dth) = affine_adaptive_step(&metric, &sys, x, &xd, &ud, th, &cfg).unwrap();
                let dx = sys.base.f_at(x) + sys.base.b_at(x) * &u
                    - sys.delta_at(x).transpose() * &theta_true;
                (dx, dth)
            };
            let (k1x, k1t) = f(&x, &th);
            let (k2x, k2t) = f(&(&x + &k1x * (dt / 2.0)), &(&th + &k1t * (dt / 2.0)));
            let (k3x, k3t) = f(&(&x + &k2x * (dt / 2.0)), &(&th + &k2t * (dt / 2.0)));
            let (k4x, k4t) = f(&(&x + &k3x * dt), &(&th + &k3t * dt));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
            th += (k1t + k2t * 2.0 + k3t * 2.0 + k4t) * (dt / 6.0);
        }
        assert!(x[0].abs() < 1e-3, "e(8 s) = {}", x[0]);
    }

    fn one_dof_arm() -> LagrangianSystem {
        LagrangianSystem {
            n: 1,
            p: 1,
            h_mat: Arc::new(|_: &DVector<f64>| DMatrix::from_element(1, 1, 2.0)),
            h_vec: Arc::new(|s: &DVector<f64>| DVector::from_element(1, 0.5 * s[0])),
            delta: Arc::new(|s: &DVector<f64>| DMatrix::from_element(1, 1, s[0].cos())),
            delta_bar: 1.0,
            d_s_bar: 0.0,
            cond_cap: 10.0,
            domain: DomainBox::symmetric(&[2.0]),
        }
    }

    #[test]
    fn lagrangian_zero_state_cases() {
        let lsys = one_dof_arm();
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let cfg = scalar_cfg(1.0, 0.3);
        let s = DVector::zeros(1);
        let th = DVector::from_element(1, 0.7);
        // s = 0 with printed leakage: tau = Delta theta_hat, dtheta = 0.
        let (tau, dth) = lagrangian_adaptive_step(&metric, &lsys, &s, &th, &cfg).unwrap();
        assert_abs_diff_eq!(tau[0], 1.0 * 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(dth[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lagrangian_uncertainty_free_reduces_to_robust() {
        // H = I, h = 0, Delta = 0: tau equals the robust law on s.
        let lsys = LagrangianSystem {
            n: 1,
            p: 1,
            h_mat: Arc::new(|_: &DVector<f64>| DMatrix::identity(1, 1)),
            h_vec: Arc::new(|_: &DVector<f64>| DVector::zeros(1)),
            delta: Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 1)),
            delta_bar: 0.0,
            d_s_bar: 0.0,
            cond_cap: 10.0,
            domain: DomainBox::symmetric(&[2.0]),
        };
        let metric = ConstMetric(DMatrix::from_element(1, 1, 2.5));
        let cfg = scalar_cfg(1.0, 0.0);
        let s = DVector::from_element(1, 0.6);
        let th = DVector::from_element(1, 0.9);
        let (tau, _) = lagrangian_adaptive_step(&metric, &lsys, &s, &th, &cfg).unwrap();
        assert_abs_diff_eq!(tau[0], -2.5 * 0.6, epsilon = 1e-15);
    }

    #[test]
    fn lagrangian_printed_leakage_rejects_mismatched_dims() {
        let mut lsys = one_dof_arm();
        lsys.p = 2;
        lsys.delta = Arc::new(|s: &DVector<f64>| {
            DMatrix::from_row_slice(1, 2, &[s[0].cos(), 1.0])
        });
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let mut cfg = scalar_cfg(1.0, 0.3);
        cfg.gamma = DMatrix::identity(2, 2);
        let s = DVector::from_element(1, 0.1);
        let th = DVector::from_column_slice(&[0.1, 0.2]);
        assert!(matches!(
            lagrangian_adaptive_step(&metric, &lsys, &s, &th, &cfg),
            Err(ControlError::LeakageDimension { .. })
        ));
        cfg.leakage = LagrangianLeakage::Estimate;
        assert!(lagrangian_adaptive_step(&metric, &lsys, &s, &th, &cfg).is_ok());
    }

    fn scalar_parametric(stable: f64) -> ParametricSystem {
        let base = scalar_system(stable, 1.0);
        ParametricSystem {
            base,
            y_f: Arc::new(move |x: &DVector<f64>| {
                DMatrix::from_row_slice(1, 2, &[stable * x[0], x[0]])
            }),
            y_b: vec![Arc::new(|_: &DVector<f64>| {
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
            })],
            z_map: Arc::new(|t: &DVector<f64>| t.clone()),
            p: 2,
            q_z: 2,
            augmented: true,
            theta_nominal: DVector::from_column_slice(&[1.0, 0.0]),
        }
    }

    #[test]
    fn ancm_zero_error_freezes_adaptation() {
        let psys = scalar_parametric(-1.0);
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let mut cfg = scalar_cfg(1.0, 0.0);
        cfg.gamma = DMatrix::identity(2, 2);
        let x = DVector::from_element(1, 0.5);
        let ud = DVector::from_element(1, 0.2);
        let up = DVector::from_element(1, 0.2);
        let th = DVector::from_column_slice(&[1.0, 0.3]);
        let (u, dth) = ancm_control_step(&metric, &psys, &x, &x, &ud, &up, &th, &cfg);
        assert_abs_diff_eq!(u[0], ud[0], epsilon = 1e-12);
        assert!(dth.amax() < 1e-12);
    }

    #[test]
    fn ancm_with_no_parameters_equals_robust_bitwise() {
        let base = scalar_system(-1.0, 1.0);
        let psys = ParametricSystem {
            base: base.clone(),
            y_f: Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 0)),
            y_b: vec![Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 0))],
            z_map: Arc::new(|t: &DVector<f64>| t.clone()),
            p: 0,
            q_z: 0,
            augmented: true,
            theta_nominal: DVector::zeros(0),
        };
        let metric = ConstMetric(DMatrix::from_element(1, 1, 1.7));
        let cfg = {
            let mut c = scalar_cfg(1.0, 0.0);
            c.gamma = DMatrix::zeros(0, 0);
            c
        };
        let x = DVector::from_element(1, 0.9);
        let xd = DVector::from_element(1, -0.4);
        let ud = DVector::from_element(1, 0.05);
        let up = DVector::zeros(1);
        let th = DVector::zeros(0);
        // Bitwise equality: identical arithmetic path for the feedback term.
        let (u_ancm, dth) = ancm_control_step(&metric, &psys, &x, &xd, &ud, &up, &th, &cfg);
        let u_rob = robust_ncm_u(&metric, &base, &x, &xd, &ud, &cfg.r_weight);
        assert_eq!(u_ancm[0].to_bits(), u_rob[0].to_bits());
        assert_eq!(dth.len(), 0);
    }

    #[test]
    fn basis_weight_step_zero_and_leakage() {
        let bm = BasisFunctionModel {
            n: 2,
            m: 1,
            f_hat: DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.1, 0.4]),
            b_hat: vec![DMatrix::from_row_slice(2, 1, &[1.0, -1.0])],
            phi: Arc::new(|x: &DVector<f64>| DVector::from_column_slice(&[x[0], x[1]])),
            varphi: vec![Arc::new(|_: &DVector<f64>| DVector::from_element(1, 1.0))],
            zeta_bar: 2.0,
            d_m_bar: 0.0,
        };
        let metric = ConstMetric(DMatrix::identity(2, 2));
        let x = DVector::from_column_slice(&[0.3, -0.6]);
        let u = DVector::from_element(1, 0.4);

        // e = 0, sigma = 0: all derivatives zero.
        let mut cfg = scalar_cfg(2.0, 0.0);
        cfg.gamma = DMatrix::from_element(1, 1, 2.0);
        let (df, dbs) = basis_weight_step(&metric, &bm, &x, &x, &u, &u, &cfg);
        assert!(df.amax() < 1e-12);
        assert!(dbs[0].amax() < 1e-12);

        // e = 0, sigma > 0: dW = -(sigma/gamma) W.
        let mut cfg = scalar_cfg(2.0, 0.8);
        cfg.gamma = DMatrix::from_element(1, 1, 2.0);
        let (df, dbs) = basis_weight_step(&metric, &bm, &x, &x, &u, &u, &cfg);
        assert!((df.clone() + &bm.f_hat * (0.8 / 2.0)).amax() < 1e-12);
        assert!((dbs[0].clone() + &bm.b_hat[0] * (0.8 / 2.0)).amax() < 1e-12);
    }

    #[test]
    fn basis_weight_rank_one_structure() {
        // Constant metric I, dM = 0, sigma = 0: dF(i,j) = e_i phi_j / gamma.
        let bm = BasisFunctionModel {
            n: 2,
            m: 1,
            f_hat: DMatrix::zeros(2, 2),
            b_hat: vec![DMatrix::zeros(2, 1)],
            phi: Arc::new(|x: &DVector<f64>| DVector::from_column_slice(&[x[0], 2.0 * x[1]])),
            varphi: vec![Arc::new(|_: &DVector<f64>| DVector::from_element(1, 1.0))],
            zeta_bar: 4.0,
            d_m_bar: 0.0,
        };
        let metric = ConstMetric(DMatrix::identity(2, 2));
        let mut cfg = scalar_cfg(3.0, 0.0);
        cfg.gamma = DMatrix::from_element(1, 1, 3.0);
        let x = DVector::from_column_slice(&[0.5, -0.3]);
        let xd = DVector::zeros(2);
        let u = DVector::zeros(1);
        let (df, _) = basis_weight_step(&metric, &bm, &x, &xd, &u, &u, &cfg);
        let e = &x - &xd;
        let phi_x = DVector::from_column_slice(&[x[0], 2.0 * x[1]]);
        let phi_xd = DVector::zeros(2);
        let zt = &phi_x - &phi_xd;
        // M e zeta~^T / gamma (the dM terms vanish)
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(df[(i, j)], e[i] * zt[j] / 3.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gain_condition_closed_form_at_zero_eps() {
        // alpha_a = min(alpha_ncm w_lo / w_hi, sigma gamma_lo) when eps = 0.
        let mut b = unit_bounds();
        b.omega_lower = 0.2;
        b.omega_upper = 0.8;
        b.gamma_lower = 0.5;
        b.gamma_upper = 2.0;
        let sigma = 0.7;
        let alpha_ncm = 0.9;
        let cert = check_gain_condition(GainKind::Ancm, &b, sigma, 0.0, alpha_ncm);
        assert!(cert.pass);
        let expected = (alpha_ncm * b.omega_lower / b.omega_upper).min(sigma * b.gamma_lower);
        assert_abs_diff_eq!(cert.alpha_a, expected, epsilon = 1e-9);
    }

    #[test]
    fn gain_condition_fails_without_leakage() {
        // sigma = 0, eps = 0: the (2,2) entry admits no positive alpha_a.
        let cert = check_gain_condition(GainKind::Affine, &unit_bounds(), 0.0, 0.0, 0.5);
        assert!(!cert.pass);
    }

    #[test]
    fn gain_condition_matches_quadratic_root() {
        // 2x2 determinant boundary: 4 (A - a/w_lo)(s - a/g_lo) = c^2 with
        // A = alpha_ncm / w_hi; take the smaller root.
        let mut b = unit_bounds();
        b.omega_lower = 0.25;
        b.omega_upper = 1.5;
        b.gamma_lower = 0.6;
        b.gamma_upper = 3.0;
        b.unc_bar = 2.0;
        b.b_bar = 1.3;
        let sigma = 0.9;
        let alpha_ncm = 0.8;
        let eps = 0.21;
        let cert = check_gain_condition(GainKind::Affine, &b, sigma, eps, alpha_ncm);
        assert!(cert.pass);

        // Quadratic-formula oracle: with x = alpha_a,
        // (2A - 2x/wl)(2s - 2x/gl) - c^2 = 0
        let a_term = alpha_ncm / b.omega_upper;
        let c = b.unc_bar * b.b_bar * eps;
        let (wl, gl) = (b.omega_lower, b.gamma_lower);
        // 4 (A - x/wl)(s - x/gl) = c^2
        // 4 [ As - x (A/gl + s/wl) + x^2/(wl gl) ] - c^2 = 0
        let qa = 4.0 / (wl * gl);
        let qb = -4.0 * (a_term / gl + sigma / wl);
        let qc = 4.0 * a_term * sigma - c * c;
        let disc = (qb * qb - 4.0 * qa * qc).sqrt();
        let root = (-qb - disc) / (2.0 * qa);
        assert_abs_diff_eq!(cert.alpha_a, root, epsilon = 1e-9);
    }

    #[test]
    fn gain_condition_basis_block_is_sound() {
        let mut b = unit_bounds();
        b.omega_lower = 0.3;
        b.omega_upper = 1.2;
        b.gamma_lower = 0.8;
        b.unc_bar = 0.5;
        let cert = check_gain_condition(GainKind::Basis { m: 2 }, &b, 0.6, 0.1, 0.7);
        assert!(cert.pass);
        assert_eq!(cert.condition.nrows(), 4);
        // Soundness: condition + 2 alpha_a scaling has max eig <= 1e-9.
        let s = &cert.condition + &cert.scaling * (2.0 * cert.alpha_a);
        assert!(max_eig(&s).unwrap() <= 1e-9);
    }

    #[test]
    fn tracking_bound_limit_cases() {
        let mut b = unit_bounds();
        b.omega_lower = 0.25;
        b.omega_upper = 4.0;
        b.gamma_upper = 1.0;
        b.theta_bar = 2.0;
        b.d_bar = 0.5;
        let cert = GainCertificate {
            alpha_a: 0.8,
            condition: DMatrix::zeros(2, 2),
            scaling: DMatrix::identity(2, 2),
            pass: true,
        };
        let sigma = 0.3;
        let v0 = 9.0;
        // t = 0 -> sqrt(omega_upper) sqrt(V0)
        assert_abs_diff_eq!(
            tracking_error_bound(&cert, v0, 0.0, sigma, &b),
            2.0 * 3.0,
            epsilon = 1e-12
        );
        // t -> infinity -> sqrt(omega_upper) d_a / alpha_a
        let d_a = sigma * 1.0 * 2.0 + 0.5 / 0.5;
        assert_abs_diff_eq!(
            tracking_error_bound(&cert, v0, 1e9, sigma, &b),
            2.0 * d_a / 0.8,
            epsilon = 1e-9
        );
        // sigma = 0, d = 0 -> pure exponential envelope
        b.d_bar = 0.0;
        let t = 1.7;
        assert_abs_diff_eq!(
            tracking_error_bound(&cert, v0, t, 0.0, &b),
            2.0 * 3.0 * (-0.8 * t).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn clf_qp_scalar_slack_constraint() {
        // M = 1, A = -2, alpha = 1, Mdot = 0: constraint already slack, so
        // K = 0, p = 0.
        let psys = scalar_parametric(-2.0);
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let mut cfg = scalar_cfg(1.0, 0.0);
        cfg.alpha = 1.0;
        let x = DVector::from_element(1, 1.0);
        let xd = DVector::zeros(1);
        let th = DVector::from_column_slice(&[1.0, 0.0]);
        let u0 = DVector::zeros(1);
        let (k, p) = clf_qp_gain(&metric, &psys, &x, &xd, &th, &u0, &u0, &cfg).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn clf_qp_scalar_kkt_point() {
        // M = 1, A = +1, alpha = 1, e = 1: KKT gives (K, p) = (-1.6, 0.8).
        let psys = scalar_parametric(1.0);
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let mut cfg = scalar_cfg(1.0, 0.0);
        cfg.alpha = 1.0;
        let x = DVector::from_element(1, 1.0);
        let xd = DVector::zeros(1);
        let th = DVector::from_column_slice(&[1.0, 0.0]);
        let u0 = DVector::zeros(1);
        let (k, p) = clf_qp_gain(&metric, &psys, &x, &xd, &th, &u0, &u0, &cfg).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], -1.6, epsilon = 1e-6);
        assert_abs_diff_eq!(p, 0.8, epsilon = 1e-6);

        // Fine grid-search oracle over (K, p).
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for ki in 0..=4000 {
            let kv = -4.0 + 8.0 * ki as f64 / 4000.0;
            // constraint: 2 + 2k <= -2 + p -> p >= 4 + 2k
            let pv = (4.0 + 2.0 * kv).max(0.0);
            let obj = kv * kv + pv * pv;
            if obj < best.0 {
                best = (obj, kv, pv);
            }
        }
        assert_abs_diff_eq!(k[(0, 0)], best.1, epsilon = 1e-3);
        assert_abs_diff_eq!(p, best.2, epsilon = 1e-3);
    }

    #[test]
    fn bregman_identity_and_diagonal() {
        let base = DVector::from_column_slice(&[0.4, -1.2]);
        // psi = ||x||^2 / 2: identity scaling.
        let out = bregman_adaptation_wrap(&base, &DMatrix::identity(2, 2)).unwrap();
        assert!((out - &base).amax() < 1e-15);
        // psi = x^T D x / 2: rescale by 1/D_ii.
        let d_inv = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 4.0]);
        let out = bregman_adaptation_wrap(&base, &d_inv).unwrap();
        assert_abs_diff_eq!(out[0], 0.4 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], -1.2 * 4.0, epsilon = 1e-15);
        // singular Hessian rejected
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(bregman_adaptation_wrap(&base, &bad).is_err());
    }

    /// Over-parameterized scalar interpolation: the smoothed-l1 potential
    /// steers the estimate to a sparser interpolant than l2.
    #[test]
    fn bregman_smoothed_l1_is_sparser_than_l2() {
        // xdot = -2x + u - Delta(x)^T theta, Delta(x)^T = -x [1, 0.3]:
        // any theta with theta1 + 0.3 theta2 = c interpolates.
        let sys = AffineUncertainSystem {
            base: scalar_system(-2.0, 1.0),
            delta: Arc::new(|x: &DVector<f64>| {
                DMatrix::from_row_slice(2, 1, &[-x[0], -0.3 * x[0]])
            }),
            p: 2,
            theta_bar: 3.0,
            phi_bar: 10.0,
        };
        let metric = ConstMetric(DMatrix::identity(1, 1));
        let mut cfg = scalar_cfg(1.0, 0.0);
        cfg.gamma = DMatrix::identity(2, 2);
        let theta_true = DVector::from_column_slice(&[1.5, 0.0]);
        let ud = DVector::zeros(1);
        let xd = DVector::zeros(1);

        let run = |hess_inv: &dyn Fn(&DVector<f64>) -> DMatrix<f64>| -> DVector<f64> {
            let mut x = DVector::from_element(1, 2.0);
            let mut th = DVector::zeros(2);
            let dt = 1e-3;
            for _ in 0..20000 {
                let f = |x: &DVector<f64>, th: &DVector<f64>| {
                    let (u, dth_unit) =
                        affine_adaptive_step(&metric, &sys, x, &xd, &ud, th, &cfg).unwrap();
                    let dth = bregman_adaptation_wrap(&dth_unit, &hess_inv(th)).unwrap();
                    let dx = sys.base.f_at(x) + sys.base.b_at(x) * &u
                        - sys.delta_at(x).transpose() * &theta_true;
                    (dx, dth)
                };
                let (k1x, k1t) = f(&x, &th);
                let (k2x, k2t) = f(&(&x + &k1x * (dt / 2.0)), &(&th + &k1t * (dt / 2.0)));
                let (k3x, k3t) = f(&(&x + &k2x * (dt / 2.0)), &(&th + &k2t * (dt / 2.0)));
                let (k4x, k4t) = f(&(&x + &k3x * dt), &(&th + &k3t * dt));
                x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
                th += (k1t + k2t * 2.0 + k3t * 2.0 + k4t) * (dt / 6.0);
            }
            th
        };

        let l2 = run(&|_| DMatrix::identity(2, 2));
        let eps = 0.01;
        let l1 = run(&|th: &DVector<f64>| {
            DMatrix::from_fn(2, 2, |i, j| {
                if i == j {
                    let v: f64 = th[i];
                    (v * v + eps * eps).powf(1.5) / (eps * eps)
                } else {
                    0.0
                }
            })
        });
        let count = |v: &DVector<f64>| v.iter().filter(|e| e.abs() > 1e-3).count();
        assert!(
            count(&l1) < count(&l2),
            "l1 {:?} not sparser than l2 {:?}",
            l1.as_slice(),
            l2.as_slice()
        );
    }
}
