//! Control-affine and parametric system descriptions, SDC factorization,
//! and the benchmark models.

pub mod cartpole;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub use cartpole::CartPole;

/// `x -> vector` closure shared across threads.
pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `x -> matrix` closure shared across threads.
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dynamics returned non-finite values on the evaluation segment")]
    NonFiniteDynamics,
    #[error("mass matrix is numerically singular (det {det:.3e})")]
    SingularMass { det: f64 },
    #[error("matched-uncertainty residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    Unmatched { residual: f64, tol: f64 },
}

/// Norm bounds declared for a system; they must dominate sampled values over
/// the domain.
#[derive(Debug, Clone, Copy)]
pub struct SystemBounds {
    /// sup of the input-matrix norm.
    pub b_bar: f64,
    /// sup of the inverse input-weight norm.
    pub rho_bar: f64,
    /// sup of the disturbance norm.
    pub d_bar: f64,
}

/// Axis-aligned compact domain.
#[derive(Debug, Clone)]
pub struct DomainBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl DomainBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(hi.iter()).all(|(l, h)| l <= h));
        DomainBox { lo, hi }
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        let hi = DVector::from_column_slice(half_widths);
        DomainBox::new(-&hi, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.hi[i] > self.lo[i] {
                rng.gen_range(self.lo[i]..self.hi[i])
            } else {
                self.lo[i]
            }
        })
    }

    /// Axis-aligned lattice with the given per-axis point counts; an axis
    /// with count 1 contributes the box midpoint. Points are enumerated in
    /// row-major order (last axis fastest).
    pub fn lattice(&self, counts: &[usize]) -> Vec<DVector<f64>> {
        assert_eq!(counts.len(), self.dim());
        assert!(counts.iter().all(|&c| c >= 1));
        let axes: Vec<Vec<f64>> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if c == 1 {
                    vec![0.5 * (self.lo[i] + self.hi[i])]
                } else {
                    (0..c)
                        .map(|k| {
                            self.lo[i] + (self.hi[i] - self.lo[i]) * k as f64 / (c - 1) as f64
                        })
                        .collect()
                }
            })
            .collect();
        let total: usize = counts.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; counts.len()];
        for _ in 0..total {
            out.push(DVector::from_fn(self.dim(), |i, _| axes[i][idx[i]]));
            for ax in (0..counts.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < counts[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }
}

/// Control-affine system `xdot = f(x) + B(x) u` on a compact domain, with
/// declared norm bounds.
#[derive(Clone)]
pub struct SystemModel {
    pub n: usize,
    pub m: usize,
    pub f: StateFn,
    pub b: MatrixFn,
    pub bounds: SystemBounds,
    pub domain: DomainBox,
}

impl SystemModel {
    pub fn new(
        n: usize,
        m: usize,
        f: StateFn,
        b: MatrixFn,
        bounds: SystemBounds,
        domain: DomainBox,
    ) -> Self {
        assert!(n >= 1 && m >= 1);
        assert_eq!(domain.dim(), n);
        SystemModel {
            n,
            m,
            f,
            b,
            bounds,
            domain,
        }
    }

    pub fn f_at(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn b_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.b)(x)
    }
}

/// Nodes and weights of `order`-point Gauss-Legendre quadrature on `[0, 1]`.
///
/// Nodes are found by Newton iteration on the Legendre polynomial from the
/// Chebyshev initial guess; exact for polynomial integrands of degree
/// `2 * order - 1`.
pub fn gauss_legendre_unit(order: usize) -> Vec<(f64, f64)> {
    assert!(order >= 2, "quadrature order must be >= 2");
    let n = order;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) * 0.5, w * 0.5));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Jacobian by central finite differences with step `1e-6 * (1 + ||x||)`.
pub fn jacobian_central(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let h = 1e-6 * (1.0 + x.norm());
    let f0_len = f(x).len();
    let mut jac = DMatrix::zeros(f0_len, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(i, &col);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    jac
}

/// SDC matrix `A(x, x_d)` with `A (x - x_d) = fbar(x) - fbar(x_d)` for
/// `fbar(q) = f(q) + B(q) u_d`, computed as the line integral of the Jacobian
/// along the segment by fixed-order Gauss-Legendre quadrature.
pub fn sdc_matrix(
    sys: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    quad_order: usize,
) -> Result<DMatrix<f64>, DynamicsError> {
    assert_eq!(x.len(), sys.n);
    assert_eq!(x_d.len(), sys.n);
    assert_eq!(u_d.len(), sys.m);
    let fbar = |q: &DVector<f64>| -> DVector<f64> { (sys.f)(q) + (sys.b)(q) * u_d };

    let mut a = DMatrix::<f64>::zeros(sys.n, sys.n);
    for (node, weight) in gauss_legendre_unit(quad_order) {
        let q = x * node + x_d * (1.0 - node);
        if !fbar(&q).iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFiniteDynamics);
        }
        let jac = jacobian_central(&fbar, &q);
        if !jac.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFiniteDynamics);
        }
        a += jac * weight;
    }
    Ok(a)
}

/// Multiplicatively separable system: `f(x, theta) = Y_f(x) Z(theta)` and
/// `b_i(x, theta) = Y_bi(x) Z(theta)`.
///
/// When `augmented` is set the feature map is the identity and the regressors
/// act linearly on the parameter itself, which is the form the adaptive
/// controller requires.
#[derive(Clone)]
pub struct ParametricSystem {
    /// Nominal model, evaluated at `theta_nominal`.
    pub base: SystemModel,
    pub y_f: MatrixFn,
    pub y_b: Vec<MatrixFn>,
    pub z_map: StateFn,
    /// Raw parameter dimension.
    pub p: usize,
    /// Feature dimension.
    pub q_z: usize,
    pub augmented: bool,
    pub theta_nominal: DVector<f64>,
}

impl ParametricSystem {
    pub fn features(&self, theta: &DVector<f64>) -> DVector<f64> {
        assert_eq!(theta.len(), self.p);
        (self.z_map)(theta)
    }

    pub fn f_at(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        if self.q_z == 0 {
            return self.base.f_at(x);
        }
        (self.y_f)(x) * self.features(theta)
    }

    pub fn b_at(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        if self.q_z == 0 {
            return self.base.b_at(x);
        }
        let z = self.features(theta);
        let mut b = DMatrix::zeros(self.base.n, self.y_b.len());
        for (i, ybi) in self.y_b.iter().enumerate() {
            b.set_column(i, &(ybi(x) * &z));
        }
        b
    }

    /// `Y_b(x, u) = sum_i Y_bi(x) u_i`.
    pub fn y_b_combined(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(u.len(), self.y_b.len());
        let mut acc = DMatrix::zeros(self.base.n, self.q_z);
        for (i, ybi) in self.y_b.iter().enumerate() {
            acc += ybi(x) * u[i];
        }
        acc
    }

    /// Frozen-parameter view as a plain control-affine system.
    pub fn system_at(&self, theta: &DVector<f64>) -> SystemModel {
        if self.q_z == 0 {
            return self.base.clone();
        }
        let z = self.features(theta);
        let y_f = self.y_f.clone();
        let y_b = self.y_b.clone();
        let n = self.base.n;
        let m = y_b.len();
        let zf = z.clone();
        let f: StateFn = Arc::new(move |x| y_f(x) * &zf);
        let b: MatrixFn = Arc::new(move |x| {
            let mut out = DMatrix::zeros(n, m);
            for (i, ybi) in y_b.iter().enumerate() {
                out.set_column(i, &(ybi(x) * &z));
            }
            out
        });
        SystemModel::new(n, m, f, b, self.base.bounds, self.base.domain.clone())
    }

    /// Literal parameter augmentation: the new parameter is
    /// `[theta; Z(theta)]` and the regressors act linearly on it (the leading
    /// raw block sees zero columns).
    pub fn augmented(self) -> ParametricSystem {
        if self.augmented {
            return self;
        }
        let p_new = self.p + self.q_z;
        let q_new = p_new;
        let n = self.base.n;
        let p_old = self.p;
        let q_old = self.q_z;
        let pad = move |y: DMatrix<f64>| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(n, p_old + q_old);
            out.view_mut((0, p_old), (n, q_old)).copy_from(&y);
            out
        };
        let y_f_old = self.y_f.clone();
        let y_f: MatrixFn = Arc::new(move |x| pad(y_f_old(x)));
        let y_b: Vec<MatrixFn> = self
            .y_b
            .iter()
            .map(|ybi| {
                let ybi = ybi.clone();
                let pad = move |y: DMatrix<f64>| -> DMatrix<f64> {
                    let mut out = DMatrix::zeros(n, p_old + q_old);
                    out.view_mut((0, p_old), (n, q_old)).copy_from(&y);
                    out
                };
                let f: MatrixFn = Arc::new(move |x: &DVector<f64>| pad(ybi(x)));
                f
            })
            .collect();
        let theta_nominal = {
            let feats = (self.z_map)(&self.theta_nominal);
            let mut t = DVector::zeros(p_new);
            t.rows_mut(0, p_old).copy_from(&self.theta_nominal);
            t.rows_mut(p_old, q_old).copy_from(&feats);
            t
        };
        ParametricSystem {
            base: self.base,
            y_f,
            y_b,
            z_map: Arc::new(|theta: &DVector<f64>| theta.clone()),
            p: p_new,
            q_z: q_new,
            augmented: true,
            theta_nominal,
        }
    }
}

/// System with affine parametric uncertainty
/// `xdot = f(x) + B(x) u - Delta(x)^T theta + d(x)`.
#[derive(Clone)]
pub struct AffineUncertainSystem {
    /// Nominal part (`Delta = 0`).
    pub base: SystemModel,
    /// `x -> p x n` uncertainty matrix.
    pub delta: MatrixFn,
    pub p: usize,
    pub theta_bar: f64,
    pub phi_bar: f64,
}

impl AffineUncertainSystem {
    pub fn delta_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.delta)(x)
    }
}

/// Least-squares recovery of the matched regressor `phi` with
/// `B(x) phi^T = (Delta(x) - Delta(x_d))^T`; residual above `tol` signals a
/// violated span condition.
pub fn matched_phi(
    sys: &AffineUncertainSystem,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    tol: f64,
) -> Result<DMatrix<f64>, DynamicsError> {
    let phi = matched_phi_lstsq(sys, x, x_d);
    let rhs = (sys.delta_at(x) - sys.delta_at(x_d)).transpose();
    let residual = (sys.base.b_at(x) * phi.transpose() - rhs).norm();
    if residual > tol {
        return Err(DynamicsError::Unmatched { residual, tol });
    }
    Ok(phi)
}

/// Pseudo-inverse route used when the matched condition is only approximate.
pub fn matched_phi_lstsq(
    sys: &AffineUncertainSystem,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
) -> DMatrix<f64> {
    let b = sys.base.b_at(x);
    let rhs = (sys.delta_at(x) - sys.delta_at(x_d)).transpose();
    let pinv = b
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .expect("svd of input matrix");
    // phi^T = B^+ rhs  ->  phi = rhs^T (B^+)^T
    (pinv * rhs).transpose()
}

/// `H(s) sdot + h(s) + Delta(s) theta = tau + d(s)` with nonsingular inertia.
#[derive(Clone)]
pub struct LagrangianSystem {
    pub n: usize,
    pub p: usize,
    pub h_mat: MatrixFn,
    pub h_vec: StateFn,
    pub delta: MatrixFn,
    pub delta_bar: f64,
    pub d_s_bar: f64,
    /// Declared cap on the inertia condition number over the domain.
    pub cond_cap: f64,
    pub domain: DomainBox,
}

impl LagrangianSystem {
    pub fn inertia_inverse(&self, s: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let h = (self.h_mat)(s);
        let det = h.determinant();
        if det.abs() < 1e-12 {
            return Err(DynamicsError::SingularMass { det });
        }
        Ok(h.try_inverse().ok_or(DynamicsError::SingularMass { det })?)
    }

    /// View `sdot = -H^-1 h + H^-1 tau` as a control-affine system for metric
    /// synthesis.
    pub fn system_view(&self, bounds: SystemBounds) -> SystemModel {
        let h_mat = self.h_mat.clone();
        let h_vec = self.h_vec.clone();
        let f: StateFn = Arc::new(move |s| {
            let hinv = h_mat(s).try_inverse().expect("nonsingular inertia");
            -(&hinv * h_vec(s))
        });
        let h_mat2 = self.h_mat.clone();
        let b: MatrixFn =
            Arc::new(move |s| h_mat2(s).try_inverse().expect("nonsingular inertia"));
        SystemModel::new(self.n, self.n, f, b, bounds, self.domain.clone())
    }
}

/// Basis-function model `xdot ~= F phi(x) + sum_i B_i varphi_i(x) u_i` with
/// current weight estimates.
#[derive(Clone)]
pub struct BasisFunctionModel {
    pub n: usize,
    pub m: usize,
    /// `n x p` weight estimate for the drift.
    pub f_hat: DMatrix<f64>,
    /// Per-channel `n x q` weight estimates.
    pub b_hat: Vec<DMatrix<f64>>,
    pub phi: StateFn,
    pub varphi: Vec<StateFn>,
    pub zeta_bar: f64,
    /// Declared single-point modeling-error bound (the difference bound used
    /// in certificates is twice this).
    pub d_m_bar: f64,
}

impl BasisFunctionModel {
    pub fn f_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f_hat * (self.phi)(x)
    }

    pub fn b_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n, self.m);
        for i in 0..self.m {
            b.set_column(i, &(&self.b_hat[i] * (self.varphi[i])(x)));
        }
        b
    }

    /// Frozen-weight view as a control-affine system.
    pub fn system_view(&self, bounds: SystemBounds, domain: DomainBox) -> SystemModel {
        let me = self.clone();
        let f: StateFn = Arc::new(move |x| me.f_vec(x));
        let me2 = self.clone();
        let b: MatrixFn = Arc::new(move |x| me2.b_matrix(x));
        SystemModel::new(self.n, self.m, f, b, bounds, domain)
    }
}

/// Estimate-side model derivative `F_hat phi(x) + sum_i B_hat_i varphi_i(x) u_i`.
pub fn basis_model_eval(bm: &BasisFunctionModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    assert_eq!(u.len(), bm.m);
    bm.f_vec(x) + bm.b_matrix(x) * u
}
