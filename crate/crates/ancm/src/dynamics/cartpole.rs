//! Cart-pole benchmark: an under-actuated cart with a hinged pole, state
//! `x = [p, theta, pdot, thetadot]`, force input on the cart.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{
    AffineUncertainSystem, DomainBox, DynamicsError, MatrixFn, ParametricSystem, StateFn,
    SystemBounds, SystemModel,
};

/// Physical parameters, SI units.
#[derive(Debug, Clone, Copy)]
pub struct CartPole {
    pub g: f64,
    pub m_c: f64,
    pub m: f64,
    pub mu_c: f64,
    pub mu_p: f64,
    pub l: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole {
            g: 9.8,
            m_c: 1.0,
            m: 0.1,
            mu_c: 0.5,
            mu_p: 0.002,
            l: 0.5,
        }
    }
}

impl CartPole {
    pub fn new(g: f64, m_c: f64, m: f64, mu_c: f64, mu_p: f64, l: f64) -> Self {
        assert!(m_c > 0.0 && m > 0.0 && l > 0.0, "masses and length positive");
        CartPole {
            g,
            m_c,
            m,
            mu_c,
            mu_p,
            l,
        }
    }

    pub fn with_drags(&self, mu_c: f64, mu_p: f64) -> Self {
        CartPole {
            mu_c,
            mu_p,
            ..*self
        }
    }

    /// 2x2 generalized mass matrix in `(pddot, thetaddot)` coordinates.
    fn mass_entries(&self, theta: f64) -> (f64, f64, f64) {
        let m11 = self.m_c + self.m;
        let m12 = self.m * self.l * theta.cos();
        let m22 = 4.0 / 3.0 * self.m * self.l * self.l;
        (m11, m12, m22)
    }

    fn solve_accelerations(
        &self,
        theta: f64,
        r1: f64,
        r2: f64,
    ) -> Result<(f64, f64), DynamicsError> {
        let (m11, m12, m22) = self.mass_entries(theta);
        let det = m11 * m22 - m12 * m12;
        if det.abs() < 1e-12 {
            return Err(DynamicsError::SingularMass { det });
        }
        Ok(((r1 * m22 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det))
    }

    /// Full dynamics `xdot = f(x) + b(x) u` with the configured drags.
    pub fn eval(&self, x: &DVector<f64>, u: f64) -> Result<DVector<f64>, DynamicsError> {
        assert_eq!(x.len(), 4);
        let (theta, pdot, thetadot) = (x[1], x[2], x[3]);
        let r1 = self.m * self.l * thetadot * thetadot * theta.sin() - self.mu_c * pdot + u;
        let r2 = self.m * self.l * self.g * theta.sin() - self.mu_p * thetadot;
        let (pddot, thetaddot) = self.solve_accelerations(theta, r1, r2)?;
        Ok(DVector::from_column_slice(&[
            pdot, thetadot, pddot, thetaddot,
        ]))
    }

    /// Drag-free drift `f(x, 0)`.
    pub fn drift_drag_free(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.with_drags(0.0, 0.0).eval(x, 0.0)
    }

    /// Input column `b(x) = d xdot / d u`.
    pub fn input_column(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let (pddot, thetaddot) = self.solve_accelerations(x[1], 1.0, 0.0)?;
        Ok(DVector::from_column_slice(&[0.0, 0.0, pddot, thetaddot]))
    }

    /// Drag regressor: `f(x, theta) = f(x, 0) + Y_f(x) theta` for
    /// `theta = (mu_c, mu_p)`.
    pub fn regressors(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>), DynamicsError> {
        let (pdot, thetadot) = (x[2], x[3]);
        let (c1p, c1t) = self.solve_accelerations(x[1], -pdot, 0.0)?;
        let (c2p, c2t) = self.solve_accelerations(x[1], 0.0, -thetadot)?;
        let mut y = DMatrix::zeros(4, 2);
        y[(2, 0)] = c1p;
        y[(3, 0)] = c1t;
        y[(2, 1)] = c2p;
        y[(3, 1)] = c2t;
        Ok((y, DVector::from_column_slice(&[self.mu_c, self.mu_p])))
    }

    /// Total mechanical energy (kinetic plus pole potential).
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let (theta, pdot, thetadot) = (x[1], x[2], x[3]);
        0.5 * (self.m_c + self.m) * pdot * pdot
            + self.m * self.l * theta.cos() * pdot * thetadot
            + 2.0 / 3.0 * self.m * self.l * self.l * thetadot * thetadot
            + self.m * self.g * self.l * theta.cos()
    }

    /// Benchmark domain: cart position, pole angle, and both rates.
    pub fn default_domain() -> DomainBox {
        DomainBox::symmetric(&[1.5, 0.9, 2.0, 2.0])
    }

    pub fn default_bounds() -> SystemBounds {
        SystemBounds {
            b_bar: 1.8,
            rho_bar: 1.0,
            d_bar: 0.15,
        }
    }

    /// Control-affine view with the configured drags.
    pub fn system_model(&self, bounds: SystemBounds, domain: DomainBox) -> SystemModel {
        let cp = *self;
        let f: StateFn = Arc::new(move |x| cp.eval(x, 0.0).expect("nonsingular mass"));
        let cp2 = *self;
        let b: MatrixFn = Arc::new(move |x| {
            DMatrix::from_column_slice(4, 1, cp2.input_column(x).expect("nonsingular mass").as_slice())
        });
        SystemModel::new(4, 1, f, b, bounds, domain)
    }

    /// Multiplicatively separable form for the unknown-drag scenario, already
    /// in augmented coordinates: the parameter is `(mu_c, mu_p, c)` where `c`
    /// weights the drag-free drift column (true value 1), so all regressors
    /// act linearly on the parameter.
    pub fn parametric(&self, bounds: SystemBounds, domain: DomainBox) -> ParametricSystem {
        let cp = *self;
        let y_f: MatrixFn = Arc::new(move |x| {
            let (y_drag, _) = cp.regressors(x).expect("nonsingular mass");
            let f0 = cp.drift_drag_free(x).expect("nonsingular mass");
            let mut y = DMatrix::zeros(4, 3);
            y.view_mut((0, 0), (4, 2)).copy_from(&y_drag);
            y.set_column(2, &f0);
            y
        });
        let cp2 = *self;
        let y_b: Vec<MatrixFn> = vec![Arc::new(move |x: &DVector<f64>| {
            let bcol = cp2.input_column(x).expect("nonsingular mass");
            let mut y = DMatrix::zeros(4, 3);
            y.set_column(2, &bcol);
            y
        })];
        ParametricSystem {
            base: self.system_model(bounds, domain),
            y_f,
            y_b,
            z_map: Arc::new(|t: &DVector<f64>| t.clone()),
            p: 3,
            q_z: 3,
            augmented: true,
            theta_nominal: DVector::from_column_slice(&[self.mu_c, self.mu_p, 1.0]),
        }
    }

    /// Affine-uncertainty form for the Theorem-2 route: the nominal system is
    /// drag-free and `Delta(x)^T theta = -Y_drag(x) theta` carries the drags.
    pub fn affine_uncertain(&self, bounds: SystemBounds, domain: DomainBox) -> AffineUncertainSystem {
        let nominal = self.with_drags(0.0, 0.0);
        let cp = *self;
        AffineUncertainSystem {
            base: nominal.system_model(bounds, domain),
            delta: Arc::new(move |x: &DVector<f64>| {
                let (y_drag, _) = cp.regressors(x).expect("nonsingular mass");
                (-y_drag).transpose()
            }),
            p: 2,
            theta_bar: 0.6,
            phi_bar: 10.0,
        }
    }
}
