//! Log-det barrier solver with a max-margin phase I and backtracking Newton.
//!
//! Phase I minimizes the margin `s` subject to `G_j(z) <= s I`; if the best
//! margin stays above `-tol` the problem is declared infeasible. Phase II
//! follows the central path with the schedule `mu <- mu / 10` from `mu = 1`
//! until the barrier duality gap is below `tol`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::jacobi::max_eig;
use super::{Assignment, ConstraintBlock, LmiError, LmiProblem, SdpSolution, SdpStatus, VarKind};

const NEWTON_EPS: f64 = 1e-7;
const MAX_INNER: usize = 80;

struct Core {
    n: usize,
    c: DVector<f64>,
    blocks: Vec<ConstraintBlock>,
    /// Per-block list of components with a nonzero coefficient.
    active: Vec<Vec<usize>>,
    /// Components kept strictly positive by a `-log z` term.
    positive: Vec<usize>,
    /// Total barrier degree: sum of block dims plus positivity terms.
    m_total: f64,
}

impl Core {
    fn new(n: usize, c: DVector<f64>, blocks: Vec<ConstraintBlock>, positive: Vec<usize>) -> Self {
        let dims_total: usize = blocks.iter().map(|b| b.dim).sum();
        let m_total = (dims_total + positive.len()) as f64;
        let active = blocks
            .iter()
            .map(|b| (0..n).filter(|&a| b.coeffs[a].is_some()).collect())
            .collect();
        Core {
            n,
            c,
            blocks,
            active,
            positive,
            m_total,
        }
    }
}

impl Core {
    fn eval_slacks(&self, z: &DVector<f64>) -> Option<Vec<Cholesky<f64, Dyn>>> {
        for &a in &self.positive {
            if z[a] <= 0.0 {
                return None;
            }
        }
        let mut slacks = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let mut s = -&b.f0;
            let s_slice = s.as_mut_slice();
            for &a in &self.active[bi] {
                let za = z[a];
                let fa = b.coeffs[a].as_ref().unwrap().as_slice();
                for (si, fi) in s_slice.iter_mut().zip(fa) {
                    *si -= fi * za;
                }
            }
            slacks.push(Cholesky::new(s)?);
        }
        Some(slacks)
    }

    fn barrier_phi(&self, z: &DVector<f64>, slacks: &[Cholesky<f64, Dyn>]) -> f64 {
        let mut phi = 0.0;
        for chol in slacks {
            let mut logdet = 0.0;
            for i in 0..chol.l().nrows() {
                logdet += chol.l()[(i, i)].ln();
            }
            phi -= 2.0 * logdet;
        }
        for &a in &self.positive {
            phi -= z[a].ln();
        }
        phi
    }

    fn grad_hess(
        &self,
        t: f64,
        z: &DVector<f64>,
        slacks: &[Cholesky<f64, Dyn>],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut g = &self.c * t;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (bi, (b, chol)) in self.blocks.iter().zip(slacks).enumerate() {
            let sinv = chol.inverse();
            let active = &self.active[bi];
            let d = b.dim;
            let prods: Vec<DMatrix<f64>> = active
                .iter()
                .map(|&a| &sinv * b.coeffs[a].as_ref().unwrap())
                .collect();
            for (ia, &a) in active.iter().enumerate() {
                g[a] += prods[ia].trace();
                let pa = prods[ia].as_slice();
                for (ib, &bcomp) in active.iter().enumerate().skip(ia) {
                    // tr(P_a P_b); column-major storage, so P_b's transpose
                    // walk is a row walk over the slice.
                    let pb = prods[ib].as_slice();
                    let mut tr = 0.0;
                    for i in 0..d {
                        let arow = i * d;
                        for j in 0..d {
                            tr += pa[arow + j] * pb[j * d + i];
                        }
                    }
                    h[(a, bcomp)] += tr;
                    if a != bcomp {
                        h[(bcomp, a)] += tr;
                    }
                }
            }
        }
        for &a in &self.positive {
            g[a] -= 1.0 / z[a];
            h[(a, a)] += 1.0 / (z[a] * z[a]);
        }
        (g, h)
    }

    /// Newton descent at fixed barrier weight `t`. Returns the Newton
    /// iteration count; `None` from `watch` stops early.
    fn center(
        &self,
        t: f64,
        z: &mut DVector<f64>,
        iters_left: &mut usize,
        watch: &mut dyn FnMut(&DVector<f64>) -> bool,
    ) -> bool {
        let debug = std::env::var_os("ANCM_SDP_DEBUG").is_some();
        let mut used = 0usize;
        let mut last_alpha = 1.0f64;
        let mut last_dec = f64::NAN;
        for _ in 0..MAX_INNER {
            used += 1;
            if *iters_left == 0 {
                return false;
            }
            *iters_left -= 1;
            let slacks = self
                .eval_slacks(z)
                .expect("iterate left the barrier domain");
            let (g, h) = self.grad_hess(t, z, &slacks);

            // Jacobi equilibration keeps the Newton solve well-posed when
            // variable scales span many decades.
            let d = DVector::from_fn(self.n, |i, _| 1.0 / h[(i, i)].abs().max(1e-300).sqrt());
            let mut hs = h.clone();
            for i in 0..self.n {
                for j in 0..self.n {
                    hs[(i, j)] *= d[i] * d[j];
                }
            }
            let gs = g.component_mul(&d);
            let mut ridge = 0.0;
            let step = loop {
                let mut hr = hs.clone();
                if ridge > 0.0 {
                    for i in 0..self.n {
                        hr[(i, i)] += ridge;
                    }
                }
                match Cholesky::new(hr) {
                    Some(ch) => {
                        let ds = ch.solve(&(-&gs));
                        break ds.component_mul(&d);
                    }
                    None => {
                        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
                        if ridge > 1e6 {
                            return true; // hopeless curvature; treat as stalled
                        }
                    }
                }
            };

            let decrement = -g.dot(&step);
            last_dec = decrement;
            if decrement <= NEWTON_EPS {
                if debug {
                    eprintln!("  t={t:.2e} converged iters={used} dec={decrement:.2e}");
                }
                return true;
            }

            // The objective change is evaluated as t * c . (alpha * step)
            // plus the phi difference; forming t * c . z directly would lose
            // the decrease to cancellation once t is large.
            let phi0 = self.barrier_phi(z, &slacks);
            let c_step = self.c.dot(&step);
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1e-13 {
                let zc = &*z + &step * alpha;
                if let Some(sl) = self.eval_slacks(&zc) {
                    let df = t * c_step * alpha + (self.barrier_phi(&zc, &sl) - phi0);
                    if df <= -0.25 * alpha * decrement {
                        *z = zc;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            last_alpha = alpha;
            if accepted && alpha < 1e-9 {
                // progress per step is negligible; the iterate is as central
                // as the arithmetic allows
                if debug {
                    eprintln!("  t={t:.2e} tiny-step iters={used} dec={decrement:.2e}");
                }
                return true;
            }
            if !accepted {
                if debug {
                    eprintln!("  t={t:.2e} stalled iters={used} dec={decrement:.2e}");
                }
                return true; // no progress possible at this scale
            }
            if !watch(z) {
                return true;
            }
        }
        if debug {
            eprintln!(
                "  t={t:.2e} MAX_INNER iters={used} dec={last_dec:.2e} alpha={last_alpha:.2e}"
            );
        }
        true
    }
}

fn positive_components(kinds: &[VarKind]) -> Vec<usize> {
    let mut at = 0;
    let mut out = Vec::new();
    for k in kinds {
        if matches!(k, VarKind::Scalar) {
            out.push(at);
        }
        at += k.n_components();
    }
    out
}

fn worst_margin(problem: &LmiProblem, z: &DVector<f64>) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for j in 0..problem.n_blocks() {
        let g = problem.eval_block(j, z);
        worst = worst.max(max_eig(&g).expect("blocks symmetric"));
    }
    worst
}

/// Solves the semidefinite program by the two-phase barrier method.
///
/// `status = Optimal` implies primal feasibility with worst constraint
/// eigenvalue `<= 1e-7` and objective within the barrier gap `tol` of the
/// optimum. An exhausted Newton budget returns [`LmiError::MaxIterations`]
/// with the best iterate attached.
pub fn solve_sdp(
    problem: &LmiProblem,
    tol: f64,
    max_iter: usize,
) -> Result<SdpSolution, LmiError> {
    solve_sdp_warm(problem, None, tol, max_iter)
}

/// [`solve_sdp`] with an initial guess. A strictly feasible guess skips
/// phase I entirely.
pub fn solve_sdp_warm(
    problem: &LmiProblem,
    init: Option<&Assignment>,
    tol: f64,
    max_iter: usize,
) -> Result<SdpSolution, LmiError> {
    assert!(tol > 0.0, "tol must be positive");
    assert!(
        problem.n_blocks() > 0,
        "problem must have at least one constraint"
    );
    let n = problem.n_components();
    let kinds = problem.kinds().to_vec();
    let positive = positive_components(&kinds);
    let c = DVector::from_column_slice(problem.objective_vector());

    // Initial point: provided guess, else matrices at zero and scalars at one.
    let mut z0 = match init {
        Some(a) => {
            let z = a.flatten();
            assert_eq!(z.len(), n, "warm start dimensionally inconsistent");
            z
        }
        None => {
            let mut z = DVector::<f64>::zeros(n);
            for &a in &positive {
                z[a] = 1.0;
            }
            z
        }
    };

    let mut iters_left = max_iter;

    let core2 = Core::new(n, c.clone(), problem.blocks().to_vec(), positive.clone());

    // Phase I: minimize s subject to G_j(z) - s I <= 0, skipped when the
    // start is already strictly feasible.
    let mut warm_feasible = init.is_some();
    if core2.eval_slacks(&z0).is_none() {
        warm_feasible = false;
        let mut phase1_blocks: Vec<ConstraintBlock> = problem.blocks().to_vec();
        for b in &mut phase1_blocks {
            let mut coeffs = std::mem::take(&mut b.coeffs);
            coeffs.push(Some(-DMatrix::<f64>::identity(b.dim, b.dim)));
            b.coeffs = coeffs;
        }
        let mut c1 = DVector::<f64>::zeros(n + 1);
        c1[n] = 1.0;
        let core1 = Core::new(n + 1, c1, phase1_blocks, positive.clone());

        for &a in &positive {
            if z0[a] <= 0.0 {
                z0[a] = 1.0;
            }
        }
        let s0 = worst_margin(problem, &z0) + 1.0;
        let mut z1 = DVector::<f64>::zeros(n + 1);
        z1.rows_mut(0, n).copy_from(&z0);
        z1[n] = s0;

        // Exit at the first iterate that is strictly feasible for the
        // original problem; lingering in phase I lets objective-free
        // directions wander to absurd scales.
        let feasible_exit = (-1e-6f64).min(-tol);
        let mut t = 1.0;
        let mut found: Option<DVector<f64>> = None;
        loop {
            let mut done = false;
            core1.center(t, &mut z1, &mut iters_left, &mut |w| {
                if w[w.len() - 1] < feasible_exit {
                    done = true;
                    return false;
                }
                let cand = w.rows(0, n).into_owned();
                if core2.eval_slacks(&cand).is_some() {
                    found = Some(cand);
                    done = true;
                    return false;
                }
                true
            });
            if done || core1.m_total / t <= tol {
                break;
            }
            if iters_left == 0 {
                break;
            }
            t *= 10.0;
        }

        let margin = z1[n];
        let found_early = found.is_some();
        let z_feas = found.unwrap_or_else(|| z1.rows(0, n).into_owned());
        if !found_early && margin > -tol {
            let values = Assignment::from_flat(&kinds, &z_feas);
            return Ok(SdpSolution {
                objective: c.dot(&z_feas),
                worst_margin: worst_margin(problem, &z_feas),
                values,
                status: SdpStatus::Infeasible,
                newton_iters: max_iter - iters_left,
                central_seed: None,
            });
        }
        z0 = z_feas;
    }

    // Phase II: follow the central path on the original problem.
    let mut z = z0;
    debug_assert!(core2.eval_slacks(&z).is_some());

    // A strictly feasible warm start can resume the path near its own
    // centrality level, read off the barrier gradient.
    let mut t = 1.0;
    if warm_feasible {
        let slacks = core2.eval_slacks(&z).expect("checked feasible");
        let (gphi, _) = core2.grad_hess(0.0, &z, &slacks);
        let cc = c.dot(&c);
        if cc > 0.0 {
            let t_implied = -(c.dot(&gphi)) / cc;
            if t_implied.is_finite() && t_implied > 1.0 {
                t = t_implied.min(core2.m_total / tol);
            }
        }
    }
    let mut central_seed: Option<Assignment> = None;
    loop {
        core2.center(t, &mut z, &mut iters_left, &mut |_| true);
        if central_seed.is_none() && core2.m_total / t <= 1e-3 {
            central_seed = Some(Assignment::from_flat(&kinds, &z));
        }
        if core2.m_total / t <= tol {
            break;
        }
        if iters_left == 0 {
            let best = SdpSolution {
                objective: c.dot(&z),
                worst_margin: worst_margin(problem, &z),
                values: Assignment::from_flat(&kinds, &z),
                status: SdpStatus::MaxIter,
                newton_iters: max_iter,
                central_seed,
            };
            return Err(LmiError::MaxIterations {
                max_iter,
                best: Box::new(best),
            });
        }
        t *= 10.0;
    }

    let wm = worst_margin(problem, &z);
    Ok(SdpSolution {
        objective: c.dot(&z),
        worst_margin: wm,
        values: Assignment::from_flat(&kinds, &z),
        status: if wm <= 1e-7 {
            SdpStatus::Optimal
        } else {
            SdpStatus::MaxIter
        },
        newton_iters: max_iter - iters_left,
        central_seed,
    })
}
