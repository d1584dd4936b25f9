//! Samples optimal contraction metrics over a state grid by solving the
//! convex programs, producing training data for the metric network.
//!
//! Each sample minimizes `d_bar * chi / alpha` over `(W_bar, nu, chi)` with
//! `2 sym(A W_bar) - 2 nu B R^-1 B^T <= -2 alpha W_bar` and
//! `I <= W_bar <= chi I`. The optimal face leaves `nu` free, so a second
//! solve minimizes `nu` at the optimal `chi`; this picks the least-aggressive
//! metric deterministically, which keeps the regression targets smooth.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{sdc_matrix, DomainBox, DynamicsError, ParametricSystem, SystemModel};
use crate::lmi::{
    check_lmi, solve_sdp, solve_sdp_warm, Assignment, LmiError, LmiProblem, SdpStatus, VarId,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("contraction program infeasible (best margin {margin:.3e})")]
    Infeasible { margin: f64 },
    #[error("every grid point was infeasible")]
    EmptyDataset,
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    /// One constant `W_bar` shared by every grid point; its time derivative
    /// vanishes exactly and the input-direction killing conditions hold for
    /// free.
    Uniform,
    /// Independent per-sample `W_bar`; the dropped derivative term is
    /// absorbed by the extra rate margin.
    QuasiStatic,
}

/// Sample lattice over state, target, and (optionally) parameter-estimate
/// boxes. Point counts are per axis; totals are the per-factor products.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub x_box: DomainBox,
    pub x_counts: Vec<usize>,
    pub xd_box: DomainBox,
    pub xd_counts: Vec<usize>,
    pub th_box: Option<DomainBox>,
    pub th_counts: Vec<usize>,
}

impl GridSpec {
    pub fn n_points(&self) -> usize {
        let x: usize = self.x_counts.iter().product();
        let xd: usize = self.xd_counts.iter().product();
        let th: usize = if self.th_box.is_some() {
            self.th_counts.iter().product()
        } else {
            1
        };
        x * xd * th
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Design contraction rate.
    pub alpha: f64,
    /// Constant input weight `R` (symmetric positive definite).
    pub r_weight: DMatrix<f64>,
    pub grid: GridSpec,
    pub mode: SynthesisMode,
    /// Extra rate absorbed into `alpha` in quasi-static mode.
    pub margin: f64,
    /// Disturbance bound entering the objective.
    pub d_bar: f64,
    /// Constant target input used in the SDC factorization while sampling.
    pub u_d: DVector<f64>,
    pub quad_order: usize,
    pub sdp_tol: f64,
    pub sdp_max_iter: usize,
    /// Numerical cap keeping the barrier bounded in the free `nu` direction.
    /// Since `M <= nu I`, this also caps the metric norm and with it the
    /// feedback gain scale.
    pub nu_cap: f64,
    /// Structural bound keeping `chi` finite during phase I.
    pub chi_cap: f64,
}

impl SynthesisConfig {
    pub fn new(alpha: f64, r_weight: DMatrix<f64>, grid: GridSpec, d_bar: f64) -> Self {
        assert!(alpha > 0.0);
        let m = r_weight.nrows();
        SynthesisConfig {
            alpha,
            r_weight,
            grid,
            mode: SynthesisMode::QuasiStatic,
            margin: 0.0,
            d_bar,
            u_d: DVector::zeros(m),
            quad_order: 8,
            // Margins at the barrier's analytic center run several orders
            // below the gap, so 1e-5 still re-verifies at 1e-7 comfortably.
            sdp_tol: 1e-5,
            sdp_max_iter: 4000,
            nu_cap: 1000.0,
            chi_cap: 2e4,
        }
    }

    pub(crate) fn rate(&self) -> f64 {
        match self.mode {
            SynthesisMode::Uniform => self.alpha,
            SynthesisMode::QuasiStatic => self.alpha + self.margin,
        }
    }
}

/// One synthesized metric point. `M = nu * W_bar^-1`, bounded as
/// `(chi/nu)^-1 I <= M <= nu I`.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub x: DVector<f64>,
    pub x_d: DVector<f64>,
    pub theta_hat: Option<DVector<f64>>,
    pub w_bar: DMatrix<f64>,
    pub nu: f64,
    pub chi: f64,
    /// Worst eigenvalue per constraint block, from the independent
    /// eigen-checker.
    pub margins: Vec<f64>,
    /// `d_bar * chi / alpha`.
    pub objective: f64,
}

impl MetricSample {
    pub fn metric(&self) -> DMatrix<f64> {
        self.w_bar
            .clone()
            .try_inverse()
            .expect("W_bar >= I is invertible")
            * self.nu
    }

    pub fn omega_lower(&self) -> f64 {
        1.0 / self.nu
    }

    pub fn omega_upper(&self) -> f64 {
        self.chi / self.nu
    }

    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

struct SampleVars {
    w: VarId,
    nu: VarId,
    chi: Option<VarId>,
}

/// Adds the per-point constraint blocks for `(A, B)` to `problem`. With
/// `chi_fixed` the upper bound uses the constant instead of a variable.
fn add_point_blocks(
    problem: &mut LmiProblem,
    vars: &SampleVars,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    rate: f64,
    chi_fixed: Option<f64>,
    tag: &str,
) -> Result<(), LmiError> {
    let n = a.nrows();
    let brb = b * r_inv * b.transpose();
    let a = a.clone();
    let w = vars.w;
    let nu = vars.nu;
    problem.add_constraint(n, &format!("contraction{tag}"), move |v| {
        let wm = v.matrix(w);
        let aw = &a * &wm;
        (&aw + aw.transpose()) - &brb * (2.0 * v.scalar(nu)) + wm * (2.0 * rate)
    })?;
    problem.add_constraint(n, &format!("w_lower{tag}"), move |v| {
        DMatrix::identity(n, n) - v.matrix(w)
    })?;
    match (vars.chi, chi_fixed) {
        (Some(chi), None) => {
            problem.add_constraint(n, &format!("w_upper{tag}"), move |v| {
                v.matrix(w) - DMatrix::identity(n, n) * v.scalar(chi)
            })?;
        }
        (None, Some(cfix)) => {
            problem.add_constraint(n, &format!("w_upper{tag}"), move |v| {
                v.matrix(w) - DMatrix::identity(n, n) * cfix
            })?;
        }
        _ => unreachable!("exactly one of chi variable / fixed value"),
    }
    Ok(())
}

fn add_scalar_caps(
    problem: &mut LmiProblem,
    nu: VarId,
    nu_cap: f64,
    chi: Option<(VarId, f64)>,
) -> Result<(), LmiError> {
    // Strict nu > 0 realised as nu >= 1e-6; the caps keep the barrier
    // bounded along directions the objective does not pin.
    problem.add_constraint(1, "nu_floor", move |v| {
        DMatrix::from_element(1, 1, 1e-6 - v.scalar(nu))
    })?;
    problem.add_constraint(1, "nu_cap", move |v| {
        DMatrix::from_element(1, 1, v.scalar(nu) - nu_cap)
    })?;
    if let Some((chi, cap)) = chi {
        problem.add_constraint(1, "chi_cap", move |v| {
            DMatrix::from_element(1, 1, v.scalar(chi) - cap)
        })?;
    }
    Ok(())
}

/// Mid-path interior iterates from a previous sample's two solves; warm
/// starts for trajectory-following evaluation at nearby states.
#[derive(Debug, Clone)]
pub struct MetricWarmStart {
    stage1: Assignment,
    stage2: Assignment,
}

/// Solves the two-stage program for a batch of `(A, B)` blocks sharing one
/// `(W_bar, nu, chi)`. Returns `(w_bar, nu, chi)` plus warm-start seeds when
/// both stages passed through the path interior.
fn solve_shared(
    cfg: &SynthesisConfig,
    n: usize,
    pairs: &[(DMatrix<f64>, DMatrix<f64>)],
    warm: Option<&MetricWarmStart>,
) -> Result<(DMatrix<f64>, f64, f64, Option<MetricWarmStart>), SynthesisError> {
    let r_inv = cfg
        .r_weight
        .clone()
        .try_inverse()
        .expect("R is positive definite");

    // Stage 1: minimize d_bar * chi / alpha.
    let mut p1 = LmiProblem::new();
    let w = p1.add_sym_var(n);
    let nu = p1.add_scalar_var();
    let chi = p1.add_scalar_var();
    p1.objective_scalar(chi, cfg.d_bar / cfg.alpha);
    let vars = SampleVars {
        w,
        nu,
        chi: Some(chi),
    };
    for (idx, (a, b)) in pairs.iter().enumerate() {
        add_point_blocks(&mut p1, &vars, a, b, &r_inv, cfg.rate(), None, &format!("[{idx}]"))?;
    }
    add_scalar_caps(&mut p1, nu, cfg.nu_cap, Some((chi, cfg.chi_cap)))?;
    // Stage 1 only needs chi to modest accuracy; the final margins come
    // from stage 2.
    let tol1 = cfg.sdp_tol.max(1e-5);
    let sol1 = solve_sdp_warm(
        &p1,
        warm.map(|w| &w.stage1),
        tol1,
        cfg.sdp_max_iter,
    )?;
    if sol1.status == SdpStatus::Infeasible {
        return Err(SynthesisError::Infeasible {
            margin: sol1.worst_margin,
        });
    }
    let chi_star = sol1.values.scalar(chi);

    // Stage 2: pin chi just above the optimum and take the smallest nu on
    // that face, starting from the stage-1 point (feasible by construction).
    // The relative slack keeps the stage-2 set fat enough for phase I to
    // certify feasibility.
    let chi_fix = chi_star * (1.0 + 1e-4) + 1e-9;
    let mut p2 = LmiProblem::new();
    let w2 = p2.add_sym_var(n);
    let nu2 = p2.add_scalar_var();
    p2.objective_scalar(nu2, 1.0);
    let vars2 = SampleVars {
        w: w2,
        nu: nu2,
        chi: None,
    };
    for (idx, (a, b)) in pairs.iter().enumerate() {
        add_point_blocks(
            &mut p2,
            &vars2,
            a,
            b,
            &r_inv,
            cfg.rate(),
            Some(chi_fix),
            &format!("[{idx}]"),
        )?;
    }
    add_scalar_caps(&mut p2, nu2, cfg.nu_cap, None)?;
    let init2 = match warm {
        Some(w) => w.stage2.clone(),
        None => {
            let mut a = p2.zero_assignment();
            a.set_matrix(w2, &sol1.values.matrix(w));
            a.set_scalar(nu2, sol1.values.scalar(nu));
            a
        }
    };
    let sol2 = solve_sdp_warm(&p2, Some(&init2), cfg.sdp_tol, cfg.sdp_max_iter)?;
    if sol2.status == SdpStatus::Infeasible {
        // chi_fix sits strictly above a feasible chi; only numerics land here.
        return Err(SynthesisError::Infeasible {
            margin: sol2.worst_margin,
        });
    }
    let seeds = match (sol1.central_seed, sol2.central_seed.clone()) {
        (Some(s1), Some(s2)) => Some(MetricWarmStart {
            stage1: s1,
            stage2: s2,
        }),
        _ => None,
    };
    Ok((
        sol2.values.matrix(w2),
        sol2.values.scalar(nu2),
        chi_fix,
        seeds,
    ))
}

/// Independent re-verification of a candidate `(W_bar, nu, chi)` against the
/// constraint blocks for `(A, B)`, via the Jacobi eigen-checker only.
pub fn verify_sample_blocks(
    cfg: &SynthesisConfig,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w_bar: &DMatrix<f64>,
    nu: f64,
    chi: f64,
) -> Result<Vec<f64>, SynthesisError> {
    let n = a.nrows();
    let r_inv = cfg
        .r_weight
        .clone()
        .try_inverse()
        .expect("R is positive definite");
    let mut p = LmiProblem::new();
    let w = p.add_sym_var(n);
    let nu_v = p.add_scalar_var();
    let chi_v = p.add_scalar_var();
    let vars = SampleVars {
        w,
        nu: nu_v,
        chi: Some(chi_v),
    };
    add_point_blocks(&mut p, &vars, a, b, &r_inv, cfg.rate(), None, "")?;
    let mut cand: Assignment = p.zero_assignment();
    cand.set_matrix(w, w_bar);
    cand.set_scalar(nu_v, nu);
    cand.set_scalar(chi_v, chi);
    Ok(check_lmi(&p, &cand, 0.0).worst_eigs)
}

fn sample_core(
    sys: &SystemModel,
    cfg: &SynthesisConfig,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    theta_hat: Option<DVector<f64>>,
    warm: Option<&mut Option<MetricWarmStart>>,
) -> Result<MetricSample, SynthesisError> {
    let a = sdc_matrix(sys, x, x_d, &cfg.u_d, cfg.quad_order)?;
    let b = sys.b_at(x);
    let prior = warm.as_ref().and_then(|w| w.as_ref().cloned());
    let (w_bar, nu, chi, seeds) = solve_shared(cfg, sys.n, &[(a.clone(), b.clone())], prior.as_ref())?;
    if let Some(slot) = warm {
        if seeds.is_some() {
            *slot = seeds;
        }
    }
    let margins = verify_sample_blocks(cfg, &a, &b, &w_bar, nu, chi)?;
    Ok(MetricSample {
        x: x.clone(),
        x_d: x_d.clone(),
        theta_hat,
        w_bar,
        nu,
        chi,
        margins,
        objective: cfg.d_bar * chi / cfg.alpha,
    })
}

/// Optimal metric sample for a plain control-affine system at `(x, x_d)`.
pub fn sample_ncm_metric(
    sys: &SystemModel,
    cfg: &SynthesisConfig,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
) -> Result<MetricSample, SynthesisError> {
    sample_core(sys, cfg, x, x_d, None, None)
}

/// As [`sample_ncm_metric`] with a reusable warm-start slot for
/// trajectory-following evaluation.
pub fn sample_ncm_metric_warm(
    sys: &SystemModel,
    cfg: &SynthesisConfig,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    warm: &mut Option<MetricWarmStart>,
) -> Result<MetricSample, SynthesisError> {
    sample_core(sys, cfg, x, x_d, None, Some(warm))
}

/// Optimal metric sample with the dynamics frozen at the current parameter
/// estimate.
pub fn sample_ancm_metric(
    psys: &ParametricSystem,
    cfg: &SynthesisConfig,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    theta_hat: &DVector<f64>,
) -> Result<MetricSample, SynthesisError> {
    let sys = psys.system_at(theta_hat);
    sample_core(&sys, cfg, x, x_d, Some(theta_hat.clone()), None)
}

/// As [`sample_ancm_metric`] with a reusable warm-start slot for
/// trajectory-following exact-metric evaluation.
pub fn sample_ancm_metric_warm(
    psys: &ParametricSystem,
    cfg: &SynthesisConfig,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    theta_hat: &DVector<f64>,
    warm: &mut Option<MetricWarmStart>,
) -> Result<MetricSample, SynthesisError> {
    let sys = psys.system_at(theta_hat);
    sample_core(&sys, cfg, x, x_d, Some(theta_hat.clone()), Some(warm))
}

/// Per-call exact metric backed by the solver, for the zero-learning-error
/// control mode. Consecutive evaluations along a trajectory reuse a
/// warm-start slot.
pub struct ExactSdpMetric {
    psys: ParametricSystem,
    cfg: SynthesisConfig,
    warm: std::sync::Mutex<Option<MetricWarmStart>>,
}

impl ExactSdpMetric {
    pub fn new(psys: ParametricSystem, cfg: SynthesisConfig) -> Self {
        ExactSdpMetric {
            psys,
            cfg,
            warm: std::sync::Mutex::new(None),
        }
    }

    pub fn sample(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> Result<MetricSample, SynthesisError> {
        let mut warm = self.warm.lock().unwrap();
        match theta_hat {
            Some(t) => sample_ancm_metric_warm(&self.psys, &self.cfg, x, x_d, t, &mut warm),
            None => sample_ncm_metric_warm(&self.psys.base, &self.cfg, x, x_d, &mut warm),
        }
    }
}

impl crate::control::Metric for ExactSdpMetric {
    fn eval(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> DMatrix<f64> {
        self.sample(x, x_d, theta_hat)
            .expect("exact metric sample must stay feasible along the trajectory")
            .metric()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub feasible: usize,
    pub infeasible: usize,
    /// Uniform lower bound on W over the set: `1 / max nu`.
    pub omega_lower: f64,
    /// Uniform upper bound on W over the set: `max chi / nu`.
    pub omega_upper: f64,
    /// Global condition bound: `max chi`.
    pub chi_max: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<MetricSample>,
    pub summary: DatasetSummary,
}

fn summarize(samples: &[MetricSample], infeasible: usize) -> DatasetSummary {
    let mut nu_max = 0.0f64;
    let mut omega_upper = 0.0f64;
    let mut chi_max = 0.0f64;
    for s in samples {
        nu_max = nu_max.max(s.nu);
        omega_upper = omega_upper.max(s.chi / s.nu);
        chi_max = chi_max.max(s.chi);
    }
    DatasetSummary {
        feasible: samples.len(),
        infeasible,
        omega_lower: if nu_max > 0.0 { 1.0 / nu_max } else { f64::NAN },
        omega_upper,
        chi_max,
    }
}

/// One sample per grid point in deterministic grid order; infeasible points
/// are counted and excluded.
pub fn build_dataset(
    psys: &ParametricSystem,
    cfg: &SynthesisConfig,
) -> Result<Dataset, SynthesisError> {
    let xs = cfg.grid.x_box.lattice(&cfg.grid.x_counts);
    let xds = cfg.grid.xd_box.lattice(&cfg.grid.xd_counts);
    let ths: Vec<Option<DVector<f64>>> = match &cfg.grid.th_box {
        Some(tb) => tb.lattice(&cfg.grid.th_counts).into_iter().map(Some).collect(),
        None => vec![None],
    };

    match cfg.mode {
        SynthesisMode::QuasiStatic => {
            let mut samples = Vec::new();
            let mut infeasible = 0usize;
            for th in &ths {
                for x in &xs {
                    for xd in &xds {
                        let result = match th {
                            Some(t) => sample_ancm_metric(psys, cfg, x, xd, t),
                            None => sample_ncm_metric(&psys.base, cfg, x, xd),
                        };
                        match result {
                            Ok(s) => samples.push(s),
                            Err(SynthesisError::Infeasible { .. }) => infeasible += 1,
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            if samples.is_empty() {
                return Err(SynthesisError::EmptyDataset);
            }
            let summary = summarize(&samples, infeasible);
            Ok(Dataset { samples, summary })
        }
        SynthesisMode::Uniform => {
            // Shared W_bar: collect every point's (A, B) into one program.
            let mut pairs = Vec::new();
            let mut points = Vec::new();
            for th in &ths {
                for x in &xs {
                    for xd in &xds {
                        let sys = match th {
                            Some(t) => psys.system_at(t),
                            None => psys.base.clone(),
                        };
                        let a = sdc_matrix(&sys, x, xd, &cfg.u_d, cfg.quad_order)?;
                        let b = sys.b_at(x);
                        pairs.push((a, b));
                        points.push((x.clone(), xd.clone(), th.clone()));
                    }
                }
            }
            let n = psys.base.n;
            let (w_bar, nu, chi, _) = match solve_shared(cfg, n, &pairs, None) {
                Ok(r) => r,
                Err(SynthesisError::Infeasible { .. }) => {
                    return Err(SynthesisError::EmptyDataset)
                }
                Err(e) => return Err(e),
            };
            let mut samples = Vec::with_capacity(points.len());
            for ((x, xd, th), (a, b)) in points.into_iter().zip(&pairs) {
                let margins = verify_sample_blocks(cfg, a, b, &w_bar, nu, chi)?;
                samples.push(MetricSample {
                    x,
                    x_d: xd,
                    theta_hat: th,
                    w_bar: w_bar.clone(),
                    nu,
                    chi,
                    margins,
                    objective: cfg.d_bar * chi / cfg.alpha,
                });
            }
            let summary = summarize(&samples, 0);
            Ok(Dataset { samples, summary })
        }
    }
}

impl Dataset {
    /// CSV rows `[x.., x_d.., th.., upper triangle of W_bar, nu, chi, margin]`
    /// with a fixed header and 17-significant-digit floats.
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::fmt::Write as _;
        let first = &self.samples[0];
        let n = first.x.len();
        let p = first.theta_hat.as_ref().map_or(0, |t| t.len());
        let mut out = String::new();
        let mut header: Vec<String> = Vec::new();
        for i in 0..n {
            header.push(format!("x{i}"));
        }
        for i in 0..n {
            header.push(format!("xd{i}"));
        }
        for i in 0..p {
            header.push(format!("th{i}"));
        }
        for i in 0..n {
            for j in i..n {
                header.push(format!("w{i}{j}"));
            }
        }
        header.push("nu".into());
        header.push("chi".into());
        header.push("margin".into());
        writeln!(out, "{}", header.join(",")).unwrap();
        for s in &self.samples {
            let mut row: Vec<String> = Vec::new();
            for v in s.x.iter() {
                row.push(format!("{v:.16e}"));
            }
            for v in s.x_d.iter() {
                row.push(format!("{v:.16e}"));
            }
            if let Some(t) = &s.theta_hat {
                for v in t.iter() {
                    row.push(format!("{v:.16e}"));
                }
            }
            for i in 0..n {
                for j in i..n {
                    row.push(format!("{:.16e}", s.w_bar[(i, j)]));
                }
            }
            row.push(format!("{:.16e}", s.nu));
            row.push(format!("{:.16e}", s.chi));
            row.push(format!("{:.16e}", s.worst_margin()));
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        std::fs::write(path, out)
    }

    /// Reads a dataset written by [`Dataset::write_csv`]; `n` and `p` are
    /// recovered from the header.
    pub fn read_csv(path: &std::path::Path) -> std::io::Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "empty csv"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x') && !c.starts_with("xd")).count();
        let p = cols.iter().filter(|c| c.starts_with("th")).count();
        let tri = n * (n + 1) / 2;
        let mut samples = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            let mut at = 0;
            let x = DVector::from_iterator(n, vals[at..at + n].iter().cloned());
            at += n;
            let x_d = DVector::from_iterator(n, vals[at..at + n].iter().cloned());
            at += n;
            let theta_hat = if p > 0 {
                let t = DVector::from_iterator(p, vals[at..at + p].iter().cloned());
                at += p;
                Some(t)
            } else {
                None
            };
            let mut w_bar = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    w_bar[(i, j)] = vals[at];
                    w_bar[(j, i)] = vals[at];
                    at += 1;
                }
            }
            let _ = tri;
            let nu = vals[at];
            let chi = vals[at + 1];
            let margin = vals[at + 2];
            samples.push(MetricSample {
                x,
                x_d,
                theta_hat,
                w_bar,
                nu,
                chi,
                margins: vec![margin],
                objective: f64::NAN,
            });
        }
        let summary = summarize(&samples, 0);
        Ok(Dataset { samples, summary })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CartPole, SystemBounds};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn scalar_system(a: f64, b: f64) -> SystemModel {
        SystemModel::new(
            1,
            1,
            Arc::new(move |x: &DVector<f64>| DVector::from_element(1, a * x[0])),
            Arc::new(move |_: &DVector<f64>| DMatrix::from_element(1, 1, b)),
            SystemBounds {
                b_bar: b.abs().max(1e-9),
                rho_bar: 1.0,
                d_bar: 1.0,
            },
            DomainBox::symmetric(&[1.0]),
        )
    }

    fn scalar_cfg(alpha: f64, r: f64, d_bar: f64) -> SynthesisConfig {
        let grid = GridSpec {
            x_box: DomainBox::symmetric(&[1.0]),
            x_counts: vec![3],
            xd_box: DomainBox::symmetric(&[1.0]),
            xd_counts: vec![3],
            th_box: None,
            th_counts: vec![],
        };
        SynthesisConfig::new(alpha, DMatrix::from_element(1, 1, r), grid, d_bar)
    }

    #[test]
    fn stable_scalar_any_nu() {
        // xdot = -x + u, R = 1, alpha = 0.5, d_bar = 1: W = 1, chi = 1,
        // objective 2; the constraint holds for every nu > 0.
        let sys = scalar_system(-1.0, 1.0);
        let cfg = scalar_cfg(0.5, 1.0, 1.0);
        let x = DVector::from_element(1, 0.3);
        let xd = DVector::from_element(1, -0.2);
        let s = sample_ncm_metric(&sys, &cfg, &x, &xd).unwrap();
        // Tolerances admit the documented 1e-4 relative chi-pin slack.
        assert_abs_diff_eq!(s.w_bar[(0, 0)], 1.0, epsilon = 3e-4);
        assert_abs_diff_eq!(s.chi, 1.0, epsilon = 3e-4);
        assert!(s.nu > 0.0);
        assert_abs_diff_eq!(s.objective, 2.0, epsilon = 1e-3);
        assert!(s.worst_margin() <= 1e-7);
    }

    #[test]
    fn unstable_scalar_nu_at_boundary() {
        // xdot = x + u: feasibility needs nu >= (1 + alpha) W_bar; the
        // nu-minimal stage lands on that boundary with W_bar = chi = 1.
        let sys = scalar_system(1.0, 1.0);
        let cfg = scalar_cfg(0.5, 1.0, 1.0);
        let x = DVector::from_element(1, 0.5);
        let xd = DVector::zeros(1);
        let s = sample_ncm_metric(&sys, &cfg, &x, &xd).unwrap();
        assert_abs_diff_eq!(s.w_bar[(0, 0)], 1.0, epsilon = 3e-4);
        assert_abs_diff_eq!(s.chi, 1.0, epsilon = 3e-4);
        assert_abs_diff_eq!(s.nu, 1.5, epsilon = 2e-3);
    }

    #[test]
    fn doubling_r_doubles_nu() {
        let sys = scalar_system(1.0, 1.0);
        let cfg1 = scalar_cfg(0.5, 1.0, 1.0);
        let cfg2 = scalar_cfg(0.5, 2.0, 1.0);
        let x = DVector::from_element(1, 0.5);
        let xd = DVector::zeros(1);
        let s1 = sample_ncm_metric(&sys, &cfg1, &x, &xd).unwrap();
        let s2 = sample_ncm_metric(&sys, &cfg2, &x, &xd).unwrap();
        assert_abs_diff_eq!(s2.nu, 2.0 * s1.nu, epsilon = 1e-2);
    }

    #[test]
    fn unstabilizable_mode_infeasible() {
        let sys = scalar_system(1.0, 0.0);
        let cfg = scalar_cfg(0.5, 1.0, 1.0);
        let x = DVector::from_element(1, 0.5);
        let xd = DVector::zeros(1);
        assert!(matches!(
            sample_ncm_metric(&sys, &cfg, &x, &xd),
            Err(SynthesisError::Infeasible { .. })
        ));
    }

    #[test]
    fn metric_bounds_from_nu_chi() {
        // omega_upper^-1 I <= M <= omega_lower^-1 I within 1e-7.
        let cp = CartPole::default();
        let psys = cp.parametric(CartPole::default_bounds(), CartPole::default_domain());
        let cfg = cartpole_cfg();
        let x = DVector::from_column_slice(&[0.4, -0.3, 0.5, 0.2]);
        let xd = DVector::zeros(4);
        let s = sample_ancm_metric(&psys, &cfg, &x, &xd, &psys.theta_nominal).unwrap();
        let m = s.metric();
        let eigs = crate::lmi::jacobi_eigen(&m).unwrap().values;
        let lo = 1.0 / s.omega_upper();
        let hi = 1.0 / s.omega_lower();
        for e in eigs.iter() {
            assert!(*e >= lo - 1e-7, "eig {e} below {lo}");
            assert!(*e <= hi + 1e-7, "eig {e} above {hi}");
        }
    }

    #[test]
    fn ancm_at_true_theta_matches_ncm() {
        let cp = CartPole::default();
        let psys = cp.parametric(CartPole::default_bounds(), CartPole::default_domain());
        let cfg = cartpole_cfg();
        let x = DVector::from_column_slice(&[0.4, -0.3, 0.5, 0.2]);
        let xd = DVector::from_column_slice(&[0.1, 0.05, 0.0, -0.1]);
        let s_ncm = sample_ncm_metric(&psys.base, &cfg, &x, &xd).unwrap();
        let s_ancm = sample_ancm_metric(&psys, &cfg, &x, &xd, &psys.theta_nominal).unwrap();
        // The two routes evaluate the same dynamics through different
        // arithmetic, so agreement is relative to the metric scale.
        let scale = s_ncm.w_bar.amax();
        let dw = (s_ncm.w_bar.clone() - s_ancm.w_bar.clone()).amax();
        assert!(dw < 1e-5 * scale, "dW = {dw:.3e} at scale {scale:.3e}");
        assert_abs_diff_eq!(s_ncm.chi, s_ancm.chi, epsilon = 1e-6 * scale);
    }

    #[test]
    fn paper_initial_estimate_feasible_at_origin() {
        // theta_hat = (4, 0.0016, 1) at x = x_d = 0 is feasible for alpha = 1.
        let cp = CartPole::default();
        let psys = cp.parametric(CartPole::default_bounds(), CartPole::default_domain());
        let mut cfg = cartpole_cfg();
        cfg.alpha = 1.0;
        let origin = DVector::zeros(4);
        let th = DVector::from_column_slice(&[4.0, 0.0016, 1.0]);
        let s = sample_ancm_metric(&psys, &cfg, &origin, &origin, &th).unwrap();
        assert!(s.worst_margin() <= 1e-7);
        assert!(s.theta_hat.is_some());
    }

    #[test]
    fn quasi_static_dataset_counts_points() {
        let sys = scalar_system(-1.0, 1.0);
        let psys = trivial_parametric(sys);
        let mut cfg = scalar_cfg(0.5, 1.0, 1.0);
        cfg.grid.x_counts = vec![4];
        cfg.grid.xd_counts = vec![3];
        let ds = build_dataset(&psys, &cfg).unwrap();
        assert_eq!(ds.samples.len(), 12);
        assert_eq!(ds.summary.feasible, 12);
        assert_eq!(ds.summary.infeasible, 0);
    }

    #[test]
    fn uniform_dataset_shares_w_and_passes_margins() {
        let cp = CartPole::default();
        let psys = cp.parametric(CartPole::default_bounds(), CartPole::default_domain());
        let mut cfg = cartpole_cfg();
        cfg.mode = SynthesisMode::Uniform;
        cfg.grid.x_counts = vec![2, 2, 1, 1];
        cfg.grid.xd_counts = vec![1, 1, 1, 1];
        let ds = build_dataset(&psys, &cfg).unwrap();
        assert_eq!(ds.samples.len(), 4);
        let w0 = ds.samples[0].w_bar.clone();
        for s in &ds.samples {
            assert!((s.w_bar.clone() - &w0).amax() < 1e-12);
            assert!(s.worst_margin() <= 1e-7, "margin {}", s.worst_margin());
        }
    }

    #[test]
    fn csv_round_trip_preserves_samples() {
        let sys = scalar_system(-1.0, 1.0);
        let psys = trivial_parametric(sys);
        let cfg = scalar_cfg(0.5, 1.0, 1.0);
        let ds = build_dataset(&psys, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert!((a.w_bar.clone() - b.w_bar.clone()).amax() < 1e-14);
            assert_abs_diff_eq!(a.nu, b.nu, epsilon = 1e-14);
            assert_abs_diff_eq!(a.chi, b.chi, epsilon = 1e-14);
        }
        // Re-export is byte identical.
        let path2 = dir.path().join("ds2.csv");
        ds.write_csv(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    fn cartpole_cfg() -> SynthesisConfig {
        let grid = GridSpec {
            x_box: CartPole::default_domain(),
            x_counts: vec![2, 2, 1, 1],
            xd_box: CartPole::default_domain(),
            xd_counts: vec![1, 1, 1, 1],
            th_box: None,
            th_counts: vec![],
        };
        let mut cfg = SynthesisConfig::new(0.8, DMatrix::identity(1, 1), grid, 0.15);
        cfg.margin = 0.2;
        cfg
    }

    fn trivial_parametric(sys: SystemModel) -> ParametricSystem {
        let b = sys.b.clone();
        let f = sys.f.clone();
        ParametricSystem {
            base: sys,
            y_f: Arc::new(move |x: &DVector<f64>| DMatrix::from_column_slice(1, 1, f(x).as_slice())),
            y_b: vec![Arc::new(move |x: &DVector<f64>| {
                DMatrix::from_column_slice(1, 1, &[b(x)[(0, 0)]])
            })],
            z_map: Arc::new(|t: &DVector<f64>| t.clone()),
            p: 1,
            q_z: 1,
            augmented: true,
            theta_nominal: DVector::from_element(1, 1.0),
        }
    }
}
