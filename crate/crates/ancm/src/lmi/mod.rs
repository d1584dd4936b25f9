//! Minimal dense semidefinite programming: linear objective over symmetric
//! matrix and nonnegative scalar decision variables, subject to affine
//! constraints `G_j(z) <= 0` (negative semidefinite), sized for blocks of
//! dimension <= 10.
//!
//! Every solver output can be re-verified independently through
//! [`check_lmi`], which only uses the Jacobi eigensolver.

mod jacobi;
mod solver;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use jacobi::{jacobi_eigen, max_eig, min_eig, SymEigen};
pub use solver::{solve_sdp, solve_sdp_warm};

#[derive(Debug, Error)]
pub enum LmiError {
    #[error("matrix is not symmetric (defect {defect:.3e})")]
    NotSymmetric { defect: f64 },
    #[error("constraint '{label}' is not affine (linearity defect {defect:.3e})")]
    NonAffineConstraint { label: String, defect: f64 },
    #[error("barrier loop failed to converge within {max_iter} Newton iterations")]
    MaxIterations {
        max_iter: usize,
        best: Box<SdpSolution>,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Handle to a decision variable of an [`LmiProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Free symmetric `k x k` matrix, stored as its upper triangle.
    SymMatrix(usize),
    /// Nonnegative scalar (kept strictly positive by the barrier).
    Scalar,
}

impl VarKind {
    fn n_components(&self) -> usize {
        match self {
            VarKind::SymMatrix(k) => k * (k + 1) / 2,
            VarKind::Scalar => 1,
        }
    }
}

/// Index of entry `(i, j)`, `i <= j`, in the packed upper triangle of a
/// `k x k` symmetric matrix.
pub fn tri_index(k: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    debug_assert!(j < k);
    i * k - i * (i + 1) / 2 + j
}

/// Values for every decision variable, packed per variable.
#[derive(Debug, Clone)]
pub struct Assignment {
    kinds: Vec<VarKind>,
    values: Vec<DVector<f64>>,
}

impl Assignment {
    fn zeros(kinds: &[VarKind]) -> Self {
        Assignment {
            kinds: kinds.to_vec(),
            values: kinds
                .iter()
                .map(|k| DVector::zeros(k.n_components()))
                .collect(),
        }
    }

    pub fn scalar(&self, var: VarId) -> f64 {
        debug_assert!(matches!(self.kinds[var.0], VarKind::Scalar));
        self.values[var.0][0]
    }

    pub fn set_scalar(&mut self, var: VarId, v: f64) {
        debug_assert!(matches!(self.kinds[var.0], VarKind::Scalar));
        self.values[var.0][0] = v;
    }

    /// Reconstructs a symmetric matrix variable from its packed triangle.
    pub fn matrix(&self, var: VarId) -> DMatrix<f64> {
        let VarKind::SymMatrix(k) = self.kinds[var.0] else {
            panic!("variable is not a matrix");
        };
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = self.values[var.0][tri_index(k, i, j)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn set_matrix(&mut self, var: VarId, m: &DMatrix<f64>) {
        let VarKind::SymMatrix(k) = self.kinds[var.0] else {
            panic!("variable is not a matrix");
        };
        assert_eq!(m.nrows(), k);
        for i in 0..k {
            for j in i..k {
                self.values[var.0][tri_index(k, i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
            }
        }
    }

    fn flatten(&self) -> DVector<f64> {
        let total: usize = self.values.iter().map(|v| v.len()).sum();
        let mut z = DVector::zeros(total);
        let mut at = 0;
        for v in &self.values {
            z.rows_mut(at, v.len()).copy_from(v);
            at += v.len();
        }
        z
    }

    fn from_flat(kinds: &[VarKind], z: &DVector<f64>) -> Self {
        let mut a = Assignment::zeros(kinds);
        let mut at = 0;
        for (idx, k) in kinds.iter().enumerate() {
            let n = k.n_components();
            a.values[idx] = z.rows(at, n).into_owned();
            at += n;
        }
        a
    }
}

/// One affine constraint block `F0 + sum_a z_a F_a <= 0`.
#[derive(Debug, Clone)]
pub(crate) struct ConstraintBlock {
    pub dim: usize,
    pub label: String,
    pub f0: DMatrix<f64>,
    /// Coefficient matrix per global component; zero matrices are stored as
    /// `None` to skip them in the Newton assembly.
    pub coeffs: Vec<Option<DMatrix<f64>>>,
}

/// Linear objective over affine LMI constraints.
pub struct LmiProblem {
    kinds: Vec<VarKind>,
    objective: Vec<f64>,
    blocks: Vec<ConstraintBlock>,
}

impl LmiProblem {
    pub fn new() -> Self {
        LmiProblem {
            kinds: Vec::new(),
            objective: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn add_sym_var(&mut self, k: usize) -> VarId {
        assert!(k >= 1 && k <= 10, "matrix variables are sized for k <= 10");
        self.kinds.push(VarKind::SymMatrix(k));
        self.objective
            .extend(std::iter::repeat(0.0).take(k * (k + 1) / 2));
        VarId(self.kinds.len() - 1)
    }

    pub fn add_scalar_var(&mut self) -> VarId {
        self.kinds.push(VarKind::Scalar);
        self.objective.push(0.0);
        VarId(self.kinds.len() - 1)
    }

    fn component_offset(&self, var: VarId) -> usize {
        self.kinds[..var.0]
            .iter()
            .map(|k| k.n_components())
            .sum()
    }

    pub fn n_components(&self) -> usize {
        self.kinds.iter().map(|k| k.n_components()).sum()
    }

    pub(crate) fn kinds(&self) -> &[VarKind] {
        &self.kinds
    }

    pub(crate) fn objective_vector(&self) -> &[f64] {
        &self.objective
    }

    pub(crate) fn blocks(&self) -> &[ConstraintBlock] {
        &self.blocks
    }

    /// Adds `c * scalar_var` to the objective.
    pub fn objective_scalar(&mut self, var: VarId, c: f64) {
        debug_assert!(matches!(self.kinds[var.0], VarKind::Scalar));
        let at = self.component_offset(var);
        self.objective[at] += c;
    }

    /// Adds `c * M[(i, j)]` to the objective for a matrix variable.
    pub fn objective_matrix_entry(&mut self, var: VarId, i: usize, j: usize, c: f64) {
        let VarKind::SymMatrix(k) = self.kinds[var.0] else {
            panic!("variable is not a matrix");
        };
        let at = self.component_offset(var) + tri_index(k, i, j);
        self.objective[at] += c;
    }

    pub fn zero_assignment(&self) -> Assignment {
        Assignment::zeros(&self.kinds)
    }

    /// Registers an affine constraint `map(z) <= 0` by sampling the map on a
    /// component basis. The map is checked for affinity at two random points;
    /// a non-affine map is rejected.
    pub fn add_constraint<F>(&mut self, dim: usize, label: &str, map: F) -> Result<(), LmiError>
    where
        F: Fn(&Assignment) -> DMatrix<f64>,
    {
        assert!(dim >= 1 && dim <= 12, "constraint blocks are sized <= 12");
        let n = self.n_components();
        let zero = Assignment::zeros(&self.kinds);
        let f0 = symmetrize(map(&zero));
        if f0.nrows() != dim || f0.ncols() != dim {
            return Err(LmiError::Dimension(format!(
                "constraint '{label}' returned {}x{}, declared {dim}",
                f0.nrows(),
                f0.ncols()
            )));
        }

        let mut coeffs: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(n);
        let mut flat = DVector::<f64>::zeros(n);
        for a in 0..n {
            flat[a] = 1.0;
            let basis = Assignment::from_flat(&self.kinds, &flat);
            flat[a] = 0.0;
            let fa = symmetrize(map(&basis)) - &f0;
            if fa.amax() <= 1e-300 {
                coeffs.push(None);
            } else {
                coeffs.push(Some(fa));
            }
        }

        // Randomized two-point linearity check: an affine map satisfies
        // G(z1 + z2) - G(z1) - G(z2) + G(0) = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(0x1f2e_3d4c ^ self.blocks.len() as u64);
        let z1 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let z2 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let g = |z: &DVector<f64>| symmetrize(map(&Assignment::from_flat(&self.kinds, z)));
        let defect = (g(&(&z1 + &z2)) - g(&z1) - g(&z2) + &f0).amax();
        let coeff_scale = coeffs
            .iter()
            .flatten()
            .map(|m| m.amax())
            .fold(0.0f64, f64::max);
        let scale = f0.amax().max(coeff_scale).max(1.0);
        if defect > 1e-8 * scale {
            return Err(LmiError::NonAffineConstraint {
                label: label.to_string(),
                defect,
            });
        }

        self.blocks.push(ConstraintBlock {
            dim,
            label: label.to_string(),
            f0,
            coeffs,
        });
        Ok(())
    }

    /// Evaluates constraint block `j` at an assignment.
    pub(crate) fn eval_block(&self, j: usize, z: &DVector<f64>) -> DMatrix<f64> {
        let block = &self.blocks[j];
        let mut g = block.f0.clone();
        for (a, fa) in block.coeffs.iter().enumerate() {
            if let Some(fa) = fa {
                g += fa * z[a];
            }
        }
        g
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_label(&self, j: usize) -> &str {
        &self.blocks[j].label
    }

    /// Writes the problem in a plain-text matrix format for offline
    /// inspection.
    pub fn dump(&self, path: &Path) -> Result<(), LmiError> {
        let mut out = String::new();
        writeln!(out, "components {}", self.n_components()).unwrap();
        write!(out, "objective").unwrap();
        for c in &self.objective {
            write!(out, " {:.17e}", c).unwrap();
        }
        writeln!(out).unwrap();
        for b in &self.blocks {
            writeln!(out, "block {} dim {}", b.label, b.dim).unwrap();
            dump_matrix(&mut out, "F0", &b.f0);
            for (a, fa) in b.coeffs.iter().enumerate() {
                if let Some(fa) = fa {
                    dump_matrix(&mut out, &format!("F{}", a + 1), fa);
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

fn dump_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    writeln!(out, "{name}").unwrap();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write!(out, " {:.17e}", m[(i, j)]).unwrap();
        }
        writeln!(out).unwrap();
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Solver output: variable values, objective, and the worst (most positive)
/// constraint eigenvalue across all blocks.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub values: Assignment,
    pub objective: f64,
    pub worst_margin: f64,
    pub status: SdpStatus,
    pub newton_iters: usize,
    /// Interior iterate from mid-path, usable as a warm start for a nearby
    /// problem of identical shape.
    pub central_seed: Option<Assignment>,
}

impl SdpSolution {
    pub fn dump(&self, path: &Path) -> Result<(), LmiError> {
        let mut out = String::new();
        writeln!(out, "status {:?}", self.status).unwrap();
        writeln!(out, "objective {:.17e}", self.objective).unwrap();
        writeln!(out, "worst_margin {:.17e}", self.worst_margin).unwrap();
        for (idx, v) in self.values.values.iter().enumerate() {
            write!(out, "var{idx}").unwrap();
            for x in v.iter() {
                write!(out, " {:.17e}", x).unwrap();
            }
            writeln!(out).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-constraint worst eigenvalues of a candidate point, via the Jacobi
/// eigensolver only (no solver machinery involved).
#[derive(Debug, Clone)]
pub struct LmiReport {
    pub worst_eigs: Vec<f64>,
    pub pass: bool,
}

/// Evaluates every constraint at `candidate` and reports each block's most
/// positive eigenvalue. Passes iff all are `<= -margin`.
pub fn check_lmi(problem: &LmiProblem, candidate: &Assignment, margin: f64) -> LmiReport {
    let z = candidate.flatten();
    assert_eq!(
        z.len(),
        problem.n_components(),
        "candidate dimensionally inconsistent with problem"
    );
    let mut worst_eigs = Vec::with_capacity(problem.blocks.len());
    for j in 0..problem.blocks.len() {
        let g = problem.eval_block(j, &z);
        let lam = max_eig(&g).expect("constraint blocks are symmetric by construction");
        worst_eigs.push(lam);
    }
    let pass = worst_eigs.iter().all(|&l| l <= -margin);
    LmiReport { worst_eigs, pass }
}
