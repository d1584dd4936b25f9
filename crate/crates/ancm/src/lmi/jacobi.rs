//! Cyclic Jacobi eigendecomposition for small dense symmetric matrices.
//!
//! This is the independent eigen-checker used to re-verify every solver
//! output, so it deliberately shares no code with the barrier solver's
//! Cholesky-based feasibility tests.

use nalgebra::{DMatrix, DVector};

use super::LmiError;

/// Eigenvalues and eigenvectors of a symmetric matrix, `a = v * diag(l) * v^T`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let mut defect = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            defect = defect.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    defect
}

/// Full eigendecomposition by cyclic Jacobi sweeps.
///
/// Rotations annihilate one off-diagonal entry at a time; sweeps repeat until
/// the off-diagonal mass is below `1e-14` relative to the matrix scale.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<SymEigen, LmiError> {
    let k = a.nrows();
    assert_eq!(k, a.ncols(), "jacobi_eigen: matrix must be square");
    let scale = a.amax().max(1.0);
    if symmetry_defect(a) > 1e-12 * scale {
        return Err(LmiError::NotSymmetric {
            defect: symmetry_defect(a),
        });
    }

    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(k, k);
    if k <= 1 {
        return Ok(SymEigen {
            values: m.diagonal(),
            vectors: v,
        });
    }

    let off = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    let tol = 1e-14 * scale;
    for _sweep in 0..64 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..k - 1 {
            for q in (p + 1)..k {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                // Classic stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1))
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..k {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for j in 0..k {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = c * mpj - s * mqj;
                    m[(q, j)] = s * mpj + c * mqj;
                }
                for i in 0..k {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }

    Ok(SymEigen {
        values: m.diagonal(),
        vectors: v,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(s: &DMatrix<f64>) -> Result<f64, LmiError> {
    let eig = jacobi_eigen(s)?;
    Ok(eig.values.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig(s: &DMatrix<f64>) -> Result<f64, LmiError> {
    let eig = jacobi_eigen(s)?;
    Ok(eig
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}
