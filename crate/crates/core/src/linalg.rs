//! Small dense symmetric eigenproblems.

use ndarray::Array2;

use crate::error::{KronError, Result};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Column `i` belongs to `values[i]`.
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

/// Runs cyclic Jacobi sweeps until the off-diagonal Frobenius norm falls
/// below `tol` times the Frobenius norm of the input, or `max_sweeps` is
/// reached.
pub fn jacobi_eigen(a: &Array2<f64>, tol: f64, max_sweeps: usize) -> Result<SymEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(KronError::DimensionMismatch {
            context: "symmetric eigenproblem",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut m = a.clone();
    // Symmetrize so rounding noise in the input does not bias the rotations.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |m: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while sweeps < max_sweeps && scale > 0.0 && off(&m) > tol * scale {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Singular values of `a` (descending), from the eigenvalues of the smaller
/// Gram matrix. Eigenvalues at or below `dim * eps * largest` are treated as
/// exact zeros.
pub fn singular_values(a: &Array2<f64>) -> Result<Vec<f64>> {
    let gram = if a.nrows() >= a.ncols() {
        a.t().dot(a)
    } else {
        a.dot(&a.t())
    };
    let eig = jacobi_eigen(&gram, 1e-12, 100)?;
    let dim = gram.nrows() as f64;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = dim * f64::EPSILON * top;
    Ok(eig
        .values
        .iter()
        .map(|&l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect())
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}
