//! Dense Hessians and a dense symmetric eigensolver, used as oracles for
//! small models.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::ParamVector;
use crate::spectral::SymmetricOperator;

pub const DENSE_LIMIT: usize = 2000;
const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_MAX_SWEEPS: usize = 30;

/// Materializes an operator column by column. Refuses `p > DENSE_LIMIT`.
pub fn dense_matrix(op: &dyn SymmetricOperator) -> Result<Array2<f64>> {
    let p = op.dim();
    if p > DENSE_LIMIT {
        return Err(Error::TooLarge { p, limit: DENSE_LIMIT });
    }
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            op.apply(&e)
        })
        .collect::<Result<_>>()?;
    let h = Array2::from_shape_fn((p, p), |(i, j)| columns[j][i]);
    let asym = max_asymmetry(&h);
    if asym > SYMMETRY_TOL * max_abs(&h).max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(h)
}

/// Full Hessian of the summed training loss, assembled from exact HVPs.
pub fn dense_hessian(
    spec: &crate::mlp::MlpSpec,
    params: &ParamVector,
    batch: &crate::mlp::Batch,
) -> Result<Array2<f64>> {
    let op = crate::spectral::HvpOperator::full_batch(spec, params, batch)?;
    dense_matrix(&op)
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn max_asymmetry(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

/// All eigenpairs of a dense symmetric matrix, sorted by decreasing |lambda|.
#[derive(Debug, Clone)]
pub struct DenseSpectrum {
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Array2<f64>,
}

pub fn dense_eig(matrix: &Array2<f64>) -> Result<DenseSpectrum> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::dim("square matrix columns", n, matrix.ncols()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dense matrix".into()));
    }
    let asym = max_asymmetry(matrix);
    if asym > SYMMETRY_TOL * max_abs(matrix).max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (matrix[[i, j]] + matrix[[j, i]]));
    let eig = SymmetricEigen::new(m.clone());
    let (lambdas, v) = jacobi_polish(&m, eig.eigenvectors);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lambdas[b].abs().total_cmp(&lambdas[a].abs()).then(lambdas[b].total_cmp(&lambdas[a])));
    let values = order.iter().map(|&i| lambdas[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[(c, order[r])]);
    Ok(DenseSpectrum { values, vectors })
}

/// Cyclic Jacobi sweeps on `V^T A V`, accumulated into `V`. The QR-based
/// solver can leave eigenvector residuals near `sqrt(eps)`; a few sweeps on
/// the nearly diagonal projection bring them to rounding level.
fn jacobi_polish(a: &DMatrix<f64>, mut v: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut b = v.transpose() * a * &v;
    b = (&b + b.transpose()) * 0.5;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let bpq = b[(p, q)];
                let scale = (b[(p, p)] * b[(q, q)]).abs().sqrt();
                if bpq == 0.0 || bpq.abs() <= f64::EPSILON * scale {
                    continue;
                }
                rotated = true;
                let tau = (b[(q, q)] - b[(p, p)]) / (2.0 * bpq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (bkp, bkq) = (b[(k, p)], b[(k, q)]);
                    b[(k, p)] = c * bkp - s * bkq;
                    b[(k, q)] = s * bkp + c * bkq;
                }
                for k in 0..n {
                    let (bpk, bqk) = (b[(p, k)], b[(q, k)]);
                    b[(p, k)] = c * bpk - s * bqk;
                    b[(q, k)] = s * bpk + c * bqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    ((0..n).map(|i| b[(i, i)]).collect(), v)
}
