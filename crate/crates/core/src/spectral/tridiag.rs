//! Symmetric tridiagonal eigensolver: implicit QL with Wilkinson-style
//! shifts (the EISPACK `tql2` recurrence), accumulating eigenvectors.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Full eigendecomposition of a symmetric tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Array2<f64>,
}

/// Eigenpairs of the tridiagonal matrix with diagonal `alphas` and
/// off-diagonal `betas` (`betas.len() == alphas.len() - 1`).
pub fn tridiag_eig(alphas: &[f64], betas: &[f64]) -> Result<TridiagEig> {
    let n = alphas.len();
    if n == 0 {
        return Ok(TridiagEig {
            values: vec![],
            vectors: Array2::zeros((0, 0)),
        });
    }
    if betas.len() + 1 != n {
        return Err(Error::dim("tridiagonal off-diagonal", n - 1, betas.len()));
    }
    if alphas.iter().chain(betas).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tridiagonal input".into()));
    }

    let mut d = alphas.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(betas);
    let mut z = Array2::<f64>::eye(n);

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(Error::NonFinite(format!(
                        "tridiagonal QL failed to converge for eigenvalue {l}"
                    )));
                }
                // Shift from the leading 2x2 block.
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                // Implicit QL sweep.
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let zk1 = z[[k, i + 1]];
                        let zk = z[[k, i]];
                        z[[k, i + 1]] = s * zk + c * zk1;
                        z[[k, i]] = c * zk - s * zk1;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| z[[r, order[c]]]);
    Ok(TridiagEig { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag_matvec(alphas: &[f64], betas: &[f64], y: &[f64]) -> Vec<f64> {
        let n = alphas.len();
        (0..n)
            .map(|i| {
                let mut v = alphas[i] * y[i];
                if i > 0 {
                    v += betas[i - 1] * y[i - 1];
                }
                if i + 1 < n {
                    v += betas[i] * y[i + 1];
                }
                v
            })
            .collect()
    }

    #[test]
    fn one_by_one() {
        let eig = tridiag_eig(&[4.5], &[]).unwrap();
        assert_eq!(eig.values, vec![4.5]);
        assert_eq!(eig.vectors[[0, 0]].abs(), 1.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let eig = tridiag_eig(&[0.0, 0.0], &[1.0]).unwrap();
        assert!((eig.values[0] + 1.0).abs() < 1e-15);
        assert!((eig.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn residuals_are_small() {
        let alphas = [2.0, -1.0, 0.5, 3.0, 3.0, 1e-3];
        let betas = [0.7, 1e-9, 2.0, 0.0, 0.4];
        let eig = tridiag_eig(&alphas, &betas).unwrap();
        let norm = 6.0;
        for (i, &lambda) in eig.values.iter().enumerate() {
            let y = eig.vectors.column(i).to_vec();
            let ty = tridiag_matvec(&alphas, &betas, &y);
            let res: f64 = ty.iter().zip(&y).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
            assert!(res <= 1e-10 * norm, "pair {i}: residual {res}");
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(tridiag_eig(&[1.0, 2.0], &[]).is_err());
        assert!(tridiag_eig(&[1.0, f64::NAN], &[0.0]).is_err());
    }
}
