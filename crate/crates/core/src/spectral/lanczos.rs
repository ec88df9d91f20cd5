//! Lanczos tridiagonalization with optional full reorthogonalization.
//!
//! With [`Reorth::TwoStepCgs`] every new Krylov vector is orthogonalized
//! against the entire basis with classical Gram-Schmidt, twice. Without it
//! the plain three-term recurrence is used and orthogonality is lost as Ritz
//! values converge.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tridiag::tridiag_eig;
use super::{Provenance, SpectralBasis, SymmetricOperator};
use crate::error::{Error, Result};
use crate::mlp::dot;

/// Off-diagonal magnitude (relative to the largest diagonal seen, floored
/// at 1) below which the Krylov space is treated as invariant.
pub const BREAKDOWN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorth {
    None,
    TwoStepCgs,
}

/// `Q^T H Q = T` with `T` tridiagonal, plus what is needed to keep going.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalFactor {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Lanczos vectors as rows, shape `m x p`.
    pub basis: Vec<Vec<f64>>,
    pub breakdown: bool,
    pub reorth: Reorth,
    pub seed: u64,
    /// Unnormalized next Lanczos direction and its norm (the next beta).
    pub(crate) residual: Vec<f64>,
    pub(crate) residual_norm: f64,
}

impl TridiagonalFactor {
    pub fn m(&self) -> usize {
        self.alphas.len()
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    /// Norm of the residual direction: the coupling to the unexplored
    /// part of the Krylov space.
    pub fn residual_norm(&self) -> f64 {
        self.residual_norm
    }

    pub fn basis_matrix(&self) -> Array2<f64> {
        let p = self.dim();
        let mut q = Array2::zeros((self.m(), p));
        for (mut row, v) in q.outer_iter_mut().zip(&self.basis) {
            row.assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        q
    }

    pub fn orthogonality_error(&self) -> f64 {
        super::orthogonality_error(&self.basis_matrix())
    }

    pub(crate) fn from_parts(
        alphas: Vec<f64>,
        betas: Vec<f64>,
        basis: Vec<Vec<f64>>,
        breakdown: bool,
        reorth: Reorth,
        seed: u64,
        residual: Vec<f64>,
        residual_norm: f64,
    ) -> Self {
        TridiagonalFactor {
            alphas,
            betas,
            basis,
            breakdown,
            reorth,
            seed,
            residual,
            residual_norm,
        }
    }

    fn breakdown_threshold(&self) -> f64 {
        let scale = self.alphas.iter().chain(&self.betas).fold(1.0_f64, |m, v| m.max(v.abs()));
        BREAKDOWN_TOL * scale
    }
}

fn start_vector(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Classical Gram-Schmidt pass: `w -= Q (Q^T w)`.
fn cgs_pass(basis: &[Vec<f64>], w: &mut [f64]) {
    let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, w)).collect();
    for (q, c) in basis.iter().zip(coeffs) {
        for (wi, qi) in w.iter_mut().zip(q) {
            *wi -= c * qi;
        }
    }
}

/// Runs `m` Lanczos steps from a seeded random start vector.
pub fn lanczos(op: &dyn SymmetricOperator, m: usize, seed: u64, reorth: Reorth) -> Result<TridiagonalFactor> {
    let p = op.dim();
    if m == 0 || m > p {
        return Err(Error::InvalidArgument(format!("lanczos needs 1 <= m <= p = {p}, got {m}")));
    }
    let start = TridiagonalFactor {
        alphas: Vec::new(),
        betas: Vec::new(),
        basis: Vec::new(),
        breakdown: false,
        reorth,
        seed,
        residual: start_vector(p, seed),
        residual_norm: 1.0,
    };
    resume(op, start, m)
}

/// Extends a factor to `m` steps. Under a deterministic operator the result
/// is bit-identical to running [`lanczos`] straight to `m`.
pub fn resume(op: &dyn SymmetricOperator, mut factor: TridiagonalFactor, m: usize) -> Result<TridiagonalFactor> {
    let p = op.dim();
    if factor.dim() != p {
        return Err(Error::dim("lanczos state vs operator", p, factor.dim()));
    }
    if m > p {
        return Err(Error::InvalidArgument(format!("lanczos needs m <= p = {p}, got {m}")));
    }
    while factor.m() < m && !factor.breakdown {
        let j = factor.m();
        let beta_prev = factor.residual_norm;
        if j > 0 {
            factor.betas.push(beta_prev);
        }
        let q: Vec<f64> = factor.residual.iter().map(|r| r / beta_prev).collect();

        let mut w = op.apply(&q)?;
        if w.len() != p || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("operator output at lanczos step {j}")));
        }
        let alpha = dot(&q, &w);
        for (wi, qi) in w.iter_mut().zip(&q) {
            *wi -= alpha * qi;
        }
        if j > 0 {
            let q_prev = &factor.basis[j - 1];
            for (wi, qi) in w.iter_mut().zip(q_prev) {
                *wi -= beta_prev * qi;
            }
        }
        factor.alphas.push(alpha);
        factor.basis.push(q);

        if factor.reorth == Reorth::TwoStepCgs {
            cgs_pass(&factor.basis, &mut w);
            cgs_pass(&factor.basis, &mut w);
        }
        let beta = dot(&w, &w).sqrt();
        factor.breakdown = beta <= factor.breakdown_threshold();
        factor.residual = w;
        factor.residual_norm = beta;
    }
    Ok(factor)
}

/// Ritz pairs of a factor, sorted by decreasing |lambda|. Residuals are the
/// standard estimate `|beta_m * y_m|`.
pub fn ritz(factor: &TridiagonalFactor, provenance: Provenance) -> Result<SpectralBasis> {
    let m = factor.m();
    let eig = tridiag_eig(&factor.alphas, &factor.betas)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.values[b]
            .abs()
            .total_cmp(&eig.values[a].abs())
            .then(eig.values[b].total_cmp(&eig.values[a]))
    });
    let p = factor.dim();
    let mut vectors = Array2::zeros((m, p));
    let mut residuals = Vec::with_capacity(m);
    let tail = if factor.breakdown { 0.0 } else { factor.residual_norm };
    for (row, &idx) in order.iter().enumerate() {
        let y = eig.vectors.column(idx);
        let mut out = vectors.row_mut(row);
        for (k, q) in factor.basis.iter().enumerate() {
            let c = y[k];
            for (o, qi) in out.iter_mut().zip(q) {
                *o += c * qi;
            }
        }
        residuals.push((tail * y[m - 1]).abs());
    }
    let values = order.iter().map(|&i| eig.values[i]).collect();
    let mut basis = SpectralBasis::new(values, vectors, provenance)?;
    basis.residuals = residuals;
    Ok(basis)
}
