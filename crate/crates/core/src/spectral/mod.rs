//! Top-of-spectrum estimation for the training-loss Hessian.

mod cache;
mod dense;
mod lanczos;
mod tridiag;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{
    load_basis, load_lanczos_state, model_digest, save_basis, save_lanczos_state, LoadedBasis,
    BASIS_FORMAT_VERSION, STATE_FORMAT_VERSION,
};
pub use cache::write_atomic;
pub use dense::{dense_eig, dense_hessian, dense_matrix, DenseSpectrum, DENSE_LIMIT};
pub use lanczos::{lanczos, resume, ritz, Reorth, TridiagonalFactor, BREAKDOWN_TOL};
pub use tridiag::{tridiag_eig, TridiagEig};

use crate::autodiff::{hvp_reduced, Reduction};
use crate::error::{Error, Result};
use crate::mlp::{dot, Batch, MlpSpec, ParamVector};

/// A symmetric linear map accessed only through products.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// An explicit symmetric matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Array2<f64>,
}

impl DenseOperator {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::dim("square matrix columns", matrix.nrows(), matrix.ncols()));
        }
        Ok(DenseOperator { matrix })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        DenseOperator {
            matrix: Array2::from_diag(&ArrayView1::from(values)),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl SymmetricOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::dim("operator input", self.dim(), v.len()));
        }
        Ok(self.matrix.dot(&ArrayView1::from(v)).to_vec())
    }
}

/// How each Hessian-vector product samples the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchPolicy {
    FullBatch,
    /// Average of `batches` minibatch HVPs, each rescaled to the full
    /// summed-loss scale. Every call draws fresh minibatches.
    Minibatch {
        batch_size: usize,
        batches: usize,
        seed: u64,
    },
}

impl BatchPolicy {
    pub fn tag(&self) -> String {
        match self {
            BatchPolicy::FullBatch => "full".into(),
            BatchPolicy::Minibatch {
                batch_size,
                batches,
                seed,
            } => format!("minibatch:{batch_size}x{batches}@{seed}"),
        }
    }
}

/// `v -> H v` for the summed training loss of a fixed model.
pub struct HvpOperator<'a> {
    spec: &'a MlpSpec,
    params: &'a ParamVector,
    batch: &'a Batch,
    policy: BatchPolicy,
    calls: AtomicU64,
}

impl<'a> HvpOperator<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a ParamVector, batch: &'a Batch, policy: BatchPolicy) -> Result<Self> {
        spec.check_params(params)?;
        batch.check(spec)?;
        if let BatchPolicy::Minibatch {
            batch_size,
            batches,
            ..
        } = policy
        {
            if batch_size == 0 || batches == 0 || batch_size > batch.len() {
                return Err(Error::InvalidArgument(format!(
                    "minibatch policy {batch_size}x{batches} invalid for {} rows",
                    batch.len()
                )));
            }
        }
        Ok(HvpOperator {
            spec,
            params,
            batch,
            policy,
            calls: AtomicU64::new(0),
        })
    }

    pub fn full_batch(spec: &'a MlpSpec, params: &'a ParamVector, batch: &'a Batch) -> Result<Self> {
        Self::new(spec, params, batch, BatchPolicy::FullBatch)
    }

    pub fn policy(&self) -> BatchPolicy {
        self.policy
    }

    /// Continues the minibatch stream as if `calls` products had already been
    /// taken, so a resumed Lanczos run draws the same minibatches.
    pub fn starting_at_call(self, calls: u64) -> Self {
        self.calls.store(calls, Ordering::Relaxed);
        self
    }
}

impl SymmetricOperator for HvpOperator<'_> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let v = ParamVector(v.to_vec());
        match self.policy {
            BatchPolicy::FullBatch => Ok(hvp_reduced(self.spec, self.params, self.batch, &v, Reduction::Sum)?.0),
            BatchPolicy::Minibatch {
                batch_size,
                batches,
                seed,
            } => {
                let call = self.calls.fetch_add(1, Ordering::Relaxed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(call);
                let scale = self.batch.len() as f64 / (batch_size * batches) as f64;
                let mut acc = vec![0.0; v.len()];
                for _ in 0..batches {
                    let rows = sample(&mut rng, self.batch.len(), batch_size).into_vec();
                    let hv = hvp_reduced(self.spec, self.params, &self.batch.select(&rows), &v, Reduction::Sum)?;
                    for (a, h) in acc.iter_mut().zip(hv.iter()) {
                        *a += h;
                    }
                }
                acc.iter_mut().for_each(|a| *a *= scale);
                Ok(acc)
            }
        }
    }
}

/// Settings for a Lanczos run on a model's training Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub m: usize,
    pub seed: u64,
    pub reorth: Reorth,
    pub batch_policy: BatchPolicy,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            m: 10,
            seed: 0,
            reorth: Reorth::TwoStepCgs,
            batch_policy: BatchPolicy::FullBatch,
        }
    }
}

/// Top-`m` Ritz pairs of the summed training-loss Hessian. `m` is capped at `p`;
/// fewer pairs come back if the Krylov space is exhausted first.
pub fn estimate_basis(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    config: &SpectralConfig,
) -> Result<SpectralBasis> {
    let op = HvpOperator::new(spec, params, batch, config.batch_policy)?;
    let m = config.m.min(op.dim());
    if m == 0 {
        return SpectralBasis::new(Vec::new(), Array2::zeros((0, op.dim())), provenance(spec, params, config, 0));
    }
    let factor = lanczos(&op, m, config.seed, config.reorth)?;
    ritz(&factor, provenance(spec, params, config, factor.m()))
}

fn provenance(spec: &MlpSpec, params: &ParamVector, config: &SpectralConfig, iterations: usize) -> Provenance {
    Provenance {
        model_digest: model_digest(spec, params),
        batch_policy: config.batch_policy.tag(),
        seed: config.seed,
        iterations,
        config_digest: String::new(),
    }
}

/// Where a basis came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_digest: String,
    pub batch_policy: String,
    pub seed: u64,
    pub iterations: usize,
    /// Digest of the run configuration that produced the basis; may be empty.
    pub config_digest: String,
}

/// Top-`m` approximate Hessian eigenpairs, sorted by decreasing |lambda|.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub eigenvalues: Vec<f64>,
    /// Row `j` is the unit eigenvector for `eigenvalues[j]`; shape `m x p`.
    pub eigenvectors: Array2<f64>,
    /// Per-pair residual estimates `||H xi - lambda xi||`; empty when unknown.
    pub residuals: Vec<f64>,
    pub provenance: Provenance,
}

impl SpectralBasis {
    pub fn new(eigenvalues: Vec<f64>, eigenvectors: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if eigenvectors.nrows() != eigenvalues.len() {
            return Err(Error::dim("eigenvector count", eigenvalues.len(), eigenvectors.nrows()));
        }
        Ok(SpectralBasis {
            eigenvalues,
            eigenvectors,
            residuals: Vec::new(),
            provenance,
        })
    }

    /// Full spectrum of a dense matrix as a basis with `m = p`.
    pub fn from_dense(spectrum: DenseSpectrum, provenance: Provenance) -> Self {
        SpectralBasis {
            eigenvalues: spectrum.values,
            eigenvectors: spectrum.vectors,
            residuals: Vec::new(),
            provenance,
        }
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.ncols()
    }

    pub fn vector(&self, j: usize) -> ArrayView1<'_, f64> {
        self.eigenvectors.row(j)
    }

    /// The first `m` pairs. `m` larger than available is clamped.
    pub fn truncate(&self, m: usize) -> SpectralBasis {
        let m = m.min(self.m());
        SpectralBasis {
            eigenvalues: self.eigenvalues[..m].to_vec(),
            eigenvectors: self.eigenvectors.slice(ndarray::s![..m, ..]).to_owned(),
            residuals: self.residuals.iter().take(m).copied().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// `U g`: coordinates of `g` along each basis vector.
    pub fn coefficients(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim() {
            return Err(Error::dim("gradient vs basis", self.dim(), g.len()));
        }
        Ok(self
            .eigenvectors
            .outer_iter()
            .map(|row| dot(row.as_slice().expect("standard layout"), g))
            .collect())
    }

    /// `max |U U^T - I|` over the basis rows.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.eigenvectors)
    }

    /// Explicit residuals `||H xi - lambda xi||` against an operator.
    pub fn residuals_against(&self, op: &dyn SymmetricOperator) -> Result<Vec<f64>> {
        self.eigenvectors
            .outer_iter()
            .zip(&self.eigenvalues)
            .map(|(row, &lambda)| {
                let v = row.to_vec();
                let hv = op.apply(&v)?;
                Ok(hv.iter().zip(&v).map(|(h, x)| (h - lambda * x).powi(2)).sum::<f64>().sqrt())
            })
            .collect()
    }
}

/// `max |Q Q^T - I|` for a matrix whose rows should be orthonormal.
pub fn orthogonality_error(rows: &Array2<f64>) -> f64 {
    let gram = rows.dot(&rows.t());
    let mut worst: f64 = 0.0;
    for ((i, j), &v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}
