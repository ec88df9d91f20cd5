//! Monte Carlo check that the extrapolation score is the prediction SD of a
//! linearized local ensemble.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{prediction_gradient, OutputSelect};
use crate::error::{Error, Result};
use crate::mlp::{dot, MlpSpec, ParamVector};
use crate::score::{extrapolation_score, project_out};
use crate::spectral::SpectralBasis;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropositionCheck {
    /// Sample SD of `g^T dtheta` over the draws.
    pub mc_sd: f64,
    /// `sqrt(epsilon) * E_m`.
    pub predicted_sd: f64,
    /// `|mc_sd - predicted_sd| / predicted_sd`; 0 when both vanish.
    pub rel_err: f64,
}

/// Draws `dtheta = sqrt(epsilon) (I - U U^T) eta` with `eta` standard normal
/// and compares the spread of `g^T dtheta` with `sqrt(epsilon) ||(I - U U^T) g||`.
pub fn proposition_check_gradient(
    basis: &SpectralBasis,
    g: &[f64],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PropositionCheck> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let predicted_sd = epsilon.sqrt() * extrapolation_score(basis, g)?.value;
    let p = g.len();
    let scale = epsilon.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta = vec![0.0; p];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        eta.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
        let mut delta = project_out(basis, &eta)?;
        delta.iter_mut().for_each(|d| *d *= scale);
        let y = dot(g, &delta);
        sum += y;
        sum_sq += y * y;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let mc_sd = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0).sqrt();
    let rel_err = if predicted_sd == 0.0 {
        if mc_sd == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (mc_sd - predicted_sd).abs() / predicted_sd
    };
    Ok(PropositionCheck {
        mc_sd,
        predicted_sd,
        rel_err,
    })
}

/// [`proposition_check_gradient`] for the prediction gradient of a model at `x`,
/// using the first `m` basis vectors.
#[allow(clippy::too_many_arguments)]
pub fn proposition_check(
    spec: &MlpSpec,
    params: &ParamVector,
    basis: &SpectralBasis,
    m: usize,
    x: &[f64],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PropositionCheck> {
    if m > basis.m() {
        return Err(Error::InvalidArgument(format!("m = {m} exceeds the {} available eigenvectors", basis.m())));
    }
    let (g, _) = prediction_gradient(spec, params, x, OutputSelect::default())?;
    proposition_check_gradient(&basis.truncate(m), &g, epsilon, n_samples, seed)
}
