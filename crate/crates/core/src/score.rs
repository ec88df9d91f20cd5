//! Extrapolation scores, inverse-Hessian comparison quantities and
//! distance/confidence baselines.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{example_loss_gradient, predict, prediction_gradient, softmax, OutputSelect};
use crate::error::{Error, Result};
use crate::mlp::{Head, MlpSpec, ParamVector};
use crate::spectral::SpectralBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LePrediction,
    LeLossMin,
    LeLossGrid,
    Laplace,
    Influence,
    Maxprob,
    NnInput,
    NnReprs,
    NnFinal,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::LePrediction,
        Variant::LeLossMin,
        Variant::LeLossGrid,
        Variant::Laplace,
        Variant::Influence,
        Variant::Maxprob,
        Variant::NnInput,
        Variant::NnReprs,
        Variant::NnFinal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::LePrediction => "le_prediction",
            Variant::LeLossMin => "le_loss_min",
            Variant::LeLossGrid => "le_loss_grid",
            Variant::Laplace => "laplace",
            Variant::Influence => "influence",
            Variant::Maxprob => "maxprob",
            Variant::NnInput => "nn_input",
            Variant::NnReprs => "nn_reprs",
            Variant::NnFinal => "nn_final",
        }
    }

    /// Whether the variant needs a spectral basis.
    pub fn is_spectral(&self) -> bool {
        matches!(
            self,
            Variant::LePrediction | Variant::LeLossMin | Variant::LeLossGrid | Variant::Laplace | Variant::Influence
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown score variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detail {
    None,
    /// Which output was differentiated.
    Output(usize),
    /// Label attaining the minimum over labels.
    Label(usize),
    /// Grid value attaining the aggregate.
    GridPoint(f64),
    /// Eigenvalues clamped to the damping floor.
    Clamped(usize),
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Detail::None => f.write_str("-"),
            Detail::Output(i) => write!(f, "output={i}"),
            Detail::Label(y) => write!(f, "label={y}"),
            Detail::GridPoint(y) => write!(f, "grid_y={y}"),
            Detail::Clamped(n) => write!(f, "clamped={n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub value: f64,
    pub variant: Variant,
    /// Number of projected-out eigenvectors; 0 for non-spectral variants.
    pub m_used: usize,
    pub detail: Detail,
}

fn check_dim(basis: &SpectralBasis, g: &[f64]) -> Result<()> {
    if basis.dim() != g.len() {
        return Err(Error::dim("gradient vs basis", basis.dim(), g.len()));
    }
    Ok(())
}

/// `g - U (U^T g)` for the rows `U` of the basis.
pub fn project_out(basis: &SpectralBasis, g: &[f64]) -> Result<Vec<f64>> {
    let coeffs = basis.coefficients(g)?;
    let mut r = g.to_vec();
    for (row, c) in basis.eigenvectors.outer_iter().zip(coeffs) {
        for (ri, ui) in r.iter_mut().zip(row) {
            *ri -= c * ui;
        }
    }
    Ok(r)
}

/// `|| (I - U U^T) g ||`, the norm of the part of `g` outside the span of the
/// basis (the high-curvature directions).
pub fn extrapolation_score(basis: &SpectralBasis, g: &[f64]) -> Result<ScoreRecord> {
    check_dim(basis, g)?;
    let r = project_out(basis, g)?;
    Ok(ScoreRecord {
        value: norm(&r),
        variant: Variant::LePrediction,
        m_used: basis.m(),
        detail: Detail::None,
    })
}

/// `sqrt(||g||^2 - ||U^T g||^2)`, clamped at zero.
pub fn extrapolation_score_by_coefficients(basis: &SpectralBasis, g: &[f64]) -> Result<f64> {
    let coeffs = basis.coefficients(g)?;
    let total = g.iter().map(|v| v * v).sum::<f64>();
    let captured = coeffs.iter().map(|c| c * c).sum::<f64>();
    Ok((total - captured).max(0.0).sqrt())
}

/// Scores for several `m` from one basis, via cumulative sums of squared
/// coefficients. `ms` must be ascending and at most the basis size.
pub fn score_sweep(basis: &SpectralBasis, g: &[f64], ms: &[usize]) -> Result<Vec<ScoreRecord>> {
    check_dim(basis, g)?;
    if ms.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("m values must be sorted ascending".into()));
    }
    if let Some(&m) = ms.iter().find(|&&m| m > basis.m()) {
        return Err(Error::InvalidArgument(format!(
            "m = {m} exceeds the {} available eigenvectors",
            basis.m()
        )));
    }
    let coeffs = basis.coefficients(g)?;
    let total = g.iter().map(|v| v * v).sum::<f64>();
    let mut captured = 0.0;
    let mut j = 0;
    Ok(ms
        .iter()
        .map(|&m| {
            while j < m {
                captured += coeffs[j] * coeffs[j];
                j += 1;
            }
            ScoreRecord {
                value: (total - captured).max(0.0).sqrt(),
                variant: Variant::LePrediction,
                m_used: m,
                detail: Detail::None,
            }
        })
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Prediction-gradient score at `x` using the first `m` basis vectors.
pub fn le_prediction_score(
    spec: &MlpSpec,
    params: &ParamVector,
    basis: &SpectralBasis,
    m: usize,
    x: &[f64],
    select: OutputSelect,
) -> Result<ScoreRecord> {
    let basis = truncated(basis, m)?;
    let (g, output) = prediction_gradient(spec, params, x, select)?;
    let mut rec = extrapolation_score(&basis, &g)?;
    rec.detail = Detail::Output(output);
    Ok(rec)
}

fn truncated(basis: &SpectralBasis, m: usize) -> Result<SpectralBasis> {
    if m > basis.m() {
        return Err(Error::InvalidArgument(format!(
            "m = {m} exceeds the {} available eigenvectors",
            basis.m()
        )));
    }
    Ok(basis.truncate(m))
}

/// Loss-gradient score minimized over every possible label of a classifier.
pub fn le_loss_min_score(
    spec: &MlpSpec,
    params: &ParamVector,
    basis: &SpectralBasis,
    m: usize,
    x: &[f64],
) -> Result<ScoreRecord> {
    let Head::KClassLogits { k } = spec.head else {
        return Err(Error::HeadMismatch("le_loss_min needs a classifier head".into()));
    };
    let basis = truncated(basis, m)?;
    let per_label = (0..k)
        .map(|y| Ok(extrapolation_score(&basis, &example_loss_gradient(spec, params, x, y as f64)?)?.value))
        .collect::<Result<Vec<f64>>>()?;
    let (label, value) = min_with_index(&per_label);
    Ok(ScoreRecord {
        value,
        variant: Variant::LeLossMin,
        m_used: m,
        detail: Detail::Label(label),
    })
}

fn min_with_index(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Min,
}

/// Loss-gradient score for a regression model, aggregated over candidate targets.
pub fn le_loss_grid_score(
    spec: &MlpSpec,
    params: &ParamVector,
    basis: &SpectralBasis,
    m: usize,
    x: &[f64],
    grid: &[f64],
    agg: Aggregate,
) -> Result<ScoreRecord> {
    if spec.head != Head::ScalarRegression {
        return Err(Error::HeadMismatch("le_loss_grid needs a regression head".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("target grid is empty".into()));
    }
    let basis = truncated(basis, m)?;
    let per_point = grid
        .iter()
        .map(|&y| Ok(extrapolation_score(&basis, &example_loss_gradient(spec, params, x, y)?)?.value))
        .collect::<Result<Vec<f64>>>()?;
    let (i, value) = match agg {
        Aggregate::Min => min_with_index(&per_point),
    };
    Ok(ScoreRecord {
        value,
        variant: Variant::LeLossGrid,
        m_used: m,
        detail: Detail::GridPoint(grid[i]),
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Value of an inverse-Hessian quadratic form and how many eigenvalues had
/// to be clamped to the damping floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseHessianValue {
    pub value: f64,
    pub clamped: usize,
}

/// Damping floor relative to the largest |lambda|.
pub const DAMPING_RELATIVE: f64 = 1e-8;

fn inverse_power_form(full: &SpectralBasis, v: &[f64], power: i32) -> Result<InverseHessianValue> {
    check_dim(full, v)?;
    let largest = full.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let floor = DAMPING_RELATIVE * largest;
    let coeffs = full.coefficients(v)?;
    let mut clamped = 0;
    let mut value = 0.0;
    for (&lambda, c) in full.eigenvalues.iter().zip(coeffs) {
        let lambda = if lambda.abs() < floor || lambda == 0.0 {
            clamped += 1;
            if lambda < 0.0 {
                -floor
            } else {
                floor
            }
        } else {
            lambda
        };
        value += c * c / lambda.powi(power);
    }
    Ok(InverseHessianValue { value, clamped })
}

/// Laplace predictive variance `sum_j (xi_j^T g)^2 / lambda_j` over a full
/// spectrum. Eigenvalues with |lambda| below the floor are clamped to
/// `sign(lambda) * floor`.
pub fn laplace_variance(full: &SpectralBasis, g: &[f64]) -> Result<InverseHessianValue> {
    inverse_power_form(full, g, 1)
}

/// Influence magnitude `sum_j (xi_j^T v)^2 / lambda_j^2` for a training-loss gradient `v`.
pub fn influence_score(full: &SpectralBasis, v: &[f64]) -> Result<InverseHessianValue> {
    inverse_power_form(full, v, 2)
}

/// `1 - max softmax probability`.
pub fn maxprob_score(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<ScoreRecord> {
    if !spec.head.is_classifier() {
        return Err(Error::HeadMismatch("maxprob needs a classifier head".into()));
    }
    let logits = predict(spec, params, x)?;
    let probs = softmax(ArrayView1::from(&logits));
    let max = probs.fold(0.0_f64, |m, &p| m.max(p));
    Ok(ScoreRecord {
        value: (1.0 - max).max(0.0),
        variant: Variant::Maxprob,
        m_used: 0,
        detail: Detail::None,
    })
}

/// Minimum Euclidean distance from `query` to any row of `reference`.
pub fn nn_distance(reference: ArrayView2<f64>, query: &[f64]) -> Result<f64> {
    if reference.nrows() == 0 {
        return Err(Error::InvalidArgument("nearest-neighbour reference set is empty".into()));
    }
    if reference.ncols() != query.len() {
        return Err(Error::dim("query vs reference space", reference.ncols(), query.len()));
    }
    let best = reference
        .outer_iter()
        .map(|row| row.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_params, Activation};
    use crate::spectral::Provenance;
    use ndarray::{array, Array2};

    fn basis(values: Vec<f64>, vectors: Array2<f64>) -> SpectralBasis {
        SpectralBasis::new(
            values,
            vectors,
            Provenance {
                model_digest: String::new(),
                batch_policy: "full".into(),
                seed: 0,
                iterations: 0,
                config_digest: String::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn hand_projection() {
        let b = basis(vec![1.0], array![[1.0, 0.0, 0.0]]);
        let rec = extrapolation_score(&b, &[1.0, 2.0, 2.0]).unwrap();
        assert!((rec.value - 8.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(rec.m_used, 1);
    }

    #[test]
    fn in_span_and_orthogonal_vectors() {
        let s = 0.5_f64.sqrt();
        let b = basis(vec![2.0, 1.0], array![[s, s, 0.0], [0.0, 0.0, 1.0]]);
        assert!(extrapolation_score(&b, &[s, s, 0.0]).unwrap().value < 1e-10);
        let orth = [3.0 * s, -3.0 * s, 0.0];
        assert!((extrapolation_score(&b, &orth).unwrap().value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let b = basis(vec![1.0], array![[1.0, 0.0, 0.0]]);
        assert!(extrapolation_score(&b, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sweep_edges() {
        let b = basis(vec![3.0, 2.0], array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let g = [1.0, 2.0, 0.0];
        let recs = score_sweep(&b, &g, &[0, 1, 2]).unwrap();
        assert!((recs[0].value - 5.0_f64.sqrt()).abs() < 1e-15);
        assert!((recs[1].value - 2.0).abs() < 1e-15);
        assert_eq!(recs[2].value, 0.0);
        assert!(score_sweep(&b, &g, &[3]).is_err());
        assert!(score_sweep(&b, &g, &[2, 1]).is_err());
    }

    #[test]
    fn laplace_and_influence_by_hand() {
        let b = basis(vec![2.0, 0.5], array![[1.0, 0.0], [0.0, 1.0]]);
        let l = laplace_variance(&b, &[1.0, 1.0]).unwrap();
        assert!((l.value - 2.5).abs() < 1e-15);
        assert_eq!(l.clamped, 0);
        let i = influence_score(&b, &[1.0, 1.0]).unwrap();
        assert!((i.value - 4.25).abs() < 1e-15);

        let eye = basis(vec![1.0, 1.0, 1.0], Array2::eye(3));
        assert!((laplace_variance(&eye, &[1.0, 2.0, 2.0]).unwrap().value - 9.0).abs() < 1e-15);
        assert!((influence_score(&eye, &[1.0, 2.0, 2.0]).unwrap().value - 9.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_eigenvalues_are_clamped() {
        let b = basis(vec![1.0, -1e-13, 0.0], Array2::eye(3));
        let l = laplace_variance(&b, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l.clamped, 2);
        assert!(l.value.is_finite());
    }

    #[test]
    fn maxprob_examples() {
        let spec = MlpSpec::new(1, vec![], Activation::Tanh, Head::KClassLogits { k: 2 });
        let zero = ParamVector::zeros(spec.param_count());
        assert!((maxprob_score(&spec, &zero, &[1.0]).unwrap().value - 0.5).abs() < 1e-15);
        // logits (50, 0) via biases
        let sat = ParamVector(vec![0.0, 0.0, 50.0, 0.0]);
        assert!(maxprob_score(&spec, &sat, &[1.0]).unwrap().value < 1e-20);
        let ten = MlpSpec::new(1, vec![], Activation::Tanh, Head::KClassLogits { k: 10 });
        let zero = ParamVector::zeros(ten.param_count());
        assert!((maxprob_score(&ten, &zero, &[0.3]).unwrap().value - 0.9).abs() < 1e-15);
        let reg = MlpSpec::new(1, vec![], Activation::Tanh, Head::ScalarRegression);
        assert!(maxprob_score(&reg, &ParamVector::zeros(2), &[0.0]).is_err());
    }

    #[test]
    fn nn_distance_examples() {
        let r = array![[0.0, 0.0]];
        assert_eq!(nn_distance(r.view(), &[3.0, 4.0]).unwrap(), 5.0);
        let r = array![[1.0, 1.0], [2.0, -1.0]];
        assert_eq!(nn_distance(r.view(), &[2.0, -1.0]).unwrap(), 0.0);
        assert!(nn_distance(Array2::<f64>::zeros((0, 2)).view(), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn loss_min_requires_classifier_and_grid_requires_regression() {
        let reg = MlpSpec::new(1, vec![2], Activation::Tanh, Head::ScalarRegression);
        let p = init_params(&reg, 0).unwrap();
        let b = basis(vec![], Array2::zeros((0, reg.param_count())));
        assert!(matches!(le_loss_min_score(&reg, &p, &b, 0, &[0.5]), Err(Error::HeadMismatch(_))));
        assert!(le_loss_grid_score(&reg, &p, &b, 0, &[0.5], &[], Aggregate::Min).is_err());

        let clf = MlpSpec::new(1, vec![2], Activation::Tanh, Head::KClassLogits { k: 2 });
        let p = init_params(&clf, 0).unwrap();
        let b = basis(vec![], Array2::zeros((0, clf.param_count())));
        assert!(le_loss_grid_score(&clf, &p, &b, 0, &[0.5], &[0.0], Aggregate::Min).is_err());
    }

    #[test]
    fn loss_min_picks_smaller_label() {
        // A 2-class model whose loss gradients at the two labels are exact
        // negatives of each other has tied per-label scores.
        let clf = MlpSpec::new(1, vec![], Activation::Tanh, Head::KClassLogits { k: 2 });
        let zero = ParamVector::zeros(clf.param_count());
        let b = basis(vec![], Array2::zeros((0, clf.param_count())));
        let rec = le_loss_min_score(&clf, &zero, &b, 0, &[0.7]).unwrap();
        let g0 = example_loss_gradient(&clf, &zero, &[0.7], 0.0).unwrap();
        assert!((rec.value - g0.norm()).abs() < 1e-15);
        assert!(matches!(rec.detail, Detail::Label(0)));

        // Biased toward class 1: label 1 has the smaller loss gradient.
        let biased = ParamVector(vec![0.0, 0.0, 0.0, 2.0]);
        let rec = le_loss_min_score(&clf, &biased, &b, 0, &[0.7]).unwrap();
        assert!(matches!(rec.detail, Detail::Label(1)));
    }

    #[test]
    fn grid_containing_prediction_scores_zero() {
        let spec = MlpSpec::new(1, vec![3], Activation::Tanh, Head::ScalarRegression);
        let p = init_params(&spec, 2).unwrap();
        let x = [0.4];
        let yhat = predict(&spec, &p, &x).unwrap()[0];
        let b = basis(vec![], Array2::zeros((0, spec.param_count())));
        let rec = le_loss_grid_score(&spec, &p, &b, 0, &x, &[-1.0, yhat, 1.0], Aggregate::Min).unwrap();
        assert_eq!(rec.value, 0.0);
        assert_eq!(rec.detail, Detail::GridPoint(yhat));

        let single = le_loss_grid_score(&spec, &p, &b, 0, &x, &[0.3], Aggregate::Min).unwrap();
        let g = example_loss_gradient(&spec, &p, &x, 0.3).unwrap();
        assert!((single.value - g.norm()).abs() < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-1.0, 1.0, 10);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[9], 1.0);
    }
}
