//! OOD detection on the one-dimensional sine task.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{gen_toy_sin, Role, TOY_TEST_RANGE};
use super::metrics::auc;
use super::result::{ExperimentResult, Table};
use super::{prediction_score_sweep, sorted_ms, transpose};
use crate::autodiff::{example_loss_gradient, loss_sum, predict_scalar};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Head, MlpSpec};
use crate::score::{linspace, score_sweep};
use crate::spectral::{dense_eig, dense_hessian, lanczos, model_digest, ritz, HvpOperator, Provenance, Reorth};
use crate::train::{train, TrainConfig};

/// Two hidden layers of three tanh units, scalar output.
pub fn toy_spec() -> MlpSpec {
    MlpSpec::new(1, vec![3, 3], Activation::Tanh, Head::ScalarRegression)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyOodConfig {
    pub m_values: Vec<usize>,
    pub train: TrainConfig,
    pub noisy: bool,
    /// Candidate targets for the loss-gradient variant.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// Points in the exported score-vs-x curves.
    pub curve_points: usize,
    /// Best-AUC search range for `m`, inclusive.
    pub best_m_lo: usize,
    pub best_m_hi: usize,
}

impl Default for ToyOodConfig {
    fn default() -> Self {
        ToyOodConfig {
            m_values: (0..=15).collect(),
            train: TrainConfig {
                batch_size: 32,
                learning_rate: 0.01,
                max_steps: 400,
                ..TrainConfig::default()
            },
            noisy: true,
            grid_lo: -1.0,
            grid_hi: 1.0,
            grid_points: 10,
            curve_points: 141,
            best_m_lo: 2,
            best_m_hi: 15,
        }
    }
}

/// Per seed: generate the data, train the toy model, run Lanczos to
/// exhaustion and score test (in-distribution) against OOD points for each
/// `m`. Also exports score curves over the test range and the Ritz pairs
/// next to the dense eigendecomposition.
pub fn toy_ood_experiment(config: &ToyOodConfig, seeds: &[u64]) -> Result<ExperimentResult> {
    let ms = sorted_ms(&config.m_values);
    if ms.is_empty() {
        return Err(Error::InvalidArgument("toy experiment needs at least one m".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| toy_seed(config, &ms, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ExperimentResult::new("toy_ood", seeds);
    echo_config(&mut out, config, &ms);
    for r in runs {
        out.merge(r);
    }
    Ok(out)
}

fn echo_config(out: &mut ExperimentResult, c: &ToyOodConfig, ms: &[usize]) {
    let spec = toy_spec();
    out.echo("spec", &spec);
    out.echo("m_values", format!("{ms:?}"));
    out.echo("noisy", c.noisy);
    out.echo("grid", format!("linspace({}, {}, {})", c.grid_lo, c.grid_hi, c.grid_points));
    out.echo("best_m_range", format!("[{}, {}]", c.best_m_lo, c.best_m_hi));
    out.echo("train", format!("{:?}", c.train));
    out.echo("validation", "in-distribution test rows");
    out.echo("score", "le_prediction (gated), le_loss_grid (reported)");
}

fn toy_seed(config: &ToyOodConfig, ms: &[usize], seed: u64) -> Result<ExperimentResult> {
    let spec = toy_spec();
    let ds = gen_toy_sin(seed, config.noisy);
    let train_batch = ds.batch(Role::Train)?;
    let test = ds.features_of(Role::Test);
    let ood = ds.features_of(Role::Ood);
    let model = train(&spec, &train_batch, &ds.batch(Role::Test)?, &config.train.with_seed(seed))?;
    let params = &model.params;
    let p = spec.param_count();

    let op = HvpOperator::full_batch(&spec, params, &train_batch)?;
    let factor = lanczos(&op, p, seed, Reorth::TwoStepCgs)?;
    let provenance = Provenance {
        model_digest: model_digest(&spec, params),
        batch_policy: op.policy().tag(),
        seed,
        iterations: factor.m(),
        config_digest: String::new(),
    };
    let basis = ritz(&factor, provenance)?;
    if let Some(&m) = ms.iter().find(|&&m| m > basis.m()) {
        return Err(Error::InvalidArgument(format!(
            "m = {m} exceeds the {} Ritz pairs found for seed {seed}",
            basis.m()
        )));
    }
    let dense = dense_eig(&dense_hessian(&spec, params, &train_batch)?)?;

    let mut out = ExperimentResult::new("toy_ood", &[seed]);
    out.record("train_loss_sum", seed, loss_sum(&spec, params, &train_batch)?);
    out.record("best_step", seed, model.best_step as f64);
    out.record("lanczos_iterations", seed, basis.m() as f64);

    let test_scores = prediction_score_sweep(&spec, params, &basis, test.view(), ms)?;
    let ood_scores = prediction_score_sweep(&spec, params, &basis, ood.view(), ms)?;
    let grid = linspace(config.grid_lo, config.grid_hi, config.grid_points);
    let test_grid = loss_grid_sweep(&spec, params, &basis, &test, &grid, ms)?;
    let ood_grid = loss_grid_sweep(&spec, params, &basis, &ood, &grid, ms)?;

    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &m) in ms.iter().enumerate() {
        let a = auc(&ood_scores[k], &test_scores[k])?;
        out.record(format!("auc_le_prediction_m{m}"), seed, a);
        out.record(format!("auc_le_loss_grid_m{m}"), seed, auc(&ood_grid[k], &test_grid[k])?);
        if (config.best_m_lo..=config.best_m_hi).contains(&m) && a > best.0 {
            best = (a, m);
        }
    }
    if best.0.is_finite() {
        out.record("best_auc", seed, best.0);
        out.record("best_m", seed, best.1 as f64);
    }

    // Score curves over the whole test range.
    let xs = linspace(TOY_TEST_RANGE.0, TOY_TEST_RANGE.1, config.curve_points);
    let grid_x = Array2::from_shape_vec((xs.len(), 1), xs.clone()).expect("column");
    let curves = prediction_score_sweep(&spec, params, &basis, grid_x.view(), ms)?;
    let mut cols = vec!["x".to_string(), "prediction".to_string()];
    cols.extend(ms.iter().map(|m| format!("score_m{m}")));
    let mut curve = Table::with_columns(format!("curve_seed{seed}"), cols);
    for (i, &x) in xs.iter().enumerate() {
        let mut row = vec![x, predict_scalar(&spec, params, &[x])?];
        row.extend(curves.iter().map(|c| c[i]));
        curve.push(row);
    }
    out.tables.push(curve);

    // Ritz pairs against the dense decomposition, matched by position.
    let mut spectrum = Table::new(
        format!("spectrum_seed{seed}"),
        &["index", "ritz_value", "dense_value", "abs_cosine", "residual_estimate"],
    );
    let mut worst_rel = 0.0_f64;
    for j in 0..basis.m().min(dense.values.len()) {
        let cos = basis.vector(j).dot(&dense.vectors.row(j)).abs();
        let (r, d) = (basis.eigenvalues[j], dense.values[j]);
        worst_rel = worst_rel.max((r - d).abs() / d.abs().max(f64::MIN_POSITIVE));
        spectrum.push(vec![j as f64, r, d, cos, basis.residuals.get(j).copied().unwrap_or(f64::NAN)]);
    }
    out.record("ritz_max_rel_err", seed, worst_rel);
    out.tables.push(spectrum);
    Ok(out)
}

/// Loss-gradient scores minimized over candidate targets, indexed `[m][row]`.
fn loss_grid_sweep(
    spec: &MlpSpec,
    params: &crate::mlp::ParamVector,
    basis: &crate::spectral::SpectralBasis,
    rows: &Array2<f64>,
    grid: &[f64],
    ms: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let per_row = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let x = rows.row(i).to_vec();
            let mut best = vec![f64::INFINITY; ms.len()];
            for &y in grid {
                let g = example_loss_gradient(spec, params, &x, y)?;
                for (b, r) in best.iter_mut().zip(score_sweep(basis, &g, ms)?) {
                    *b = b.min(r.value);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(transpose(per_row, ms.len()))
}
