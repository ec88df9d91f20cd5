//! Datasets, metrics and the experiment drivers.

mod active;
pub mod data;
mod ensemble;
pub mod metrics;
mod proposition;
mod result;
mod simulated;
mod toy;

use ndarray::ArrayView2;
use rayon::prelude::*;

pub use active::{active_learning_experiment, Acquisition, ActiveConfig};
pub use data::{binarize, gen_simulated_features, gen_toy_sin, load_csv, Dataset, NormStat, Role, SimulatedData, SimulatedFeature};
pub use ensemble::{ensemble_correlation_experiment, EnsembleConfig};
pub use metrics::{auc, mean_sd, pearson, pearson_log_log};
pub use proposition::{proposition_check, proposition_check_gradient, PropositionCheck};
pub use result::{ExperimentResult, MetricValue, Table, RESULT_FORMAT_VERSION};
pub use simulated::{simulated_features_experiment, SimulatedConfig};
pub use toy::{toy_ood_experiment, toy_spec, ToyOodConfig};

use crate::autodiff::{prediction_gradient, OutputSelect};
use crate::error::Result;
use crate::mlp::{MlpSpec, ParamVector};
use crate::score::score_sweep;
use crate::spectral::SpectralBasis;

/// Prediction-gradient scores for every row at every `m`, indexed `[m][row]`.
pub(crate) fn prediction_score_sweep(
    spec: &MlpSpec,
    params: &ParamVector,
    basis: &SpectralBasis,
    rows: ArrayView2<f64>,
    ms: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let per_row = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let x = rows.row(i).to_vec();
            let (g, _) = prediction_gradient(spec, params, &x, OutputSelect::default())?;
            Ok(score_sweep(basis, &g, ms)?.into_iter().map(|r| r.value).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(transpose(per_row, ms.len()))
}

pub(crate) fn transpose(per_row: Vec<Vec<f64>>, width: usize) -> Vec<Vec<f64>> {
    (0..width).map(|k| per_row.iter().map(|r| r[k]).collect()).collect()
}

/// Ascending, deduplicated copy.
pub(crate) fn sorted_ms(ms: &[usize]) -> Vec<usize> {
    let mut v = ms.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}
