//! OOD detection of inputs that break a collinearity among features.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{gen_simulated_features, Dataset, Role};
use super::metrics::auc;
use super::prediction_score_sweep;
use super::result::ExperimentResult;
use crate::autodiff::activation_matrices;
use crate::error::{Error, Result};
use crate::mlp::{Activation, Head, MlpSpec};
use crate::score::nn_distance;
use crate::spectral::{estimate_basis, BatchPolicy, SpectralConfig};
use crate::train::{train, Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatedConfig {
    pub n_feats_list: Vec<usize>,
    pub sigma_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub spectral: SpectralConfig,
    /// Cap on the number of in-distribution and OOD test rows each.
    pub max_test_rows: usize,
}

impl Default for SimulatedConfig {
    fn default() -> Self {
        SimulatedConfig {
            n_feats_list: vec![4],
            sigma_list: vec![0.0, 0.1, 0.2, 0.5],
            seeds: (0..5).collect(),
            hidden_widths: vec![20, 100],
            activation: Activation::Relu,
            train: TrainConfig {
                batch_size: 64,
                optimizer: Optimizer::Adam,
                ..TrainConfig::default()
            },
            spectral: SpectralConfig {
                m: 1000,
                batch_policy: BatchPolicy::Minibatch {
                    batch_size: 32,
                    batches: 5,
                    seed: 0,
                },
                ..SpectralConfig::default()
            },
            max_test_rows: 1000,
        }
    }
}

pub(crate) fn sigma_key(sigma: f64) -> String {
    format!("{sigma}")
}

/// For every (number of simulated features, noise SD, seed): build the
/// data, train a regressor on the in-distribution train rows, and report the
/// AUC of telling OOD rows from in-distribution test rows with the
/// prediction-gradient score and three nearest-neighbour baselines
/// (inputs, all hidden activations, final hidden layer) whose reference set
/// is the validation split.
pub fn simulated_features_experiment(base: &Dataset, config: &SimulatedConfig) -> Result<ExperimentResult> {
    if config.seeds.is_empty() || config.n_feats_list.is_empty() || config.sigma_list.is_empty() {
        return Err(Error::InvalidArgument("simulated features experiment needs seeds, feature counts and sigmas".into()));
    }
    let cells: Vec<(usize, f64, u64)> = config
        .n_feats_list
        .iter()
        .flat_map(|&n| {
            config
                .sigma_list
                .iter()
                .flat_map(move |&s| config.seeds.iter().map(move |&seed| (n, s, seed)))
        })
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(n, sigma, seed)| run_cell(base, config, n, sigma, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut out = ExperimentResult::new("simulated_features", &config.seeds);
    out.echo("n_feats_list", format!("{:?}", config.n_feats_list));
    out.echo("sigma_list", format!("{:?}", config.sigma_list));
    out.echo("hidden_widths", format!("{:?}", config.hidden_widths));
    out.echo("activation", format!("{:?}", config.activation));
    out.echo("train", format!("{:?}", config.train));
    out.echo("spectral", format!("{:?}", config.spectral));
    out.echo("max_test_rows", config.max_test_rows);
    out.echo("base_rows", base.len());
    out.echo("base_features", base.dim());
    for r in runs {
        out.merge(r);
    }
    Ok(out)
}

fn run_cell(base: &Dataset, config: &SimulatedConfig, n_feats: usize, sigma: f64, seed: u64) -> Result<ExperimentResult> {
    let sim = gen_simulated_features(base, n_feats, sigma, seed)?;
    let mut in_dist = sim.in_dist;
    in_dist.normalize_targets()?;
    let spec = MlpSpec::new(in_dist.dim(), config.hidden_widths.clone(), config.activation, Head::ScalarRegression);
    let train_batch = in_dist.batch(Role::Train)?;
    let valid = in_dist.features_of(Role::Valid);
    let model = train(&spec, &train_batch, &in_dist.batch(Role::Valid)?, &config.train.with_seed(seed))?;
    let params = &model.params;

    let spectral = SpectralConfig {
        seed: config.spectral.seed ^ seed,
        ..config.spectral.clone()
    };
    let basis = estimate_basis(&spec, params, &train_batch, &spectral)?;
    let m = spectral.m.min(basis.m());

    let cap = |a: Array2<f64>| {
        let n = a.nrows().min(config.max_test_rows);
        a.slice(s![..n, ..]).to_owned()
    };
    let test = cap(in_dist.features_of(Role::Test));
    let ood = cap(sim.ood.features.clone());

    let key = format!("n{n_feats}_s{}", sigma_key(sigma));
    let mut out = ExperimentResult::new("simulated_features", &[seed]);
    let le_in = prediction_score_sweep(&spec, params, &basis, test.view(), &[m])?.remove(0);
    let le_out = prediction_score_sweep(&spec, params, &basis, ood.view(), &[m])?.remove(0);
    out.record(format!("auc_le_{key}"), seed, auc(&le_out, &le_in)?);
    out.record(format!("m_used_{key}"), seed, m as f64);

    let (valid_concat, valid_final) = activation_matrices(&spec, params, valid.view())?;
    let (test_concat, test_final) = activation_matrices(&spec, params, test.view())?;
    let (ood_concat, ood_final) = activation_matrices(&spec, params, ood.view())?;
    let spaces = [
        ("nn_input", &valid, &test, &ood),
        ("nn_reprs", &valid_concat, &test_concat, &ood_concat),
        ("nn_final", &valid_final, &test_final, &ood_final),
    ];
    for (name, reference, inside, outside) in spaces {
        let dist = |rows: &Array2<f64>| {
            rows.outer_iter()
                .map(|q| nn_distance(reference.view(), &q.to_vec()))
                .collect::<Result<Vec<f64>>>()
        };
        out.record(format!("auc_{name}_{key}"), seed, auc(&dist(outside)?, &dist(inside)?)?);
    }
    Ok(out)
}
