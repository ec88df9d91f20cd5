//! Mean extrapolation score across a seed ensemble vs the ensemble's
//! prediction spread.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Role};
use super::metrics::{pearson, pearson_log_log};
use super::prediction_score_sweep;
use super::result::{ExperimentResult, Table};
use crate::error::{Error, Result};
use crate::mlp::{Head, MlpSpec};
use crate::spectral::{estimate_basis, SpectralConfig};
use crate::train::{ensemble_prediction_sd, train_ensemble, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub train: TrainConfig,
    pub spectral: SpectralConfig,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub normalize_targets: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_members: 20,
            train: TrainConfig::default(),
            spectral: SpectralConfig {
                m: 50,
                ..SpectralConfig::default()
            },
            train_fraction: 0.7,
            valid_fraction: 0.15,
            normalize_targets: true,
        }
    }
}

/// Splits `dataset` with `seed`, trains `n_members` models differing only in
/// initialization seed, and for each test point compares the members' mean
/// extrapolation score with the SD of their predictions. Pearson R is
/// reported on raw and log-log values, along with the mean per-member R.
pub fn ensemble_correlation_experiment(
    dataset: &Dataset,
    spec: &MlpSpec,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<ExperimentResult> {
    if spec.head != Head::ScalarRegression {
        return Err(Error::HeadMismatch("ensemble correlation needs a regression head".into()));
    }
    if config.n_members < 2 {
        return Err(Error::InvalidArgument("ensemble needs at least two members".into()));
    }
    let test_fraction = 1.0 - config.train_fraction - config.valid_fraction;
    let mut ds = dataset.clone();
    ds.assign_roles(
        &[
            (Role::Train, config.train_fraction),
            (Role::Valid, config.valid_fraction),
            (Role::Test, test_fraction),
        ],
        seed,
    )?;
    ds.normalize()?;
    if config.normalize_targets {
        ds.normalize_targets()?;
    }
    let train_batch = ds.batch(Role::Train)?;
    let valid_batch = ds.batch(Role::Valid)?;
    let test = ds.features_of(Role::Test);

    let member_seeds: Vec<u64> = (0..config.n_members as u64).map(|i| seed * 1_000 + i).collect();
    let models = train_ensemble(spec, &train_batch, &valid_batch, &config.train, &member_seeds)?;
    let m = config.spectral.m;
    let member_scores = models
        .par_iter()
        .map(|model| {
            let spectral = SpectralConfig {
                seed: config.spectral.seed ^ model.config.seed,
                ..config.spectral.clone()
            };
            let basis = estimate_basis(spec, &model.params, &train_batch, &spectral)?;
            let m_used = m.min(basis.m());
            Ok(prediction_score_sweep(spec, &model.params, &basis, test.view(), &[m_used])?.remove(0))
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let n_test = test.nrows();
    let mean_scores: Vec<f64> = (0..n_test)
        .map(|i| member_scores.iter().map(|s| s[i]).sum::<f64>() / models.len() as f64)
        .collect();
    let sds = test
        .outer_iter()
        .map(|x| ensemble_prediction_sd(&models, &x.to_vec()))
        .collect::<Result<Vec<f64>>>()?;

    let mut out = ExperimentResult::new("ensemble_correlation", &[seed]);
    out.echo("spec", spec);
    out.echo("n_members", config.n_members);
    out.echo("m", m);
    out.echo("train", format!("{:?}", config.train));
    out.echo("spectral", format!("{:?}", config.spectral));
    out.echo("split", format!("train {} / valid {} / test {test_fraction:.4}", config.train_fraction, config.valid_fraction));
    out.echo("normalize_targets", config.normalize_targets);
    out.echo("rows", format!("{} train, {} valid, {} test", train_batch.len(), valid_batch.len(), n_test));

    out.record("pearson_raw", seed, pearson(&mean_scores, &sds)?);
    if let Some(r) = pearson_log_log(&mean_scores, &sds)? {
        out.record("pearson_log_log", seed, r);
    }
    let per_member: Vec<f64> = member_scores
        .iter()
        .map(|s| pearson(s, &sds))
        .collect::<Result<Vec<f64>>>()?;
    out.record("pearson_per_member_mean", seed, per_member.iter().sum::<f64>() / per_member.len() as f64);
    out.record("mean_ensemble_sd", seed, sds.iter().sum::<f64>() / n_test as f64);

    let mut table = Table::new(format!("points_seed{seed}"), &["test_index", "mean_score", "ensemble_sd"]);
    for i in 0..n_test {
        table.push(vec![i as f64, mean_scores[i], sds[i]]);
    }
    out.tables.push(table);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn synthetic() -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((120, 2), |_| rng.gen_range(-1.0..1.0));
        let targets = feats.outer_iter().map(|r| r[0] - 0.5 * r[1]).collect();
        Dataset::new(vec!["a".into(), "b".into()], "y".into(), feats, targets).unwrap()
    }

    #[test]
    fn small_ensemble_runs_and_is_reproducible() {
        let spec = MlpSpec::new(2, vec![4], Activation::Tanh, Head::ScalarRegression);
        let config = EnsembleConfig {
            n_members: 3,
            train: TrainConfig {
                max_steps: 200,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            spectral: SpectralConfig {
                m: 3,
                ..SpectralConfig::default()
            },
            ..EnsembleConfig::default()
        };
        let a = ensemble_correlation_experiment(&synthetic(), &spec, &config, 1).unwrap();
        assert_eq!(a, ensemble_correlation_experiment(&synthetic(), &spec, &config, 1).unwrap());
        let r = a.values_of("pearson_raw")[0];
        assert!((-1.0..=1.0).contains(&r));
        assert_eq!(a.table("points_seed1").unwrap().rows.len(), 18);
    }

    #[test]
    fn rejects_classifier_and_tiny_ensembles() {
        let clf = MlpSpec::new(2, vec![4], Activation::Tanh, Head::KClassLogits { k: 2 });
        assert!(ensemble_correlation_experiment(&synthetic(), &clf, &EnsembleConfig::default(), 0).is_err());
        let spec = MlpSpec::new(2, vec![4], Activation::Tanh, Head::ScalarRegression);
        let one = EnsembleConfig {
            n_members: 1,
            ..EnsembleConfig::default()
        };
        assert!(ensemble_correlation_experiment(&synthetic(), &spec, &one, 0).is_err());
    }
}
