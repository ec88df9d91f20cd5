//! Pool-based active learning with extrapolation-score acquisition.

use std::collections::BTreeMap;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::result::ExperimentResult;
use crate::autodiff::{argmax_slice, predict_batch};
use crate::error::{Error, Result};
use crate::mlp::{Batch, Head, MlpSpec, ParamVector};
use crate::score::le_loss_min_score;
use crate::spectral::{estimate_basis, SpectralConfig};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    LeLossMin,
    Random,
}

impl Acquisition {
    pub fn name(&self) -> &'static str {
        match self {
            Acquisition::LeLossMin => "le_loss_min",
            Acquisition::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveConfig {
    pub acquisitions: Vec<Acquisition>,
    pub rounds: usize,
    pub pool_size: usize,
    pub per_round: usize,
    pub init_per_class: usize,
    /// Labelled rows held out for early stopping.
    pub valid_size: usize,
    pub test_size: usize,
    /// Draw a new pool every round; otherwise one pool is drawn up front.
    pub fresh_pool: bool,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub spectral: SpectralConfig,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        ActiveConfig {
            acquisitions: vec![Acquisition::LeLossMin, Acquisition::Random],
            rounds: 15,
            pool_size: 500,
            per_round: 10,
            init_per_class: 2,
            valid_size: 100,
            test_size: 500,
            fresh_pool: true,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            spectral: SpectralConfig::default(),
        }
    }
}

/// For each seed: hold out test and validation rows, start from
/// `init_per_class` labelled examples of every class, then alternate
/// training and acquiring `per_round` points from a random pool. Both
/// acquisitions share the seed's split and initial set. Test error is
/// recorded after every training, so there are `rounds + 1` entries.
pub fn active_learning_experiment(dataset: &Dataset, spec: &MlpSpec, config: &ActiveConfig) -> Result<ExperimentResult> {
    let Head::KClassLogits { k } = spec.head else {
        return Err(Error::HeadMismatch("active learning needs a classifier head".into()));
    };
    if config.acquisitions.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidArgument("active learning needs acquisitions and seeds".into()));
    }
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = Split::new(dataset, k, config, seed)?;
            config
                .acquisitions
                .par_iter()
                .map(|&acq| run(dataset, spec, config, &split, acq, seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = ExperimentResult::new("active_learning", &config.seeds);
    out.echo("spec", spec);
    let acqs: Vec<&str> = config.acquisitions.iter().map(|a| a.name()).collect();
    out.echo("acquisitions", acqs.join(","));
    out.echo("rounds", config.rounds);
    out.echo("pool_size", config.pool_size);
    out.echo("per_round", config.per_round);
    out.echo("init_per_class", config.init_per_class);
    out.echo("valid_size", config.valid_size);
    out.echo("test_size", config.test_size);
    out.echo("fresh_pool", config.fresh_pool);
    out.echo("train", format!("{:?}", config.train));
    out.echo("spectral", format!("{:?}", config.spectral));
    for r in runs.into_iter().flatten() {
        out.merge(r);
    }
    Ok(out)
}

struct Split {
    test: Batch,
    valid: Batch,
    initial: Vec<usize>,
    unlabelled: Vec<usize>,
}

impl Split {
    fn new(ds: &Dataset, k: usize, config: &ActiveConfig, seed: u64) -> Result<Split> {
        let n = ds.len();
        let needed = config.test_size + config.valid_size + k * config.init_per_class;
        if n < needed {
            return Err(Error::InvalidArgument(format!("{n} rows cannot cover test, validation and initial sets ({needed})")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, rest) = order.split_at(config.test_size);
        let (valid, rest) = rest.split_at(config.valid_size);

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in rest {
            by_class.entry(ds.targets[i] as usize).or_default().push(i);
        }
        let mut initial = Vec::with_capacity(k * config.init_per_class);
        for class in 0..k {
            let rows = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
            if rows.len() < config.init_per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} unlabelled examples, need {}",
                    rows.len(),
                    config.init_per_class
                )));
            }
            initial.extend_from_slice(&rows[..config.init_per_class]);
        }
        let unlabelled = rest.iter().copied().filter(|i| !initial.contains(i)).collect();
        Ok(Split {
            test: rows_batch(ds, test)?,
            valid: rows_batch(ds, valid)?,
            initial,
            unlabelled,
        })
    }
}

fn rows_batch(ds: &Dataset, rows: &[usize]) -> Result<Batch> {
    Batch::new(
        ds.features.select(ndarray::Axis(0), rows),
        rows.iter().map(|&i| ds.targets[i]).collect(),
    )
}

fn error_rate(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let logits = predict_batch(spec, params, batch.inputs.view())?;
    let wrong = logits
        .outer_iter()
        .zip(&batch.targets)
        .filter(|(row, &y)| argmax_slice(row.as_slice().expect("row-major")) != y as usize)
        .count();
    Ok(wrong as f64 / batch.len() as f64)
}

fn run(
    ds: &Dataset,
    spec: &MlpSpec,
    config: &ActiveConfig,
    split: &Split,
    acq: Acquisition,
    seed: u64,
) -> Result<ExperimentResult> {
    let mut out = ExperimentResult::new("active_learning", &[seed]);
    let mut labelled = split.initial.clone();
    let mut unlabelled = split.unlabelled.clone();
    let mut pool_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    let mut fixed_pool: Vec<usize> = Vec::new();
    if !config.fresh_pool {
        fixed_pool = draw(&unlabelled, config.pool_size, &mut pool_rng);
    }

    for round in 0..=config.rounds {
        let batch = rows_batch(ds, &labelled)?;
        let model = train(spec, &batch, &split.valid, &config.train.with_seed(seed * 1_000 + round as u64))?;
        let err = error_rate(spec, &model.params, &split.test)?;
        out.record(format!("error_{}_round{round}", acq.name()), seed, err);
        if round == config.rounds {
            out.record(format!("final_error_{}", acq.name()), seed, err);
            out.record(format!("final_train_size_{}", acq.name()), seed, labelled.len() as f64);
            break;
        }

        let pool = if config.fresh_pool {
            draw(&unlabelled, config.pool_size, &mut pool_rng)
        } else {
            fixed_pool.clone()
        };
        let take = config.per_round.min(pool.len());
        let chosen: Vec<usize> = match acq {
            Acquisition::Random => draw(&pool, take, &mut pick_rng),
            Acquisition::LeLossMin => {
                let spectral = SpectralConfig {
                    seed: config.spectral.seed ^ (seed * 1_000 + round as u64),
                    ..config.spectral.clone()
                };
                let basis = estimate_basis(spec, &model.params, &batch, &spectral)?;
                let m = spectral.m.min(basis.m());
                let scores = pool
                    .par_iter()
                    .map(|&i| {
                        let x = ds.features.row(i).to_vec();
                        Ok(le_loss_min_score(spec, &model.params, &basis, m, &x)?.value)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let mut ranked: Vec<usize> = (0..pool.len()).collect();
                ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                ranked[..take].iter().map(|&r| pool[r]).collect()
            }
        };
        labelled.extend_from_slice(&chosen);
        unlabelled.retain(|i| !chosen.contains(i));
        fixed_pool.retain(|i| !chosen.contains(i));
    }
    Ok(out)
}

fn draw(from: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = n.min(from.len());
    sample(rng, from.len(), n).into_iter().map(|i| from[i]).collect()
}
