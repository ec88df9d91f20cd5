//! Minibatch training with running-average early stopping, and seed ensembles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{loss, loss_and_gradient, predict, Reduction};
use crate::error::{Error, Result};
use crate::mlp::{init_params, Batch, MlpSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub patience_steps: usize,
    pub running_avg_window: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            patience_steps: 100,
            running_avg_window: 100,
            max_steps: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("patience_steps", self.patience_steps),
            ("running_avg_window", self.running_avg_window),
            ("max_steps", self.max_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// Mean loss of the minibatch used at this step (initial full-train loss at step 0).
    pub train_loss: f64,
    /// Mean validation loss after the step's update.
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub history: Vec<HistoryEntry>,
    pub config: TrainConfig,
    /// Step whose parameters were returned.
    pub best_step: usize,
    /// Norm of the mean-reduced training gradient at the returned parameters.
    /// Recorded as a diagnostic of how close to a stationary point training got.
    pub final_grad_norm: f64,
}

impl TrainedModel {
    pub fn best_valid_loss(&self) -> f64 {
        self.history
            .iter()
            .find(|h| h.step == self.best_step)
            .map(|h| h.valid_loss)
            .unwrap_or(f64::NAN)
    }
}

enum Stepper {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Stepper {
    fn new(kind: Optimizer, p: usize) -> Self {
        match kind {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam => Stepper::Adam {
                m: vec![0.0; p],
                v: vec![0.0; p],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        match self {
            Stepper::Sgd => {
                for (w, g) in params.iter_mut().zip(grad.iter()) {
                    *w -= lr * g;
                }
            }
            Stepper::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Trains from `init_params(spec, config.seed)`. The optimizer sees the
/// mean-reduced loss. Stops when the running average of the validation loss
/// has not improved for `patience_steps`, or at `max_steps`, and returns the
/// parameters with the lowest validation loss seen.
pub fn train(spec: &MlpSpec, train_data: &Batch, valid_data: &Batch, config: &TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    config.validate()?;
    train_data.check(spec)?;
    valid_data.check(spec)?;

    let mut params = init_params(spec, config.seed)?;
    let n = train_data.len();
    let batch_size = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_0f_0dd));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut stepper = Stepper::new(config.optimizer, params.len());
    let diverged = |step: usize, checkpoint: &ParamVector| Error::Diverged {
        step,
        seed: config.seed,
        checkpoint: Box::new(checkpoint.clone()),
    };

    let initial_train = loss(spec, &params, train_data, Reduction::Mean)?;
    let initial_valid = loss(spec, &params, valid_data, Reduction::Mean)?;
    if !initial_valid.is_finite() || !initial_train.is_finite() {
        return Err(diverged(0, &params));
    }
    let mut history = vec![HistoryEntry {
        step: 0,
        train_loss: initial_train,
        valid_loss: initial_valid,
    }];
    let mut best_params = params.clone();
    let mut best_valid = initial_valid;
    let mut best_step = 0;

    let window = config.running_avg_window;
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(window);
    recent.push_back(initial_valid);
    let mut best_avg = initial_valid;
    let mut last_improvement = 0;

    for step in 1..=config.max_steps {
        if cursor + batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let minibatch = train_data.select(&order[cursor..cursor + batch_size]);
        cursor += batch_size;

        let last_finite = params.clone();
        let (train_loss, grad) = loss_and_gradient(spec, &params, &minibatch, Reduction::Mean)?;
        if !train_loss.is_finite() || !grad.is_finite() {
            return Err(diverged(step, &last_finite));
        }
        stepper.step(&mut params, &grad, config.learning_rate);
        let valid_loss = loss(spec, &params, valid_data, Reduction::Mean)?;
        if !valid_loss.is_finite() || !params.is_finite() {
            return Err(diverged(step, &last_finite));
        }
        history.push(HistoryEntry {
            step,
            train_loss,
            valid_loss,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_params.clone_from(&params);
            best_step = step;
        }

        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(valid_loss);
        let avg = recent.iter().sum::<f64>() / recent.len() as f64;
        if avg < best_avg {
            best_avg = avg;
            last_improvement = step;
        } else if step - last_improvement >= config.patience_steps {
            break;
        }
    }

    let (_, final_grad) = loss_and_gradient(spec, &best_params, train_data, Reduction::Mean)?;
    Ok(TrainedModel {
        spec: spec.clone(),
        params: best_params,
        history,
        config: config.clone(),
        best_step,
        final_grad_norm: final_grad.norm(),
    })
}

/// Splits `data` into (train, valid) with a seeded permutation; the
/// validation part is `valid_fraction` of the rows (at least one row each).
pub fn split_validation(data: &Batch, valid_fraction: f64, seed: u64) -> Result<(Batch, Batch)> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("need at least two rows to split off validation".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((data.len() as f64 * valid_fraction).round() as usize).clamp(1, data.len() - 1);
    let (valid, train) = idx.split_at(n_valid);
    Ok((data.select(train), data.select(valid)))
}

/// One model per seed, everything else identical. Members train in parallel.
pub fn train_ensemble(
    spec: &MlpSpec,
    train_data: &Batch,
    valid_data: &Batch,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<TrainedModel>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one seed".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate ensemble seed {}", w[0])));
    }
    seeds
        .par_iter()
        .map(|&seed| train(spec, train_data, valid_data, &config.with_seed(seed)))
        .collect()
}

/// Population standard deviation of the members' scalar predictions at `x`.
pub fn ensemble_prediction_sd(models: &[TrainedModel], x: &[f64]) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("ensemble SD needs at least two members".into()));
    }
    let spec = &models[0].spec;
    if models.iter().any(|m| &m.spec != spec) {
        return Err(Error::InvalidArgument("ensemble members have different specs".into()));
    }
    let preds = models
        .iter()
        .map(|m| Ok(predict(spec, &m.params, x)?[0]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(population_sd(&preds))
}

pub(crate) fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Head};
    use ndarray::Array2;
    use rand::Rng;

    fn linear_data(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let y = x.outer_iter().map(|r| 1.5 * r[0] - 0.5 * r[1] + 0.25).collect();
        Batch::new(x, y).unwrap()
    }

    #[test]
    fn linear_model_fits_realizable_target() {
        let spec = MlpSpec::new(2, vec![], Activation::Tanh, Head::ScalarRegression);
        let train_data = linear_data(64, 1);
        let valid = linear_data(16, 2);
        let config = TrainConfig {
            learning_rate: 0.05,
            max_steps: 5000,
            patience_steps: 200,
            ..TrainConfig::default()
        };
        let model = train(&spec, &train_data, &valid, &config).unwrap();
        let final_loss = loss(&spec, &model.params, &train_data, Reduction::Sum).unwrap();
        assert!(final_loss <= 1e-6, "final loss {final_loss}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = MlpSpec::new(2, vec![4], Activation::Tanh, Head::ScalarRegression);
        let data = linear_data(40, 3);
        let valid = linear_data(10, 4);
        let config = TrainConfig {
            max_steps: 150,
            ..TrainConfig::default()
        };
        let a = train(&spec, &data, &valid, &config).unwrap();
        let b = train(&spec, &data, &valid, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn returned_params_have_lowest_recorded_validation_loss() {
        let spec = MlpSpec::new(2, vec![8], Activation::Tanh, Head::ScalarRegression);
        let data = linear_data(30, 5);
        let valid = linear_data(10, 6);
        let config = TrainConfig {
            learning_rate: 0.02,
            max_steps: 400,
            patience_steps: 20,
            running_avg_window: 10,
            ..TrainConfig::default()
        };
        let model = train(&spec, &data, &valid, &config).unwrap();
        let returned = loss(&spec, &model.params, &valid, Reduction::Mean).unwrap();
        assert!(model.history.iter().all(|h| returned <= h.valid_loss));
        assert!(model.history.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn divergence_reports_last_finite_checkpoint() {
        let spec = MlpSpec::new(2, vec![], Activation::Tanh, Head::ScalarRegression);
        let data = linear_data(16, 7);
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e6,
            max_steps: 1000,
            seed: 3,
            ..TrainConfig::default()
        };
        match train(&spec, &data, &data, &config) {
            Err(Error::Diverged { checkpoint, seed, .. }) => {
                assert_eq!(seed, 3);
                assert!(checkpoint.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_rules() {
        let spec = MlpSpec::new(2, vec![3], Activation::Tanh, Head::ScalarRegression);
        let data = linear_data(20, 8);
        let config = TrainConfig {
            max_steps: 30,
            ..TrainConfig::default()
        };
        let single = train_ensemble(&spec, &data, &data, &config, &[11]).unwrap();
        assert_eq!(single[0], train(&spec, &data, &data, &config.with_seed(11)).unwrap());
        assert!(train_ensemble(&spec, &data, &data, &config, &[1, 1]).is_err());
    }

    #[test]
    fn ensemble_sd_by_hand() {
        let spec = MlpSpec::new(1, vec![], Activation::Tanh, Head::ScalarRegression);
        let member = |bias: f64| TrainedModel {
            spec: spec.clone(),
            params: ParamVector(vec![0.0, bias]),
            history: vec![],
            config: TrainConfig::default(),
            best_step: 0,
            final_grad_norm: 0.0,
        };
        let sd = ensemble_prediction_sd(&[member(0.0), member(2.0)], &[5.0]).unwrap();
        assert_eq!(sd, 1.0);
        let same = ensemble_prediction_sd(&[member(1.0), member(1.0), member(1.0)], &[5.0]).unwrap();
        assert_eq!(same, 0.0);
        assert!(ensemble_prediction_sd(&[member(1.0)], &[0.0]).is_err());
    }

    #[test]
    fn validation_split_is_disjoint_and_exhaustive() {
        let data = linear_data(50, 9);
        let (t, v) = split_validation(&data, 0.2, 1).unwrap();
        assert_eq!(v.len(), 10);
        assert_eq!(t.len(), 40);
    }
}
