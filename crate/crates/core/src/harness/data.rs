//! Tabular datasets: CSV ingestion, role partitions, normalization and the
//! synthetic generators.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Valid,
    Test,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStat {
    pub mean: f64,
    pub sd: f64,
}

impl NormStat {
    /// Population mean and SD. A constant column gets `sd = 1`.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> NormStat {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        NormStat {
            mean,
            sd: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn undo(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Rows of features and targets, each tagged with a role. When normalized,
/// `features` holds standardized values and `norm_stats` the per-column
/// statistics of the train rows that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub features: Array2<f64>,
    pub targets: Vec<f64>,
    pub roles: Vec<Role>,
    pub norm_stats: Option<Vec<NormStat>>,
}

impl Dataset {
    /// All rows start as training rows.
    pub fn new(feature_names: Vec<String>, target_name: String, features: Array2<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::dim("target count", features.nrows(), targets.len()));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::dim("feature names", features.ncols(), feature_names.len()));
        }
        Ok(Dataset {
            feature_names,
            target_name,
            roles: vec![Role::Train; targets.len()],
            features,
            targets,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn features_of(&self, role: Role) -> Array2<f64> {
        self.features.select(Axis(0), &self.indices(role))
    }

    pub fn targets_of(&self, role: Role) -> Vec<f64> {
        self.indices(role).into_iter().map(|i| self.targets[i]).collect()
    }

    pub fn batch(&self, role: Role) -> Result<Batch> {
        Batch::new(self.features_of(role), self.targets_of(role))
    }

    /// Features with any normalization undone.
    pub fn raw_features(&self) -> Array2<f64> {
        match &self.norm_stats {
            None => self.features.clone(),
            Some(stats) => {
                let mut raw = self.features.clone();
                for (mut col, s) in raw.axis_iter_mut(Axis(1)).zip(stats) {
                    col.mapv_inplace(|v| s.undo(v));
                }
                raw
            }
        }
    }

    /// Standardizes every column with statistics of the current train rows.
    /// Calling it again after a role change re-derives the statistics.
    pub fn normalize(&mut self) -> Result<()> {
        let train = self.indices(Role::Train);
        if train.is_empty() {
            return Err(Error::InvalidArgument("normalization needs at least one train row".into()));
        }
        let mut raw = self.raw_features();
        let stats: Vec<NormStat> = raw
            .axis_iter(Axis(1))
            .map(|col| NormStat::of(train.iter().map(|&i| col[i])))
            .collect();
        for (mut col, s) in raw.axis_iter_mut(Axis(1)).zip(&stats) {
            col.mapv_inplace(|v| s.apply(v));
        }
        self.features = raw;
        self.norm_stats = Some(stats);
        Ok(())
    }

    /// Standardizes targets with train-row statistics and returns them.
    pub fn normalize_targets(&mut self) -> Result<NormStat> {
        let train = self.indices(Role::Train);
        if train.is_empty() {
            return Err(Error::InvalidArgument("normalization needs at least one train row".into()));
        }
        let stat = NormStat::of(train.iter().map(|&i| self.targets[i]));
        self.targets.iter_mut().for_each(|t| *t = stat.apply(*t));
        Ok(stat)
    }

    /// Seeded random partition. `fractions` gives the share of each role;
    /// the last listed role absorbs rounding.
    pub fn assign_roles(&mut self, fractions: &[(Role, f64)], seed: u64) -> Result<()> {
        let total: f64 = fractions.iter().map(|(_, f)| f).sum();
        if fractions.is_empty() || fractions.iter().any(|(_, f)| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("role fractions must be nonnegative and sum to 1, got {total}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut start = 0;
        for (k, &(role, frac)) in fractions.iter().enumerate() {
            let end = if k + 1 == fractions.len() {
                idx.len()
            } else {
                (start + (frac * self.len() as f64).round() as usize).min(idx.len())
            };
            for &i in &idx[start..end] {
                self.roles[i] = role;
            }
            start = end;
        }
        Ok(())
    }

    /// Keeps only the listed rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            features: self.features.select(Axis(0), rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            roles: rows.iter().map(|&i| self.roles[i]).collect(),
            norm_stats: self.norm_stats.clone(),
        }
    }
}

fn csv_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a header-first numeric CSV. Every column except `target_column`
/// becomes a feature. With `normalize`, features are standardized using all
/// rows (every row starts in the train role).
pub fn load_csv(path: &Path, target_column: &str, normalize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| csv_err(path, format!("missing target column '{target_column}'")))?;

    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, format!("row {}: {e}", row + 1)))?;
        if record.len() != header.len() {
            return Err(csv_err(path, format!("row {} has {} cells, expected {}", row + 1, record.len(), header.len())));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(path, format!("row {}, column '{}': non-numeric cell '{cell}'", row + 1, header[col])))?;
            if col == target_idx {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let d = header.len() - 1;
    let features = Array2::from_shape_vec((targets.len(), d), values).expect("row-major cells");
    let names = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut ds = Dataset::new(names, target_column.to_string(), features, targets)?;
    if normalize && !ds.is_empty() {
        ds.normalize()?;
    }
    Ok(ds)
}

/// Scales features by `1 / max_value` and maps each to 1 if above
/// `threshold`, else 0.
pub fn binarize(ds: &mut Dataset, max_value: f64, threshold: f64) {
    ds.features.mapv_inplace(|v| if v / max_value > threshold { 1.0 } else { 0.0 });
    ds.norm_stats = None;
}

/// Training support of the sine task.
pub const TOY_TRAIN_SUPPORT: [(f64, f64); 2] = [(-1.0, 0.0), (1.0, 2.0)];
/// Range considered at test time.
pub const TOY_TEST_RANGE: (f64, f64) = (-3.0, 4.0);
pub const TOY_NOISE_VARIANCE: f64 = 0.25;

pub fn in_toy_support(x: f64) -> bool {
    TOY_TRAIN_SUPPORT.iter().any(|&(lo, hi)| (lo..=hi).contains(&x))
}

/// `y = sin(4x)` plus optional Gaussian noise of variance 1/4: 200 train and
/// 100 test points drawn uniformly from the training support, and 200 OOD
/// points drawn uniformly from the rest of the test range.
pub fn gen_toy_sin(seed: u64, noisy: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE_VARIANCE.sqrt()).expect("valid sd");
    let mut xs = Vec::with_capacity(500);
    let mut roles = Vec::with_capacity(500);
    for (role, n) in [(Role::Train, 200), (Role::Test, 100)] {
        for _ in 0..n {
            let (lo, hi) = TOY_TRAIN_SUPPORT[rng.gen_range(0..TOY_TRAIN_SUPPORT.len())];
            xs.push(rng.gen_range(lo..hi));
            roles.push(role);
        }
    }
    let mut n_ood = 0;
    while n_ood < 200 {
        let x = rng.gen_range(TOY_TEST_RANGE.0..TOY_TEST_RANGE.1);
        if !in_toy_support(x) {
            xs.push(x);
            roles.push(Role::Ood);
            n_ood += 1;
        }
    }
    let targets = xs
        .iter()
        .map(|&x| {
            let y = (4.0 * x).sin();
            if noisy {
                y + noise.sample(&mut rng)
            } else {
                y
            }
        })
        .collect();
    Dataset {
        feature_names: vec!["x".into()],
        target_name: "y".into(),
        features: Array2::from_shape_vec((xs.len(), 1), xs).expect("column"),
        targets,
        roles,
        norm_stats: None,
    }
}

/// Provenance of one simulated feature: `beta * x[i] + (1 - beta) * x[j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedFeature {
    pub i: usize,
    pub j: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    /// Rows in train, valid and test roles.
    pub in_dist: Dataset,
    /// Rows in the OOD role; simulated columns permuted across rows.
    pub ood: Dataset,
    pub features: Vec<SimulatedFeature>,
    /// Simulated columns before noise and normalization, in-dist rows then OOD rows.
    pub pre_noise: Array2<f64>,
}

/// Fractions of the in-distribution rows used for train, valid and test.
pub const SIM_IN_DIST_ROLES: [(Role, f64); 3] = [(Role::Train, 0.6), (Role::Valid, 0.2), (Role::Test, 0.2)];
pub const SIM_OOD_FRACTION: f64 = 0.3;

/// Appends `n_feats` linear combinations of random feature pairs. 30% of
/// rows are split off as OOD and their simulated values are permuted among
/// themselves, which keeps each marginal but breaks the linear relation.
/// Noise of SD `sigma` is then added to the simulated columns, and all
/// columns are standardized with the in-distribution train rows.
pub fn gen_simulated_features(base: &Dataset, n_feats: usize, sigma: f64, seed: u64) -> Result<SimulatedData> {
    if n_feats < 1 {
        return Err(Error::InvalidArgument("need at least one simulated feature".into()));
    }
    if base.dim() < 2 {
        return Err(Error::InvalidArgument("simulated features need at least two base features".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sd must be nonnegative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = base.raw_features();
    let n = base.len();
    let d = base.dim();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_ood = (SIM_OOD_FRACTION * n as f64).round() as usize;
    let (ood_rows, in_rows) = order.split_at(n_ood);
    let (ood_rows, in_rows) = (ood_rows.to_vec(), in_rows.to_vec());

    let mut sims = Vec::with_capacity(n_feats);
    let mut in_cols = Array2::zeros((in_rows.len(), n_feats));
    let mut ood_cols = Array2::zeros((ood_rows.len(), n_feats));
    for f in 0..n_feats {
        let i = rng.gen_range(0..d);
        let j = (i + rng.gen_range(1..d)) % d;
        let beta: f64 = rng.gen_range(0.0..1.0);
        sims.push(SimulatedFeature { i, j, beta });
        let make = |r: usize| beta * raw[[r, i]] + (1.0 - beta) * raw[[r, j]];
        for (k, &r) in in_rows.iter().enumerate() {
            in_cols[[k, f]] = make(r);
        }
        let mut pool: Vec<f64> = ood_rows.iter().map(|&r| make(r)).collect();
        pool.shuffle(&mut rng);
        for (k, v) in pool.into_iter().enumerate() {
            ood_cols[[k, f]] = v;
        }
    }
    let pre_noise = ndarray::concatenate(Axis(0), &[in_cols.view(), ood_cols.view()]).expect("same width");

    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("valid sd");
        in_cols.mapv_inplace(|v| v + noise.sample(&mut rng));
        ood_cols.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let mut names = base.feature_names.clone();
    names.extend((0..n_feats).map(|f| format!("sim{f}")));
    let assemble = |rows: &[usize], cols: &Array2<f64>| -> Result<Dataset> {
        let feats = ndarray::concatenate(Axis(1), &[raw.select(Axis(0), rows).view(), cols.view()]).expect("same rows");
        Dataset::new(names.clone(), base.target_name.clone(), feats, rows.iter().map(|&r| base.targets[r]).collect())
    };
    let mut in_dist = assemble(&in_rows, &in_cols)?;
    let mut ood = assemble(&ood_rows, &ood_cols)?;
    in_dist.assign_roles(&SIM_IN_DIST_ROLES, seed ^ 0x51)?;
    in_dist.normalize()?;
    ood.roles = vec![Role::Ood; ood.len()];
    let stats = in_dist.norm_stats.clone().expect("just normalized");
    for (mut col, s) in ood.features.axis_iter_mut(Axis(1)).zip(&stats) {
        col.mapv_inplace(|v| s.apply(v));
    }
    ood.norm_stats = Some(stats);
    Ok(SimulatedData {
        in_dist,
        ood,
        features: sims,
        pre_noise,
    })
}
