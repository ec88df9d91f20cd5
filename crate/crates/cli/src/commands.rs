use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use local_ensembles::autodiff::{activation_matrices, activation_trace, example_loss_gradient, prediction_gradient};
use local_ensembles::harness::{
    active_learning_experiment, binarize, ensemble_correlation_experiment, load_csv, simulated_features_experiment,
    toy_ood_experiment, Dataset, ExperimentResult, NormStat, Role, RESULT_FORMAT_VERSION,
};
use local_ensembles::score::{
    influence_score, laplace_variance, le_loss_grid_score, le_loss_min_score, linspace, maxprob_score, nn_distance,
    score_sweep, Aggregate, Detail, Variant,
};
use local_ensembles::spectral::{
    dense_eig, dense_hessian, lanczos, load_basis, load_lanczos_state, model_digest, resume, ritz, save_basis,
    save_lanczos_state, write_atomic, HvpOperator, Provenance, SymmetricOperator, DENSE_LIMIT,
};
use local_ensembles::train::train;
use local_ensembles::{Batch, Error, MlpSpec, SpectralBasis};
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use crate::checkpoint::{train_config_digest, Checkpoint, CheckpointHeader};
use crate::config::{DataConfig, RunConfig};

pub const SCORES_FORMAT_VERSION: u32 = 1;
pub const CSV_FORMAT_VERSION: u32 = 1;
const SCORE_CHUNK: usize = 256;

/// Some seeds of an experiment failed; the others were written.
#[derive(Debug)]
pub struct SeedFailures {
    pub failed: Vec<u64>,
    pub numerical: bool,
}

impl std::fmt::Display for SeedFailures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seeds {:?} failed", self.failed)
    }
}

impl std::error::Error for SeedFailures {}

/// Resolved configuration plus its digest.
pub struct Run {
    pub cfg: RunConfig,
    pub digest: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> anyhow::Result<Run> {
        let digest = cfg.digest()?;
        Ok(Run { cfg, digest })
    }

    /// Creates the output directory and writes the resolved config into it.
    fn prepare_out_dir(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)
            .with_context(|| format!("creating output directory {}", self.cfg.out_dir.display()))?;
        let text = format!("# config_digest = \"{}\"\n{}", self.digest, self.cfg.to_toml()?);
        write_atomic(&self.cfg.out_dir.join("resolved_config.toml"), text.as_bytes())?;
        Ok(())
    }

    fn csv_preamble(&self, what: &str) -> String {
        format!("# {what} format_version={CSV_FORMAT_VERSION}\n# config_digest={}\n", self.digest)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.artifact(name)
    }
}

fn load_features(path: &Path, data: &DataConfig) -> anyhow::Result<Dataset> {
    let mut ds = load_csv(path, &data.target, false)?;
    if let Some(b) = data.binarize {
        binarize(&mut ds, b.max_value, b.threshold);
    }
    Ok(ds)
}

struct TrainingData {
    ds: Dataset,
    target_stat: Option<NormStat>,
}

impl TrainingData {
    fn load(data: &DataConfig) -> anyhow::Result<TrainingData> {
        let mut ds = load_features(&data.train, data)?;
        if let Some(path) = &data.valid {
            let v = load_features(path, data)?;
            if v.feature_names != ds.feature_names {
                bail!("validation file {} has different columns from the training file", path.display());
            }
            let n_train = ds.len();
            let features = concatenate![Axis(0), ds.features, v.features];
            let targets = ds.targets.iter().chain(&v.targets).copied().collect();
            ds = Dataset::new(ds.feature_names.clone(), data.target.clone(), features, targets)?;
            ds.roles[n_train..].iter_mut().for_each(|r| *r = Role::Valid);
        } else if data.valid_fraction > 0.0 {
            ds.assign_roles(
                &[(Role::Train, 1.0 - data.valid_fraction), (Role::Valid, data.valid_fraction)],
                data.split_seed,
            )?;
        }
        if ds.count(Role::Train) == 0 || ds.count(Role::Valid) == 0 {
            bail!("need both training and validation rows, got {} and {}", ds.count(Role::Train), ds.count(Role::Valid));
        }
        if data.normalize {
            ds.normalize()?;
        }
        let target_stat = if data.normalize_targets {
            Some(ds.normalize_targets()?)
        } else {
            None
        };
        Ok(TrainingData { ds, target_stat })
    }

    /// The checkpoint must have been trained on exactly this data.
    fn check_matches(&self, ck: &Checkpoint) -> anyhow::Result<()> {
        let h = &ck.header;
        if h.feature_names != self.ds.feature_names || h.norm_stats != self.ds.norm_stats || h.target_stat != self.target_stat {
            bail!("training data or preprocessing differ from those recorded in the checkpoint");
        }
        Ok(())
    }
}

fn model_spec(cfg: &RunConfig, input_dim: usize) -> anyhow::Result<MlpSpec> {
    let m = &cfg.model;
    let spec = MlpSpec::new(input_dim, m.hidden_widths.clone(), m.activation, m.head);
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_train(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let td = TrainingData::load(cfg.data()?)?;
    let spec = model_spec(cfg, td.ds.dim())?;
    let train_batch = td.ds.batch(Role::Train)?;
    let valid_batch = td.ds.batch(Role::Valid)?;
    run.prepare_out_dir()?;

    let header = |params: &local_ensembles::ParamVector| CheckpointHeader {
        spec: spec.clone(),
        train_config: cfg.train.clone(),
        train_config_digest: train_config_digest(&cfg.train),
        config_digest: run.digest.clone(),
        model_digest: model_digest(&spec, params),
        feature_names: td.ds.feature_names.clone(),
        target: td.ds.target_name.clone(),
        norm_stats: td.ds.norm_stats.clone(),
        target_stat: td.target_stat,
        best_step: 0,
        final_grad_norm: None,
        history: Vec::new(),
    };

    let model = match train(&spec, &train_batch, &valid_batch, &cfg.train) {
        Ok(model) => model,
        Err(Error::Diverged { step, seed, checkpoint }) => {
            let path = run.artifact(&format!("diverged_{}", cfg.artifacts.checkpoint));
            Checkpoint {
                header: header(&checkpoint),
                params: (*checkpoint).clone(),
            }
            .save(&path)?;
            eprintln!("last finite parameters written to {}", path.display());
            return Err(Error::Diverged { step, seed, checkpoint }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let ck = Checkpoint {
        header: CheckpointHeader {
            best_step: model.best_step,
            final_grad_norm: Some(model.final_grad_norm),
            history: model.history.clone(),
            ..header(&model.params)
        },
        params: model.params.clone(),
    };
    let path = run.artifact(&cfg.artifacts.checkpoint);
    ck.save(&path)?;

    let mut history = run.csv_preamble("history");
    history.push_str("step,train_loss,valid_loss\n");
    for h in &model.history {
        let _ = writeln!(history, "{},{},{}", h.step, h.train_loss, h.valid_loss);
    }
    write_atomic(&run.artifact("history.csv"), history.as_bytes())?;

    println!("model {spec}, {} parameters", spec.param_count());
    println!(
        "best step {} (valid loss {:.6}), {} steps logged",
        model.best_step,
        model.best_valid_loss(),
        model.history.len()
    );
    println!("checkpoint {}", path.display());
    Ok(())
}

/// Runs or extends Lanczos on the checkpoint's training Hessian, reusing a
/// saved state when it belongs to the same model and settings.
fn compute_basis(run: &Run, ck: &Checkpoint, batch: &Batch) -> anyhow::Result<SpectralBasis> {
    let cfg = &run.cfg;
    let spec = &ck.header.spec;
    let op = HvpOperator::new(spec, &ck.params, batch, cfg.spectral.batch_policy)?;
    let p = op.dim();
    let m = cfg.spectral.m.min(p);
    let provenance = |iterations| Provenance {
        model_digest: ck.header.model_digest.clone(),
        batch_policy: cfg.spectral.batch_policy.tag(),
        seed: cfg.spectral.seed,
        iterations,
        config_digest: run.digest.clone(),
    };
    if m == 0 {
        return Ok(SpectralBasis::new(Vec::new(), Array2::zeros((0, p)), provenance(0))?);
    }

    let state_path = run.artifact(&cfg.artifacts.lanczos_state);
    let mut previous = None;
    if state_path.exists() {
        let (factor, tags) = load_lanczos_state(&state_path)?;
        if factor.dim() != p {
            return Err(Error::Dimension {
                what: "saved lanczos state vs model parameters",
                expected: p,
                got: factor.dim(),
            }
            .into());
        }
        let same = tags.model_digest == ck.header.model_digest
            && tags.batch_policy == cfg.spectral.batch_policy.tag()
            && factor.seed == cfg.spectral.seed
            && factor.reorth == cfg.spectral.reorth;
        if same {
            previous = Some(factor);
        } else {
            log::warn!("ignoring {}: it was computed for another model or setting", state_path.display());
        }
    }
    let factor = match previous {
        Some(f) if f.m() >= m || f.breakdown => f,
        Some(f) => {
            let done = f.m();
            let op = op.starting_at_call(done as u64);
            let f = resume(&op, f, m)?;
            log::info!("resumed lanczos from {done} to {} steps", f.m());
            save_lanczos_state(&f, &provenance(f.m()), &state_path)?;
            f
        }
        None => {
            let f = lanczos(&op, m, cfg.spectral.seed, cfg.spectral.reorth)?;
            save_lanczos_state(&f, &provenance(f.m()), &state_path)?;
            f
        }
    };
    let basis = ritz(&factor, provenance(factor.m()))?;
    Ok(basis.truncate(m.min(basis.m())))
}

pub fn cmd_spectrum(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let ck = Checkpoint::load(&run.artifact(&cfg.artifacts.checkpoint))?;
    let td = TrainingData::load(cfg.data()?)?;
    td.check_matches(&ck)?;
    let batch = td.ds.batch(Role::Train)?;
    run.prepare_out_dir()?;
    let basis = compute_basis(run, &ck, &batch)?;
    save_basis(&basis, &run.artifact(&cfg.artifacts.basis))?;

    let mut table = run.csv_preamble("eigenvalues");
    table.push_str("index,eigenvalue,residual_estimate\n");
    println!("{:>5}  {:>15}  {:>12}", "index", "eigenvalue", "residual");
    for (j, (l, r)) in basis.eigenvalues.iter().zip(&basis.residuals).enumerate() {
        println!("{j:>5}  {l:>15.8e}  {r:>12.3e}");
        let _ = writeln!(table, "{j},{l},{r}");
    }
    write_atomic(&run.artifact("eigenvalues.csv"), table.as_bytes())?;
    println!("{} eigenpairs of a {}-parameter Hessian", basis.m(), basis.dim());
    Ok(())
}

struct Scorer<'a> {
    ck: &'a Checkpoint,
    variants: Vec<Variant>,
    ms: Vec<usize>,
    basis: Option<SpectralBasis>,
    full: Option<SpectralBasis>,
    grid: Vec<f64>,
    select: local_ensembles::OutputSelect,
    nn_input: Option<Array2<f64>>,
    nn_reprs: Option<(Array2<f64>, Array2<f64>)>,
}

struct ScoreRow {
    variant: Variant,
    m: usize,
    value: f64,
    detail: Detail,
}

impl Scorer<'_> {
    fn score(&self, x: &[f64], y: Option<f64>) -> local_ensembles::Result<Vec<ScoreRow>> {
        let spec = &self.ck.header.spec;
        let params = &self.ck.params;
        let mut out = Vec::new();
        for &variant in &self.variants {
            match variant {
                Variant::LePrediction => {
                    let basis = self.basis.as_ref().expect("basis loaded");
                    let (g, index) = prediction_gradient(spec, params, x, self.select)?;
                    for (r, &m) in score_sweep(basis, &g, &self.ms)?.into_iter().zip(&self.ms) {
                        out.push(ScoreRow {
                            variant,
                            m,
                            value: r.value,
                            detail: Detail::Output(index),
                        });
                    }
                }
                Variant::LeLossMin | Variant::LeLossGrid => {
                    let basis = self.basis.as_ref().expect("basis loaded");
                    for &m in &self.ms {
                        let r = if variant == Variant::LeLossMin {
                            le_loss_min_score(spec, params, basis, m, x)?
                        } else {
                            le_loss_grid_score(spec, params, basis, m, x, &self.grid, Aggregate::Min)?
                        };
                        out.push(ScoreRow {
                            variant,
                            m,
                            value: r.value,
                            detail: r.detail,
                        });
                    }
                }
                Variant::Laplace | Variant::Influence => {
                    let full = self.full.as_ref().expect("full spectrum computed");
                    let v = if variant == Variant::Laplace {
                        laplace_variance(full, &prediction_gradient(spec, params, x, self.select)?.0)?
                    } else {
                        let y = y.ok_or_else(|| Error::InvalidArgument("influence needs a target column".into()))?;
                        influence_score(full, &example_loss_gradient(spec, params, x, y)?)?
                    };
                    out.push(ScoreRow {
                        variant,
                        m: full.m(),
                        value: v.value,
                        detail: Detail::Clamped(v.clamped),
                    });
                }
                Variant::Maxprob => {
                    let r = maxprob_score(spec, params, x)?;
                    out.push(ScoreRow {
                        variant,
                        m: 0,
                        value: r.value,
                        detail: r.detail,
                    });
                }
                Variant::NnInput | Variant::NnReprs | Variant::NnFinal => {
                    let value = if variant == Variant::NnInput {
                        nn_distance(self.nn_input.as_ref().expect("reference loaded").view(), x)?
                    } else {
                        let (all, last) = self.nn_reprs.as_ref().expect("reference loaded");
                        let trace = activation_trace(spec, params, x)?;
                        if variant == Variant::NnReprs {
                            nn_distance(all.view(), &trace.concatenated())?
                        } else {
                            nn_distance(last.view(), &trace.final_hidden())?
                        }
                    };
                    out.push(ScoreRow {
                        variant,
                        m: 0,
                        value,
                        detail: Detail::None,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Columns of the test file in checkpoint feature order, plus the target column if present.
struct TestColumns {
    features: Vec<usize>,
    target: Option<usize>,
}

fn test_columns(header: &csv::StringRecord, ck: &Checkpoint, path: &Path) -> anyhow::Result<TestColumns> {
    let find = |name: &str| header.iter().position(|h| h == name);
    let features = ck
        .header
        .feature_names
        .iter()
        .map(|n| find(n).with_context(|| format!("{} lacks feature column '{n}'", path.display())))
        .collect::<anyhow::Result<_>>()?;
    Ok(TestColumns {
        features,
        target: find(&ck.header.target),
    })
}

pub fn cmd_score(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let data = cfg.data()?;
    let test_path = data.test.as_ref().context("scoring needs data.test")?;
    let ck = Checkpoint::load(&run.artifact(&cfg.artifacts.checkpoint))?;
    let spec = &ck.header.spec;
    let mut variants = cfg.score.variants.clone();
    variants.dedup();
    if variants.is_empty() {
        bail!("no score variants selected");
    }
    for v in &variants {
        let classifier = spec.head.is_classifier();
        let ok = match v {
            Variant::LeLossMin | Variant::Maxprob => classifier,
            Variant::LeLossGrid => !classifier,
            _ => true,
        };
        if !ok {
            return Err(Error::HeadMismatch(format!("{v} does not apply to a {spec} model")).into());
        }
    }
    let ms = cfg.m_values();
    let needs = |f: fn(&Variant) -> bool| variants.iter().any(f);

    let basis = if needs(|v| matches!(v, Variant::LePrediction | Variant::LeLossMin | Variant::LeLossGrid)) {
        let path = run.artifact(&cfg.artifacts.basis);
        if !path.exists() {
            bail!("no eigenbasis at {}; run `locens spectrum` first", path.display());
        }
        let loaded = load_basis(&path, Some(&ck.header.model_digest))?;
        if loaded.digest_matches == Some(false) {
            bail!("eigenbasis {} was computed for a different model; rerun `locens spectrum`", path.display());
        }
        if let Some(&m) = ms.iter().find(|&&m| m > loaded.basis.m()) {
            bail!("m = {m} exceeds the {} eigenpairs in {}", loaded.basis.m(), path.display());
        }
        Some(loaded.basis)
    } else {
        None
    };

    let needs_train = needs(|v| matches!(v, Variant::Laplace | Variant::Influence | Variant::NnInput | Variant::NnReprs | Variant::NnFinal));
    let td = if needs_train {
        let td = TrainingData::load(data)?;
        td.check_matches(&ck)?;
        Some(td)
    } else {
        None
    };
    let full = if needs(|v| matches!(v, Variant::Laplace | Variant::Influence)) {
        let batch = td.as_ref().expect("loaded").ds.batch(Role::Train)?;
        let p = spec.param_count();
        if p > DENSE_LIMIT {
            return Err(Error::TooLarge { p, limit: DENSE_LIMIT }.into());
        }
        let dense = dense_eig(&dense_hessian(spec, &ck.params, &batch)?)?;
        let provenance = Provenance {
            model_digest: ck.header.model_digest.clone(),
            batch_policy: "full".into(),
            seed: 0,
            iterations: p,
            config_digest: run.digest.clone(),
        };
        Some(SpectralBasis::from_dense(dense, provenance))
    } else {
        None
    };
    let reference = td.as_ref().map(|td| td.ds.features_of(Role::Valid));
    let nn_reprs = match (&reference, needs(|v| matches!(v, Variant::NnReprs | Variant::NnFinal))) {
        (Some(r), true) => Some(activation_matrices(spec, &ck.params, r.view())?),
        _ => None,
    };
    let grid = linspace(cfg.score.grid_lo, cfg.score.grid_hi, cfg.score.grid_points);
    let scorer = Scorer {
        ck: &ck,
        variants,
        ms,
        basis,
        full,
        grid,
        select: cfg.score.select,
        nn_input: reference,
        nn_reprs,
    };

    run.prepare_out_dir()?;
    let out_path = run.artifact(&cfg.artifacts.scores);
    let tmp_path = run.artifact(&format!("{}.tmp", cfg.artifacts.scores));
    let written = write_scores(&scorer, data, test_path, &tmp_path, &run.digest)?;
    std::fs::rename(&tmp_path, &out_path)?;
    println!("{written} test points scored, written to {}", out_path.display());
    Ok(())
}

fn write_scores(scorer: &Scorer, data: &DataConfig, test_path: &Path, out: &Path, digest: &str) -> anyhow::Result<usize> {
    let ck = scorer.ck;
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "# scores format_version={SCORES_FORMAT_VERSION}")?;
    writeln!(w, "# config_digest={digest}")?;
    writeln!(w, "# model_digest={}", ck.header.model_digest)?;
    writeln!(w, "point,variant,m,value,detail")?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(test_path)
        .with_context(|| format!("opening {}", test_path.display()))?;
    let header = reader.headers()?.clone();
    if header.is_empty() {
        w.flush()?;
        return Ok(0);
    }
    let cols = test_columns(&header, ck, test_path)?;
    let mut records = reader.records().enumerate();
    let mut point = 0;
    loop {
        let mut chunk: Vec<(Vec<f64>, Option<f64>)> = Vec::with_capacity(SCORE_CHUNK);
        for (row, record) in records.by_ref().take(SCORE_CHUNK) {
            let record = record.map_err(|e| csv_error(test_path, format!("row {}: {e}", row + 1)))?;
            let cell = |c: usize| -> local_ensembles::Result<f64> {
                let s = record.get(c).unwrap_or("");
                s.parse()
                    .map_err(|_| csv_error(test_path, format!("row {}, column '{}': non-numeric cell '{s}'", row + 1, &header[c])))
            };
            let mut x = cols.features.iter().map(|&c| cell(c)).collect::<local_ensembles::Result<Vec<f64>>>()?;
            if let Some(b) = data.binarize {
                x.iter_mut().for_each(|v| *v = if *v / b.max_value > b.threshold { 1.0 } else { 0.0 });
            }
            if let Some(stats) = &ck.header.norm_stats {
                x.iter_mut().zip(stats).for_each(|(v, s)| *v = s.apply(*v));
            }
            let mut y = cols.target.map(cell).transpose()?;
            if let (Some(t), Some(s)) = (y.as_mut(), &ck.header.target_stat) {
                *t = s.apply(*t);
            }
            chunk.push((x, y));
        }
        if chunk.is_empty() {
            break;
        }
        let scored = chunk
            .par_iter()
            .map(|(x, y)| scorer.score(x, *y))
            .collect::<local_ensembles::Result<Vec<_>>>()?;
        for rows in scored {
            for r in rows {
                writeln!(w, "{point},{},{},{},{}", r.variant, r.m, r.value, r.detail)?;
            }
            point += 1;
        }
    }
    w.flush()?;
    w.into_inner()?.sync_all()?;
    Ok(point)
}

fn csv_error(path: &Path, reason: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        reason,
    }
}

pub const EXPERIMENTS: [&str; 4] = ["toy_ood", "ensemble_correlation", "simulated_features", "active_learning"];

pub fn cmd_experiment(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let e = cfg.experiment.as_ref().context("config has no [experiment] section")?;
    let runner: Box<dyn Fn(u64) -> local_ensembles::Result<ExperimentResult> + Sync> = match e.name.as_str() {
        "toy_ood" => {
            let c = e.toy.clone().unwrap_or_default();
            Box::new(move |s| toy_ood_experiment(&c, &[s]))
        }
        "ensemble_correlation" => {
            let c = e.ensemble.clone().unwrap_or_default();
            let ds = load_features(&cfg.data()?.train, cfg.data()?)?;
            let spec = model_spec(cfg, ds.dim())?;
            Box::new(move |s| ensemble_correlation_experiment(&ds, &spec, &c, s))
        }
        "simulated_features" => {
            let c = e.simulated.clone().unwrap_or_default();
            let ds = load_features(&cfg.data()?.train, cfg.data()?)?;
            Box::new(move |s| {
                let c = local_ensembles::harness::SimulatedConfig { seeds: vec![s], ..c.clone() };
                simulated_features_experiment(&ds, &c)
            })
        }
        "active_learning" => {
            let c = e.active.clone().unwrap_or_default();
            let ds = load_features(&cfg.data()?.train, cfg.data()?)?;
            let spec = model_spec(cfg, ds.dim())?;
            Box::new(move |s| {
                let c = local_ensembles::harness::ActiveConfig { seeds: vec![s], ..c.clone() };
                active_learning_experiment(&ds, &spec, &c)
            })
        }
        other => bail!("unknown experiment '{other}'; expected one of {}", EXPERIMENTS.join(", ")),
    };
    let seeds = match &e.seeds {
        Some(s) => s.clone(),
        None => match e.name.as_str() {
            "toy_ood" => (0..5).collect(),
            "ensemble_correlation" => vec![0],
            "simulated_features" => e.simulated.clone().unwrap_or_default().seeds,
            _ => e.active.clone().unwrap_or_default().seeds,
        },
    };
    if seeds.is_empty() {
        bail!("experiment needs at least one seed");
    }
    run.prepare_out_dir()?;

    let outcomes: Vec<(u64, local_ensembles::Result<ExperimentResult>)> =
        seeds.par_iter().map(|&s| (s, runner(s))).collect();
    let mut merged: Option<ExperimentResult> = None;
    let mut failed = Vec::new();
    let mut numerical = false;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => match &mut merged {
                Some(m) => m.merge(r),
                None => merged = Some(r),
            },
            Err(err) => {
                eprintln!("seed {seed} failed: {err}");
                numerical |= err.is_numerical();
                failed.push(seed);
            }
        }
    }
    if let Some(mut result) = merged {
        result.echo("config_digest", &run.digest);
        result.echo("format_version", RESULT_FORMAT_VERSION);
        if !failed.is_empty() {
            result.echo("failed_seeds", format!("{failed:?}"));
        }
        let files = result.write(&cfg.out_dir)?;
        print!("{}", summary(&result));
        for f in files {
            println!("wrote {}", f.display());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SeedFailures { failed, numerical }.into())
    }
}

fn summary(r: &ExperimentResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} seeds {:?}", r.tag, r.seeds);
    for name in r.metrics() {
        let (mean, sd, n) = r.aggregate(&name).expect("recorded");
        let _ = writeln!(out, "  {name:<40} {mean:>12.6} +- {sd:<10.6} (n={n})");
    }
    out
}
