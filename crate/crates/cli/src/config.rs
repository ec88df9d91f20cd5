//! Run configuration, read from TOML.

use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context};
use local_ensembles::harness::{ActiveConfig, EnsembleConfig, SimulatedConfig, ToyOodConfig};
use local_ensembles::score::Variant;
use local_ensembles::spectral::SpectralConfig;
use local_ensembles::{Activation, Head, OutputSelect, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub artifacts: ArtifactNames,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_widths: vec![50],
            activation: Activation::Relu,
            head: Head::ScalarRegression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub target: String,
    /// Separate validation file; otherwise `valid_fraction` of `train` is held out.
    pub valid: Option<PathBuf>,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    pub test: Option<PathBuf>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub normalize_targets: bool,
    pub binarize: Option<BinarizeConfig>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_valid_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarizeConfig {
    pub max_value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub variants: Vec<Variant>,
    /// Empty means `[spectral.m]`.
    pub m_values: Vec<usize>,
    pub select: OutputSelect,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            variants: vec![Variant::LePrediction],
            m_values: Vec::new(),
            select: OutputSelect::default(),
            grid_lo: -1.0,
            grid_hi: 1.0,
            grid_points: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Option<Vec<u64>>,
    pub toy: Option<ToyOodConfig>,
    pub ensemble: Option<EnsembleConfig>,
    pub simulated: Option<SimulatedConfig>,
    pub active: Option<ActiveConfig>,
}

/// File names inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactNames {
    pub checkpoint: String,
    pub basis: String,
    pub lanczos_state: String,
    pub scores: String,
}

impl Default for ArtifactNames {
    fn default() -> Self {
        ArtifactNames {
            checkpoint: "model.ckpt".into(),
            basis: "basis.bin".into(),
            lanczos_state: "lanczos_state.bin".into(),
            scores: "scores.csv".into(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub m: Option<usize>,
    pub variants: Vec<String>,
}

impl RunConfig {
    /// Reads `path`, resolves relative data paths against its directory and
    /// applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(data) = &mut cfg.data {
            data.train = base.join(&data.train);
            data.valid = data.valid.as_ref().map(|p| base.join(p));
            data.test = data.test.as_ref().map(|p| base.join(p));
        }
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.spectral.seed = seed;
            if let Some(e) = &mut self.experiment {
                e.seeds = Some(vec![seed]);
            }
        }
        if let Some(m) = o.m {
            self.spectral.m = m;
            self.score.m_values = vec![m];
            if let Some(e) = &mut self.experiment {
                if let Some(t) = &mut e.toy {
                    t.m_values = vec![m];
                }
                if let Some(c) = &mut e.ensemble {
                    c.spectral.m = m;
                }
                if let Some(c) = &mut e.simulated {
                    c.spectral.m = m;
                }
                if let Some(c) = &mut e.active {
                    c.spectral.m = m;
                }
            }
        }
        if !o.variants.is_empty() {
            self.score.variants = o.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
        }
        Ok(())
    }

    fn validate(&self) -> anyhow::Result<()> {
        let names = &self.artifacts;
        for name in [&names.checkpoint, &names.basis, &names.lanczos_state, &names.scores] {
            let mut parts = Path::new(name).components();
            match (parts.next(), parts.next()) {
                (Some(Component::Normal(_)), None) => {}
                _ => bail!("artifact name '{name}' must be a plain file name"),
            }
        }
        if let Some(d) = &self.data {
            if !(0.0..1.0).contains(&d.valid_fraction) {
                bail!("data.valid_fraction must be in [0, 1), got {}", d.valid_fraction);
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of [`RunConfig::to_toml`].
    pub fn digest(&self) -> anyhow::Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn data(&self) -> anyhow::Result<&DataConfig> {
        self.data.as_ref().context("config has no [data] section")
    }

    pub fn m_values(&self) -> Vec<usize> {
        let mut ms = if self.score.m_values.is_empty() {
            vec![self.spectral.m]
        } else {
            self.score.m_values.clone()
        };
        ms.sort_unstable();
        ms.dedup();
        ms
    }
}
