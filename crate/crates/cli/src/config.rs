//! One TOML file describes a whole experiment: the oracle cell, the network
//! size, every dataset, and the budgets for training, model selection,
//! evaluation, the stress driver, and the benchmark. All randomness is
//! seeded from here so reruns reproduce outputs byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use prnn_core::microfe::{DEFAULT_N_DIV, DEFAULT_N_FIBERS, DEFAULT_VF};
use prnn_core::pathgen::DatasetSpec;
use prnn_core::train::{AdamParams, TrainSpec, DEFAULT_FD_STEP};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Base directory for generated files; the `--out` flag overrides it.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub rve: RveConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Named strain-path datasets; `gen` builds and labels each one.
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Geometry and resolution of the oracle unit cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RveConfig {
    pub n_fibers: usize,
    pub vf: f64,
    pub n_div: usize,
    pub seed: u64,
}

impl Default for RveConfig {
    fn default() -> Self {
        Self { n_fibers: DEFAULT_N_FIBERS, vf: DEFAULT_VF, n_div: DEFAULT_N_DIV, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Fictitious material points in the material layer.
    pub n_points: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { n_points: 2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Name of the dataset to fit; must appear under `[datasets]`.
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// One training run (and one checkpoint) per seed.
    pub seeds: Vec<u64>,
    pub learning_rate: f64,
    /// Stop an epoch early once the training loss falls below this.
    pub stop_loss: Option<f64>,
    pub fd_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "train".into(),
            epochs: 2000,
            batch_size: 9,
            seeds: vec![0],
            learning_rate: 1e-3,
            stop_loss: None,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

impl TrainConfig {
    pub fn spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            adam: AdamParams { learning_rate: self.learning_rate, ..AdamParams::default() },
            fd_step: self.fd_step,
            stop_loss: self.stop_loss,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub train_dataset: String,
    pub val_dataset: String,
    /// Layer sizes to sweep.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            train_dataset: "train".into(),
            val_dataset: "val".into(),
            sizes: vec![1, 2, 3, 4],
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 600,
            batch_size: 9,
            learning_rate: 1e-3,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> TrainSpec {
        TrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: 0,
            adam: AdamParams { learning_rate: self.learning_rate, ..AdamParams::default() },
            fd_step: DEFAULT_FD_STEP,
            stop_loss: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Labeled dataset names to score.
    pub datasets: Vec<String>,
    /// Checkpoint files under `<out>/models`; empty means one per train seed.
    pub models: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveConfig {
    /// Checkpoint under `<out>/models`; defaults to the first train seed.
    pub model: Option<String>,
    /// Strain-space ramp whose network response defines the stress targets.
    pub direction: [f64; 3],
    pub n_steps: usize,
    /// Fixed strain increment; left unset, the ramp is sized to end just
    /// past the network's plastic onset.
    pub step_size: Option<f64>,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self { model: None, direction: [1.0, 0.0, 0.0], n_steps: 20, step_size: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub model: Option<String>,
    pub n_steps: usize,
    pub step_size: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { model: None, n_steps: 60, step_size: 1e-4 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "config schema version {} is not supported (expected {})",
                config.schema_version,
                CONFIG_SCHEMA_VERSION
            );
        }
        for (name, spec) in &config.datasets {
            spec.validate().with_context(|| format!("dataset \"{name}\" is invalid"))?;
        }
        Ok(config)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    pub fn csv_path(&self, dataset: &str) -> PathBuf {
        self.data_dir().join(format!("{dataset}.csv"))
    }

    pub fn manifest_path(&self, dataset: &str) -> PathBuf {
        self.data_dir().join(format!("{dataset}.manifest.json"))
    }

    pub fn model_path(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.models_dir().join(file)
        }
    }

    pub fn model_file_for_seed(seed: u64) -> String {
        format!("model_seed{seed}.json")
    }

    /// Checkpoints `eval` should score: the explicit list, or one per seed.
    pub fn eval_models(&self) -> Vec<String> {
        if self.eval.models.is_empty() {
            self.train.seeds.iter().map(|&s| Self::model_file_for_seed(s)).collect()
        } else {
            self.eval.models.clone()
        }
    }
}
