//! Experiment manifest: one JSON file that pins the dataset, every
//! configuration and the seed. Relative paths resolve against the directory
//! holding the manifest.
//!
//! ```json
//! {
//!   "dataset": "data/manifest.json",
//!   "output_dir": "runs/desk",
//!   "seed": 0
//! }
//! ```
//!
//! Every other section is optional and falls back to the library defaults:
//! `rosa` (slic, bilateral, resample), `crf`, `attack`, `sgd`, `rosa_sgd`,
//! `rosa_train`, `defenses`, `sweep_epsilons`.

use std::path::{Path, PathBuf};

use rosa_core::attack::{default_max_iters, AttackConfig};
use rosa_core::crf::CrfParams;
use rosa_core::pipeline::{Defense, RosaConfig};
use rosa_core::train::{RosaTrainConfig, SgdConfig};
use rosa_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "manifest.resolved.json";

/// Attack settings; the mean pixel comes from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub epsilon: f64,
    pub alpha: f64,
    /// `None` uses `min(100, ceil(2 epsilon / alpha) + 20)`.
    pub max_iters: Option<usize>,
    pub strict_clip: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            epsilon: 20.0,
            alpha: 1.0,
            max_iters: None,
            strict_clip: true,
        }
    }
}

impl AttackSettings {
    pub fn config(&self, mean_pixel: Vec<f64>) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            max_iters: self
                .max_iters
                .unwrap_or_else(|| default_max_iters(self.epsilon, self.alpha)),
            mean_pixel,
            strict_clip: self.strict_clip,
        }
    }
}

fn default_rosa_sgd() -> SgdConfig {
    SgdConfig {
        epochs: 3,
        ..SgdConfig::default()
    }
}

fn default_defenses() -> Vec<Defense> {
    vec![
        Defense::None,
        Defense::Smooth { radius: 1 },
        Defense::Quant { bits: 4 },
        Defense::Rosa,
    ]
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 20.0, 30.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Dataset manifest written by `gen-data` (or by hand).
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rosa: RosaConfig,
    #[serde(default)]
    pub crf: CrfParams,
    #[serde(default)]
    pub attack: AttackSettings,
    /// Backbone training.
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Joint backbone + CRF fine-tuning; `epochs = 0` keeps the plain backbone.
    #[serde(default = "default_rosa_sgd")]
    pub rosa_sgd: SgdConfig,
    #[serde(default)]
    pub rosa_train: RosaTrainConfig,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<Defense>,
    #[serde(default = "default_sweep")]
    pub sweep_epsilons: Vec<f64>,
}

impl ExperimentManifest {
    /// Reads a manifest and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .canonicalize()
            .map_err(|e| Error::io(path, e))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        m.dataset = base.join(&m.dataset);
        m.output_dir = base.join(&m.output_dir);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.crf.validate()?;
        self.sgd.validate()?;
        self.rosa_sgd.validate()?;
        self.attack.config(vec![0.0; 3]).validate()?;
        if self.defenses.is_empty() {
            return Err(Error::Config("no defenses selected".into()));
        }
        if let Some(e) = self.sweep_epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("sweep epsilon {e} must be >= 0")));
        }
        if !self.dataset.exists() {
            return Err(Error::Data(format!(
                "dataset manifest {} does not exist",
                self.dataset.display()
            )));
        }
        Ok(())
    }

    pub fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Creates the output directory and records the resolved manifest in it.
    pub fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        write_json(&self.out(RESOLVED_NAME), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
