//! Experiment manifests, dataset references and config-file loading.

use std::fs;
use std::path::{Path, PathBuf};

use infomtl::data::{generate_synthetic, load_dataset, MultiTaskDataset, SyntheticConfig};
use infomtl::trainer::TrainConfig;
use infomtl::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// File written into every run directory recording where its data came from.
pub const DATA_SOURCE_FILE: &str = "data.json";

/// Where a dataset comes from: a manifest on disk or an in-memory synthetic
/// generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Manifest(PathBuf),
    Synthetic(SyntheticConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    /// Resolve a relative manifest path against `base`.
    pub fn resolved(self, base: &Path) -> DataSource {
        match self {
            DataSource::Manifest(p) if p.is_relative() => DataSource::Manifest(base.join(p)),
            other => other,
        }
    }

    pub fn load(&self) -> Result<MultiTaskDataset> {
        match self {
            DataSource::Manifest(p) => load_dataset(p),
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
        }
    }

    /// Absolute form used when the reference is persisted next to a run.
    pub fn absolute(self) -> Result<DataSource> {
        match self {
            DataSource::Manifest(p) => Ok(DataSource::Manifest(
                fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?,
            )),
            other => Ok(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default)]
    pub dataset: DataSource,
    pub configs: Vec<TrainConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Relative paths are taken from the manifest's directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub delta_p: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_fractions() -> Vec<f64> {
    vec![1.0]
}

fn default_true() -> bool {
    true
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "experiment name {:?} must be a plain non-empty name",
                self.name
            )));
        }
        if self.configs.is_empty() {
            return Err(Error::Config("experiment lists no configurations".into()));
        }
        let mut names: Vec<String> = self
            .configs
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.normalize();
                c.name
            })
            .collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "method name {:?} appears more than once",
                w[0]
            )));
        }
        Ok(())
    }
}

/// Read a JSON config file; a malformed document is a configuration error.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The dataset a run directory was trained on.
pub fn run_data_source(run: &Path) -> Result<DataSource> {
    read_config(&run.join(DATA_SOURCE_FILE))
}
