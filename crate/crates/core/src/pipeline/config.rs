use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{read_emb1, EmbeddingDataset, Manifest, Role, ScenarioConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metric_head::{IncrementalOptions, PaHyperparams};
use crate::pseudo_label::ApConfig;
use crate::splitter::SplitConfig;

/// Where the features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Emb1 { path: PathBuf },
    /// A manifest with exactly one `source` entry.
    Manifest { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<EmbeddingDataset> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Emb1 { path } => read_emb1(path),
            DataSource::Manifest { path } => {
                let manifest = Manifest::read(path)?;
                let sources: Vec<_> = manifest.files.iter().filter(|f| f.role == Role::Source).collect();
                let [entry] = sources.as_slice() else {
                    return Err(Error::Config(format!(
                        "manifest {} must list exactly one source file, found {}",
                        path.display(),
                        sources.len()
                    )));
                };
                let dir = path.parent().unwrap_or(Path::new("."));
                read_emb1(dir.join(&entry.path))
            }
        }
    }
}

/// One JSON document describing a full run. Everything except `data` and
/// `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub head: PaHyperparams,
    #[serde(default)]
    pub clustering: ApConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub incremental: IncrementalOptions,
    /// Seed of the training streams (init, shuffle, replay, split network).
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn synthetic(data: SyntheticConfig, seed: u64) -> Self {
        Self {
            data: DataSource::Synthetic(data),
            scenario: ScenarioConfig::default(),
            head: PaHyperparams::default(),
            clustering: ApConfig::default(),
            split: SplitConfig::default(),
            incremental: IncrementalOptions::default(),
            seed,
            out_dir: None,
        }
    }

    /// Reads a config; relative data paths resolve against the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.data {
            DataSource::Emb1 { path } | DataSource::Manifest { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        Ok(cfg)
    }

    /// Sets the training, scenario and generator seeds at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.scenario.validate().map_err(config)?;
        self.head.validate().map_err(config)?;
        self.clustering.validate().map_err(config)?;
        self.split.validate().map_err(config)?;
        match &self.data {
            DataSource::Emb1 { path } | DataSource::Manifest { path } if !path.is_file() => {
                Err(Error::Config(format!("data file {} does not exist", path.display())))
            }
            DataSource::Synthetic(s) if s.n_classes < 2 || s.per_class < 2 || s.d_in == 0 => {
                Err(Error::Config("synthetic data needs >= 2 classes, >= 2 samples per class, d_in >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// The config with run-local fields removed; stored in checkpoints to
    /// refuse resuming under different settings.
    pub fn fingerprint(&self) -> Result<serde_json::Value> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(serde_json::to_value(c)?)
    }
}
