//! Run configuration: one JSON document. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::at::AtConfig;
use crate::attack::AttackConfig;
use crate::data::{load_cifar10, Dataset, Style, SynthSpec, ThreatLevel};
use crate::dfs::DfsConfig;
use crate::error::{Error, Result};
use crate::keyed::{parse_keys, read_keys};
use crate::model::{ArchConfig, ProbeConfig, TrainConfig};
use crate::transport::ClusterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// CIFAR-10 binary batch files, used when `kind` is `cifar10`.
    pub cifar10_train: Option<PathBuf>,
    pub cifar10_test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DataKind::Synthetic, train_size: 3000, test_size: 500, seed: 0, cifar10_train: None, cifar10_test: None }
    }
}

impl DataConfig {
    pub fn load(&self, arch: &ArchConfig) -> Result<Dataset> {
        let data = match self.kind {
            DataKind::Synthetic => {
                if arch.height != arch.width || arch.in_channels != 1 {
                    return Err(Error::Config("synthetic data is single-channel and square".into()));
                }
                let spec = SynthSpec { size: arch.height, style: Style::Base, seed: self.seed };
                Dataset::synthetic(spec, self.train_size, self.test_size)
            }
            DataKind::Cifar10 => {
                let path = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("data.{what} is required for cifar10")))
                };
                let mut train = load_cifar10(&path(&self.cifar10_train, "cifar10_train")?)?;
                let mut test = load_cifar10(&path(&self.cifar10_test, "cifar10_test")?)?;
                train.truncate(self.train_size);
                test.truncate(self.test_size);
                Dataset { train, test, synth: None }
            }
        };
        if let Some(s) = data.train.first().or(data.test.first()) {
            if s.image.shape() != (arch.in_channels, arch.height, arch.width) {
                return Err(Error::Config(format!("images are {:?}, architecture expects {:?}", s.image.shape(), (arch.in_channels, arch.height, arch.width))));
            }
        }
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreatConfig {
    pub level: ThreatLevel,
    /// Sample budget for levels 1 and 2.
    pub budget: usize,
}

impl Default for ThreatConfig {
    fn default() -> Self {
        Self { level: ThreatLevel::InDistribution, budget: crate::data::MAX_LIMITED_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub dfs: DfsConfig,
    pub train: TrainConfig,
    pub at: AtConfig,
    pub data: DataConfig,
    pub threat: ThreatConfig,
    pub cluster: ClusterConfig,
    pub attack: AttackConfig,
    pub probe: ProbeConfig,
    /// Policy keys as 16-digit hex strings. One key trains base models,
    /// several train a keyed family.
    pub keys: Vec<String>,
    /// Alternative to `keys`: a key file as written by `keygen`.
    pub keys_file: Option<PathBuf>,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(kf), Some(dir)) = (&cfg.keys_file, path.parent()) {
            if kf.is_relative() {
                cfg.keys_file = Some(dir.join(kf));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate(&self.dfs)?;
        self.train.validate()?;
        self.at.validate()?;
        if !self.keys.is_empty() && self.keys_file.is_some() {
            return Err(Error::Config("give either keys or keys_file, not both".into()));
        }
        if !self.keys.is_empty() {
            parse_keys(&self.keys.join("\n"))?;
        }
        if !self.cluster.servers.is_empty() {
            self.cluster.validate(self.dfs.num_branches)?;
        }
        Ok(())
    }

    /// The configured keys, read from `keys_file` when set.
    pub fn keys(&self) -> Result<Vec<u64>> {
        let keys = match &self.keys_file {
            Some(p) => read_keys(p)?,
            None => parse_keys(&self.keys.join("\n"))?,
        };
        if keys.is_empty() {
            return Err(Error::Config("no policy keys configured".into()));
        }
        Ok(keys)
    }
}
