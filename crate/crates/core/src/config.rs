//! Application configuration shared by the CLI and the service (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evo::GaConfig;
use crate::hierarchy::{HierarchyConfig, HierarchyError, MissingPolicy};
use crate::inference::PriorConfig;
use crate::phenotyping::CertaintyConfig;
use crate::sim::SimConfig;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "MICG_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodSettings {
    pub tau_sq: f64,
}

impl Default for LikelihoodSettings {
    fn default() -> Self {
        LikelihoodSettings { tau_sq: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden_layers: Vec<usize>,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings { hidden_layers: vec![16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    /// Size of the surrogate training set.
    pub samples: usize,
    /// Seed for drawing training weight vectors.
    pub seed: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings { samples: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub bind: String,
    pub data_dir: PathBuf,
    pub auth_token: Option<String>,
    pub session_ttl_secs: i64,
    /// Extra questionnaire JSON files served next to the built-in one.
    pub questionnaires: Vec<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("micg-data"),
            auth_token: None,
            session_ttl_secs: 24 * 3600,
            questionnaires: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Hierarchy JSON; the shipped default is used when absent.
    pub hierarchy: Option<PathBuf>,
    pub missing_policy: MissingPolicy,
    pub prior: PriorConfig,
    pub certainty: CertaintyConfig,
    pub likelihood: LikelihoodSettings,
    pub network: NetworkSettings,
    pub training: TrainingSettings,
    pub ga: GaConfig,
    pub simulation: SimConfig,
    pub server: ServerSettings,
}

impl AppConfig {
    /// Loads `path`, or the defaults when `None`. Relative paths inside the
    /// file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: AppConfig = toml::from_str(&text).map_err(|source| ConfigError::Toml { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(h) = cfg.hierarchy.as_mut() {
            if h.is_relative() {
                *h = base.join(&*h);
            }
        }
        if cfg.server.data_dir.is_relative() {
            cfg.server.data_dir = base.join(&cfg.server.data_dir);
        }
        for q in cfg.server.questionnaires.iter_mut() {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        }
        Ok(cfg)
    }

    /// Sets every seed (simulation, training draws, GA).
    pub fn set_seed(&mut self, seed: u64) {
        self.simulation.seed = seed;
        self.training.seed = seed;
        self.ga.seed = seed;
    }

    pub fn load_hierarchy(&self) -> Result<HierarchyConfig, ConfigError> {
        match &self.hierarchy {
            None => Ok(HierarchyConfig::default_config()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                Ok(HierarchyConfig::from_json_validated(&text)?)
            }
        }
    }
}
