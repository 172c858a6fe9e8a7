//! TOML configuration shared by every command.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [dataset]
//! manifest = "data/manifest.jsonl"
//! split = "data/split.json"      # optional, overrides the inline split
//! image_root = "data/frames"     # optional, defaults to the manifest directory
//! subset = "test"                # train | test | all
//!
//! [endpoint]
//! base_url = "http://127.0.0.1:8000/v1"
//! model_name = "my-vlm"
//! temperature = 0.0
//! max_tokens = 1024
//! timeout_seconds = 120
//! max_concurrency = 4
//! retry_policy = { max_attempts = 3, backoff_base_seconds = 1.0 }
//!
//! [rewards]
//! tau = 100.0
//! weights = { acc = 1, format = 1, reason = 1, iou = 1, dist = 1 }
//!
//! [tool]
//! mode = "inference"             # training | inference | no-rectify
//! fallback = "stub-definition"   # stub-definition | reject
//!
//! [run]
//! max_failure_rate = 0.5
//!
//! [review]
//! bind = "127.0.0.1:8080"
//! sessions_dir = "out/review/sessions"
//! systems = { ours = "dumps/ours.jsonl", baseline = "dumps/baseline.jsonl" }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gozone_core::dataset::SplitSelector;
use gozone_core::phasetool::{MissingPhaseFallback, ToolMode};
use gozone_core::rewards::RewardConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::EndpointConfig;
use crate::orchestrator::RunPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{what} is not set")]
    Missing { what: &'static str },
    #[error("{what} does not exist: {path}")]
    NotFound { what: &'static str, path: PathBuf },
    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub subset: SplitSelector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSection {
    pub mode: ToolMode,
    pub fallback: MissingPhaseFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSection {
    pub bind: String,
    pub sessions_dir: Option<PathBuf>,
    /// System name to predictions dump.
    pub systems: BTreeMap<String, PathBuf>,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), sessions_dir: None, systems: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub endpoint: EndpointConfig,
    pub rewards: RewardConfig,
    pub tool: ToolSection,
    pub run: RunPolicy,
    pub review: ReviewSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            endpoint: EndpointConfig::default(),
            rewards: RewardConfig::default(),
            tool: ToolSection::default(),
            run: RunPolicy::default(),
            review: ReviewSection::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl HarnessConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Read a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.out_dir);
        for p in [&mut self.dataset.manifest, &mut self.dataset.split, &mut self.dataset.image_root, &mut self.review.sessions_dir]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        for p in self.review.systems.values_mut() {
            rebase(base, p);
        }
    }

    /// Manifest path, which must exist.
    pub fn manifest_path(&self) -> Result<&Path, ConfigError> {
        let p = self.dataset.manifest.as_deref().ok_or(ConfigError::Missing { what: "dataset.manifest" })?;
        exists("dataset.manifest", p)?;
        if let Some(split) = &self.dataset.split {
            exists("dataset.split", split)?;
        }
        Ok(p)
    }

    pub fn image_root(&self) -> PathBuf {
        match (&self.dataset.image_root, &self.dataset.manifest) {
            (Some(root), _) => root.clone(),
            (None, Some(m)) => m.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, None) => PathBuf::from("."),
        }
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.review
            .sessions_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("review").join("sessions"))
    }

    pub fn validate_settings(&self) -> Result<(), ConfigError> {
        self.endpoint
            .validate()
            .map_err(|e| ConfigError::Invalid { what: "endpoint", message: e.to_string() })?;
        self.rewards
            .validate()
            .map_err(|e| ConfigError::Invalid { what: "rewards", message: e.to_string() })?;
        let r = self.run.max_failure_rate;
        if !(0.0..=1.0).contains(&r) {
            return Err(ConfigError::Invalid {
                what: "run.max_failure_rate",
                message: format!("{r} is outside [0, 1]"),
            });
        }
        Ok(())
    }
}

fn exists(what: &'static str, p: &Path) -> Result<(), ConfigError> {
    if p.exists() {
        Ok(())
    } else {
        Err(ConfigError::NotFound { what, path: p.to_path_buf() })
    }
}
