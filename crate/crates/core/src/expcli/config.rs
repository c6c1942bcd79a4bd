//! Experiment configuration, read from a TOML document.
//!
//! ```toml
//! model = "model.json"
//! vocab = "vocab.json"
//! prompts = "prompts.jsonl"
//! eval_model = "eval_model.json"
//! out_dir = "out"
//! methods = ["none", "lidao_min"]
//! n_continuations = 10
//!
//! [intervention]
//! max_len = 4
//!
//! [method.lidao_min]
//! lr = 2.0
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{InterventionConfig, Method};
use crate::error::{LabError, Result};
use crate::eval::DEFAULT_SANITIZE_THRESHOLD;
use crate::seqcore::{SamplingConfig, Task};

fn default_continuations() -> usize {
    10
}

fn default_threshold() -> f64 {
    DEFAULT_SANITIZE_THRESHOLD
}

fn default_groups() -> [String; 2] {
    ["male".to_string(), "female".to_string()]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub vocab: PathBuf,
    pub prompts: PathBuf,
    pub eval_model: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    #[serde(default = "default_continuations")]
    pub n_continuations: usize,
    #[serde(default = "default_threshold")]
    pub sanitize_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Property whose proxy steers generation.
    #[serde(default = "default_task")]
    pub task: Task,
    /// The two groups compared by the reports, `m` first.
    #[serde(default = "default_groups")]
    pub groups: [String; 2],
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Settings shared by every method.
    #[serde(default)]
    pub intervention: InterventionConfig,
    /// Per-method overrides of `intervention`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub method: BTreeMap<String, toml::Table>,
}

fn default_task() -> Task {
    Task::Sentiment
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.model,
            &mut self.vocab,
            &mut self.prompts,
            &mut self.eval_model,
            &mut self.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(LabError::Config("methods must be nonempty".into()));
        }
        if self.n_continuations == 0 {
            return Err(LabError::Config("n_continuations must be >= 1".into()));
        }
        if !(self.sanitize_threshold > 0.0) {
            return Err(LabError::Config("sanitize_threshold must be positive".into()));
        }
        for name in self.method.keys() {
            name.parse::<Method>()?;
        }
        self.sampling.validate()?;
        for &m in &self.methods {
            self.intervention_for(m)?;
        }
        Ok(())
    }

    /// Shared settings with the method's overrides applied.
    pub fn intervention_for(&self, method: Method) -> Result<InterventionConfig> {
        let base = toml::Table::try_from(self.intervention)
            .map_err(|e| LabError::Config(e.to_string()))?;
        let mut merged = base;
        if let Some(over) = self.method.get(method.name()) {
            for (k, v) in over {
                if k == "method" {
                    return Err(LabError::Config("per-method tables cannot set `method`".into()));
                }
                if !merged.contains_key(k) {
                    return Err(LabError::Config(format!(
                        "unknown intervention key `{k}` for method {method}"
                    )));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        let cfg: InterventionConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        let cfg = cfg.with_method(method);
        cfg.validate()?;
        Ok(cfg)
    }
}
