//! Platform configuration for MPI launches, read from `--mpi-config-file`.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so a misspelt `nproc_flag` cannot silently produce serial runs.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpiPlatformConfig {
    /// Launcher command, e.g. `mpirun`, `srun`, `aprun`.
    pub runner: String,
    /// Flag that introduces the process count.
    pub nproc_flag: String,
    /// Used when an MPI requirement does not say how many processes to start.
    pub default_nproc: u64,
    /// Inserted between the process count and the tool's command.
    pub extra_flags: Vec<String>,
    /// Host variables passed through by exact name.
    pub env_pass: Vec<String>,
    /// Host variables passed through when the whole name matches a pattern.
    pub env_pass_regex: Vec<String>,
    /// Variables forced to a value; these win over anything passed through.
    pub env_set: BTreeMap<String, String>,
}

impl Default for MpiPlatformConfig {
    fn default() -> Self {
        Self {
            runner: "mpirun".into(),
            nproc_flag: "-n".into(),
            default_nproc: 1,
            extra_flags: Vec::new(),
            env_pass: Vec::new(),
            env_pass_regex: Vec::new(),
            env_set: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read MPI config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid MPI config {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("invalid MPI config {path}: {}", diagnostics.join("; "))]
    Invalid { path: String, diagnostics: Vec<String> },
}

/// Compiles `pattern` so that it must match an entire variable name.
pub fn full_match_regex(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(&format!("^(?:{pattern})$"))
}

impl MpiPlatformConfig {
    pub fn from_yaml_str(text: &str, label: &str) -> Result<Self, ConfigError> {
        let cfg: MpiPlatformConfig = if text.trim().is_empty() {
            MpiPlatformConfig::default()
        } else {
            serde_yaml::from_str::<Option<MpiPlatformConfig>>(text)
                .map_err(|e| ConfigError::Malformed {
                    path: label.to_string(),
                    message: e.to_string(),
                })?
                .unwrap_or_default()
        };
        let diagnostics = validate_config(&cfg);
        if diagnostics.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid {
                path: label.to_string(),
                diagnostics,
            })
        }
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("config always serializes")
    }

    /// Compiled `env_pass_regex` patterns. Call on validated configs.
    pub fn pass_patterns(&self) -> Vec<Regex> {
        self.env_pass_regex
            .iter()
            .filter_map(|p| full_match_regex(p).ok())
            .collect()
    }
}

/// Loads the configuration; with no path the defaults are returned.
pub fn load_config(path: Option<&Path>) -> Result<MpiPlatformConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(MpiPlatformConfig::default());
    };
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: label.clone(),
        source,
    })?;
    MpiPlatformConfig::from_yaml_str(&text, &label)
}

pub fn validate_config(cfg: &MpiPlatformConfig) -> Vec<String> {
    let mut diagnostics = Vec::new();
    if cfg.runner.is_empty() {
        diagnostics.push("runner must be non-empty".to_string());
    }
    if cfg.nproc_flag.is_empty() {
        diagnostics.push("nproc_flag must be non-empty".to_string());
    }
    if cfg.default_nproc < 1 {
        diagnostics.push("default_nproc must be at least 1".to_string());
    }
    for pattern in &cfg.env_pass_regex {
        if let Err(e) = full_match_regex(pattern) {
            diagnostics.push(format!("invalid pattern {pattern:?} in env_pass_regex: {e}"));
        }
    }
    diagnostics
}
