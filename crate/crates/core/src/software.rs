//! Site software catalog: maps `SoftwareRequirement` package names to
//! environment changes (variables and `PATH` prefixes) on this machine.
//!
//! The catalog is a YAML mapping selected with `--software-catalog`:
//!
//! ```yaml
//! mesonh:
//!   versions: ["5.4", "5.5"]
//!   env_set: {MESONH_ROOT: /opt/mnh}
//!   path_prepend: [/opt/mnh/bin]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdline::CommandPlan;
use crate::model::{SoftwarePackage, SoftwareRequirementDecl};
use crate::mpi_config::MpiPlatformConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogEntry {
    /// Installed versions; `None` means the site does not pin versions.
    pub versions: Option<Vec<String>>,
    pub env_set: BTreeMap<String, String>,
    pub path_prepend: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteCatalog {
    pub entries: BTreeMap<String, CatalogEntry>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read software catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid software catalog {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SoftwareError {
    #[error("software package {0:?} is not available in the site catalog")]
    Unresolved(String),
    #[error("software package {name:?}: none of the requested versions {wanted:?} is installed (have {have:?})")]
    VersionUnsatisfied {
        name: String,
        wanted: Vec<String>,
        have: Vec<String>,
    },
}

impl SiteCatalog {
    pub fn from_yaml_str(text: &str, label: &str) -> Result<SiteCatalog, CatalogError> {
        let invalid = |message: String| CatalogError::Invalid {
            path: label.to_string(),
            message,
        };
        if text.trim().is_empty() {
            return Ok(SiteCatalog::default());
        }
        let catalog: SiteCatalog = serde_yaml::from_str::<Option<SiteCatalog>>(text)
            .map_err(|e| invalid(e.to_string()))?
            .unwrap_or_default();
        for (name, entry) in &catalog.entries {
            if name.is_empty() {
                return Err(invalid("package names must be non-empty".into()));
            }
            if let Some(dir) = entry.path_prepend.iter().find(|d| !d.is_absolute()) {
                return Err(invalid(format!(
                    "{name}: path_prepend entry {} is not an absolute path",
                    dir.display()
                )));
            }
        }
        Ok(catalog)
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries.get(name)
    }
}

pub fn load_catalog(path: &Path) -> Result<SiteCatalog, CatalogError> {
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: label.clone(),
        source,
    })?;
    SiteCatalog::from_yaml_str(&text, &label)
}

/// An updated plan plus warnings for optional packages that could not be resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub plan: CommandPlan,
    pub warnings: Vec<String>,
}

fn lookup<'c>(package: &SoftwarePackage, catalog: &'c SiteCatalog) -> Result<&'c CatalogEntry, SoftwareError> {
    let entry = catalog
        .get(&package.name)
        .ok_or_else(|| SoftwareError::Unresolved(package.name.clone()))?;
    if let (false, Some(have)) = (package.versions.is_empty(), &entry.versions) {
        if !package.versions.iter().any(|v| have.contains(v)) {
            return Err(SoftwareError::VersionUnsatisfied {
                name: package.name.clone(),
                wanted: package.versions.clone(),
                have: have.clone(),
            });
        }
    }
    Ok(entry)
}

/// Applies each package's catalog entry to `plan`.
///
/// MPI `env_set` values on an MPI-active plan are never replaced. `optional`
/// marks a requirement that came from `hints`: unresolved packages then only
/// warn.
pub fn resolve(
    req: &SoftwareRequirementDecl,
    optional: bool,
    catalog: &SiteCatalog,
    plan: &CommandPlan,
    cfg: &MpiPlatformConfig,
) -> Result<Resolution, SoftwareError> {
    let mut plan = plan.clone();
    let mut warnings = Vec::new();
    let protected = |name: &str| plan.mpi_active && cfg.env_set.contains_key(name);

    let mut prepend: Vec<String> = Vec::new();
    for package in &req.packages {
        let entry = match lookup(package, catalog) {
            Ok(entry) => entry,
            Err(e) if optional => {
                warnings.push(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        for (name, value) in &entry.env_set {
            if protected(name) {
                warnings.push(format!("{}: keeping MPI config value of {name}", package.name));
                continue;
            }
            plan.env.insert(name.clone(), value.clone());
        }
        prepend.extend(entry.path_prepend.iter().map(|d| d.to_string_lossy().into_owned()));
    }

    if !prepend.is_empty() {
        if protected("PATH") {
            warnings.push("keeping MPI config value of PATH".to_string());
        } else {
            let existing = plan.env.get("PATH").cloned().unwrap_or_default();
            let rest = existing
                .split(':')
                .filter(|d| !d.is_empty() && !prepend.iter().any(|p| p == d))
                .map(str::to_string)
                .collect::<Vec<_>>();
            let mut dirs: Vec<String> = Vec::new();
            for dir in prepend.into_iter().chain(rest) {
                if !dirs.contains(&dir) {
                    dirs.push(dir);
                }
            }
            plan.env.insert("PATH".into(), dirs.join(":"));
        }
    }
    Ok(Resolution { plan, warnings })
}
