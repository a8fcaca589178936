//! Run manifest: config hash, artifact registry, timestamps, and the
//! code version, written as `run.json` in the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// artifact name -> path, relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join("run.json")
    }

    pub fn load_or_new(output_dir: &Path, config_hash: &str) -> anyhow::Result<RunManifest> {
        let path = Self::path(output_dir);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let manifest: RunManifest = serde_json::from_str(&text)?;
            if manifest.config_hash != config_hash {
                anyhow::bail!(
                    "output dir {} belongs to config hash {}, current config hashes to {}; \
                     use a fresh output dir or --force",
                    output_dir.display(),
                    manifest.config_hash,
                    config_hash
                );
            }
            Ok(manifest)
        } else {
            let now = unix_now();
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                code_version: code_version(),
                created_unix: now,
                updated_unix: now,
                artifacts: BTreeMap::new(),
            })
        }
    }

    pub fn record(&mut self, name: &str, relative: impl Into<PathBuf>) {
        self.artifacts.insert(name.to_string(), relative.into());
    }

    pub fn artifact(&self, name: &str) -> Option<&PathBuf> {
        self.artifacts.get(name)
    }

    /// Writes the manifest after checking that every artifact exists.
    pub fn write(&mut self, output_dir: &Path) -> anyhow::Result<()> {
        for (name, rel) in &self.artifacts {
            let p = output_dir.join(rel);
            if !p.exists() {
                anyhow::bail!("artifact {name} missing at {}", p.display());
            }
        }
        self.updated_unix = unix_now();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path(output_dir), text)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `git describe` of the working tree when available, falling back to the
/// crate version.
pub fn code_version() -> String {
    let from_git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    from_git.unwrap_or_else(|| format!("grond-{}", env!("CARGO_PKG_VERSION")))
}
