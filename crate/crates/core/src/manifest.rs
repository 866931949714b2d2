//! Reproducibility record written next to every command's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{file_sha256, sha256_hex};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Command, resolved configuration and artifact digests. Holds no
/// timestamps or absolute paths so identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

/// SHA-256 of the compact JSON form with sorted object keys.
pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is on.
    sha256_hex(config.to_string().as_bytes())
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(RunManifest {
            tool: "cape".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config_hash(&config),
            seed,
            config,
            artifacts: Vec::new(),
        })
    }

    /// Records the digests of files under `dir`, given relative to it.
    pub fn add_artifacts<S: AsRef<str>>(&mut self, dir: &Path, paths: &[S]) -> Result<()> {
        for p in paths {
            let p = p.as_ref();
            self.artifacts.push(Artifact {
                path: p.replace('\\', "/"),
                sha256: file_sha256(dir.join(p))?,
            });
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.artifacts.dedup_by(|a, b| a.path == b.path);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME))?)?)
    }
}
