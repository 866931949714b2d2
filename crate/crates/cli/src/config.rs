//! JSON config files and seed resolution.
//!
//! Precedence, highest first: command-line flag, config file, the
//! `CAPE_SEED` environment variable (seeds only), built-in default.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cape_core::backbone::Architecture;
use cape_core::training::TrainConfig;
use cape_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "CAPE_SEED";

/// Parsed config plus the raw JSON, so callers can tell which keys were
/// present.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, serde_json::Value)> {
    let Some(path) = path else {
        return Ok((T::default(), serde_json::Value::Null));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("config {} is not valid JSON: {e}", path.display())))?;
    let parsed = serde_json::from_value(raw.clone())
        .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
    Ok((parsed, raw))
}

pub fn resolve_seed(flag: Option<u64>, from_file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(from_file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?),
        Err(_) => Ok(0),
    }
}

/// Seed given explicitly at `pointer` (JSON pointer) in a raw config.
pub fn file_seed(raw: &serde_json::Value, pointer: &str) -> Option<u64> {
    raw.pointer(pointer).and_then(|v| v.as_u64())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub training: TrainConfig,
    pub architecture: Architecture,
}
