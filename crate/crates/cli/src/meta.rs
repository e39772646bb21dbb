//! `.meta.json` provenance written next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use npd_core::io;
use npd_core::{NpdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub policy_version: Option<u32>,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(artifact: &Path, meta: &Meta) -> Result<()> {
    io::write_json(meta, &meta_path(artifact))
}

pub fn read_meta(artifact: &Path) -> Result<Meta> {
    io::read_json(&meta_path(artifact))
}

/// Timing of a phase recorded by the command that produced `artifact`, if
/// its provenance names `policy_version`.
pub fn phase_wall_ms(artifact: &Path, policy_version: u32) -> Result<Option<f64>> {
    match read_meta(artifact) {
        Ok(m) if m.policy_version == Some(policy_version) => Ok(Some(m.wall_ms)),
        Ok(_) | Err(NpdError::MissingArtifact(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
