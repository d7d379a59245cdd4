use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::digest;
use crate::archive::{read_file, read_text, write_atomic};
use crate::error::{Error, Result};

/// What a stage consumed and produced, keyed by paths relative to the work
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn load(workdir: &Path) -> Result<Self> {
        let path = workdir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        toml::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, workdir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot encode manifest: {e}")))?;
        write_atomic(&workdir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// The stage whose recorded outputs include `artifact`.
    pub fn producer(&self, artifact: &str) -> Option<(&str, &StageRecord)> {
        self.stages
            .iter()
            .find(|(_, r)| r.outputs.contains_key(artifact))
            .map(|(k, r)| (k.as_str(), r))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(read_file(path)?))
}

pub(crate) fn abs(workdir: &Path, p: &str) -> PathBuf {
    workdir.join(p)
}
