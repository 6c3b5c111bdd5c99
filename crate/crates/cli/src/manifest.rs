use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use rcdn_core::data::{hex, MANIFEST_FILE};
use rcdn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// Git-style blob hash (`sha256("blob <len>\0" ++ bytes)`) of the dataset manifest.
    pub manifest_hash: String,
}

/// Record written next to every set of artifacts; `args` and `config`
/// are enough to rerun the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<DatasetRef>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn dataset_ref(root: &Path) -> Result<DatasetRef> {
    let path = root.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(DatasetRef {
        path: root.to_path_buf(),
        manifest_hash: blob_hash(&bytes),
    })
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct RunRecorder {
    command: &'static str,
    started: DateTime<Utc>,
}

impl RunRecorder {
    pub fn start(command: &'static str) -> Self {
        RunRecorder {
            command,
            started: Utc::now(),
        }
    }

    pub fn write(&self, dir: &Path, seed: u64, config: &impl Serialize, dataset: Option<DatasetRef>) -> Result<()> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            args: std::env::args().collect(),
            seed,
            config: serde_json::to_value(config)?,
            dataset,
            started_at: timestamp(self.started),
            finished_at: timestamp(Utc::now()),
        };
        let path = dir.join(RUN_MANIFEST_FILE);
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_object_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
