//! Run manifests: which experiment ran, with what configuration and seed,
//! under which code version, and a content hash of every file it wrote.
//!
//! `manifest.json` lives next to the outputs. Paths are relative to the
//! output directory and listed in sorted order, so identical runs produce
//! identical manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// SHA-256 of the resolved configuration's TOML serialization.
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// Hashes `files` (relative to `out`) and writes `manifest.json`.
    pub fn write(out: &Path, kind: ExperimentKind, config: &ExperimentConfig, files: &[String]) -> Result<Manifest> {
        let mut config = config.clone();
        // The output location is not part of an experiment's identity.
        config.out = None;
        config.experiment = Some(kind);
        let mut sorted = files.to_vec();
        sorted.sort();
        sorted.dedup();
        let files = sorted
            .into_iter()
            .map(|path| {
                let bytes = std::fs::read(out.join(&path))?;
                Ok(FileEntry {
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                    path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "prunelab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: kind,
            seed: config.seed,
            config_sha256: sha256_hex(config.to_toml().as_bytes()),
            config,
            files,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(out.join(MANIFEST_FILE), json + "\n")?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::MissingInput(format!("manifest {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("corrupt manifest {}: {e}", path.display())))
    }

    /// Files whose current content no longer matches the recorded hash.
    pub fn stale_files(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| {
                std::fs::read(dir.join(&f.path))
                    .map(|b| sha256_hex(&b) != f.sha256)
                    .unwrap_or(true)
            })
            .map(|f| f.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_and_verifies_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.tsv"), "x\n").unwrap();
        std::fs::write(dir.path().join("a.tsv"), "y\n").unwrap();
        let config = ExperimentConfig::parse(
            "[corpus]\ntask = \"reversal\"\nn_symbols = 6\nmin_len = 2\nmax_len = 4\ntrain_size = 20\neval_size = 10\n",
        )
        .unwrap();
        let m = Manifest::write(
            dir.path(),
            ExperimentKind::Prune,
            &config,
            &["b.tsv".into(), "a.tsv".into()],
        )
        .unwrap();
        assert_eq!(
            m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(),
            ["a.tsv", "b.tsv"]
        );
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        assert!(m.stale_files(dir.path()).is_empty());
        std::fs::write(dir.path().join("a.tsv"), "changed\n").unwrap();
        assert_eq!(m.stale_files(dir.path()), vec!["a.tsv".to_string()]);
    }
}
