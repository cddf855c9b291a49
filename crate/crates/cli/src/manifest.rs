//! Per-run provenance. Every artifact-producing command finishes by writing
//! `manifest.json` into its output directory: the command name, the resolved
//! config (with `io.out_dir` rewritten to "." so the directory is
//! relocatable), the config hash, and a checksum row per artifact.
//!
//! A command that writes into a directory that already holds a manifest
//! carries the surviving artifact rows forward, so after a pipeline of
//! commands the latest manifest lists everything present.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mergestream::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRow {
    /// Path relative to the manifest's directory, forward slashes.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub bin_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactRow>,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn artifact_row(out_dir: &Path, rel: &str) -> Result<ArtifactRow> {
    let bytes = fs::read(out_dir.join(rel))?;
    Ok(ArtifactRow { path: rel.to_string(), bytes: bytes.len() as u64, sha256: hash_bytes(&bytes) })
}

pub fn load(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::FormatViolation(format!("manifest {}: {e}", path.display())))
}

/// Writes the manifest for `command`, folding in rows for artifacts listed
/// by any manifest already in `out_dir` whose files still exist. `config`
/// is embedded with a normalized output directory, so byte-identical
/// replays do not depend on where the directory sits.
pub fn write(
    out_dir: &Path,
    command: &str,
    config: &RunConfig,
    new_artifacts: &[String],
) -> Result<Manifest> {
    let mut rel_paths: BTreeSet<String> = new_artifacts.iter().cloned().collect();
    let prior = out_dir.join(MANIFEST_NAME);
    if prior.is_file() {
        for row in load(&prior)?.artifacts {
            if out_dir.join(&row.path).is_file() {
                rel_paths.insert(row.path);
            }
        }
    }

    let mut embedded = config.clone();
    embedded.io.out_dir = ".".into();

    let artifacts = rel_paths
        .iter()
        .map(|rel| artifact_row(out_dir, rel))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        bin_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: embedded.hash()?,
        config: embedded,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::FormatViolation(format!("manifest not serializable: {e}")))?;
    fs::write(prior, text + "\n")?;
    Ok(manifest)
}

/// Re-hashes every artifact listed in `manifest` against the files in
/// `out_dir` and returns the paths that are missing or differ.
pub fn verify(out_dir: &Path, manifest: &Manifest) -> Vec<String> {
    let mut bad = Vec::new();
    for row in &manifest.artifacts {
        match fs::read(out_dir.join(&row.path)) {
            Ok(bytes) => {
                if bytes.len() as u64 != row.bytes || hash_bytes(&bytes) != row.sha256 {
                    bad.push(row.path.clone());
                }
            }
            Err(_) => bad.push(row.path.clone()),
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carry_forward_keeps_existing_rows_and_drops_missing_ones() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        fs::write(dir.path().join("b.txt"), b"beta").unwrap();
        let cfg = RunConfig::default();
        write(dir.path(), "train", &cfg, &["a.txt".into(), "b.txt".into()]).unwrap();

        fs::remove_file(dir.path().join("b.txt")).unwrap();
        fs::write(dir.path().join("c.txt"), b"gamma").unwrap();
        let m = write(dir.path(), "eval", &cfg, &["c.txt".into()]).unwrap();

        let paths: Vec<&str> = m.artifacts.iter().map(|r| r.path.as_str()).collect();
        assert_eq!(paths, vec!["a.txt", "c.txt"]);
        assert_eq!(m.command, "eval");
    }

    #[test]
    fn verify_flags_tampered_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        let m = write(dir.path(), "train", &RunConfig::default(), &["a.txt".into()]).unwrap();
        assert!(verify(dir.path(), &m).is_empty());

        fs::write(dir.path().join("a.txt"), b"alpha!").unwrap();
        assert_eq!(verify(dir.path(), &m), vec!["a.txt".to_string()]);
    }

    #[test]
    fn embedded_out_dir_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        let mut cfg = RunConfig::default();
        cfg.io.out_dir = dir.path().display().to_string();
        let m = write(dir.path(), "train", &cfg, &["a.txt".into()]).unwrap();
        assert_eq!(m.config.io.out_dir, ".");
    }
}
