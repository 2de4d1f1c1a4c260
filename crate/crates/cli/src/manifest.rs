//! `manifest.json`: what ran, on which inputs, producing which files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Every regular file under `path` (or `path` itself), sorted.
fn files_under(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn digest_inputs(paths: &[&Path]) -> anyhow::Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in paths {
        for f in files_under(p)? {
            if f.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            out.push(FileDigest {
                sha256: sha256_file(&f)?,
                path: f.display().to_string(),
            });
        }
    }
    Ok(out)
}

fn digest_artifacts(out_dir: &Path) -> anyhow::Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for f in files_under(out_dir)? {
        let rel = f.strip_prefix(out_dir).unwrap_or(&f);
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        out.push(FileDigest {
            sha256: sha256_file(&f)?,
            path: rel.display().to_string(),
        });
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, inputs: Vec<FileDigest>) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            artifacts: Vec::new(),
            started_at: now,
            finished_at: now,
        }
    }

    /// Digests everything in `out_dir` and writes the manifest there.
    pub fn finish(mut self, out_dir: &Path) -> anyhow::Result<Self> {
        self.artifacts = digest_artifacts(out_dir)?;
        self.finished_at = Utc::now();
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self)
    }

    pub fn read(out_dir: &Path) -> anyhow::Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Artifacts whose current digest differs from the recorded one.
    pub fn stale_artifacts(&self, out_dir: &Path) -> anyhow::Result<Vec<String>> {
        let mut stale = Vec::new();
        for a in &self.artifacts {
            let p = out_dir.join(&a.path);
            if !p.exists() || sha256_file(&p)? != a.sha256 {
                stale.push(a.path.clone());
            }
        }
        Ok(stale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_verify_and_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
        let m = RunManifest::new("test", 1, serde_json::json!({}), Vec::new())
            .finish(dir.path())
            .unwrap();
        assert_eq!(m.artifacts.len(), 2);
        // sha256("alpha")
        assert_eq!(
            m.artifacts[0].sha256,
            "8ed3f6ad685b959ead7022518e1af76cd816f8e8ec7ccdda1ed4018e8f2223f8"
        );
        let back = RunManifest::read(dir.path()).unwrap();
        assert!(back.stale_artifacts(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("a.txt"), "changed").unwrap();
        assert_eq!(back.stale_artifacts(dir.path()).unwrap(), vec!["a.txt"]);
    }
}
