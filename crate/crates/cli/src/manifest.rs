//! Content-hash manifests for output directories.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).expect("inside root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if dir == root && rel == MANIFEST_NAME {
            continue;
        }
        let bytes = std::fs::read(&p).with_context(|| format!("cannot read {}", p.display()))?;
        out.push(ManifestEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    Ok(())
}

/// Hashes every file below `dir` (except an existing top-level manifest)
/// and writes `manifest.json` there. Entries are sorted by path.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let m = Manifest { files };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())?;
    Ok(m)
}

/// Files whose current content differs from, or is missing in, the manifest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let mut current = Vec::new();
    collect(dir, dir, &mut current)?;
    let mut bad = Vec::new();
    for e in &current {
        if !m.files.contains(e) {
            bad.push(e.path.clone());
        }
    }
    for e in &m.files {
        if !current.iter().any(|c| c.path == e.path) {
            bad.push(e.path.clone());
        }
    }
    Ok(bad)
}
