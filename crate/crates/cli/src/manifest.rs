//! Run manifests: what was run, with which configuration, and the hash of every file.

use std::fs;
use std::path::{Path, PathBuf};

use ibft_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub duration_secs: f64,
    pub version: String,
}

/// Every regular file under `dir`, as sorted paths relative to `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Hashes for every file of a run directory except the manifest itself.
pub fn hash_outputs(dir: &Path) -> Result<Vec<FileHash>> {
    list_files(dir)?
        .into_iter()
        .filter(|p| p != Path::new(MANIFEST_FILE))
        .map(|p| Ok(FileHash { sha256: hash_file(&dir.join(&p))?, path: p.to_string_lossy().into_owned() }))
        .collect()
}

pub fn hash_inputs(paths: &[&Path]) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| Ok(FileHash { path: p.to_string_lossy().into_owned(), sha256: hash_file(p)? })).collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
