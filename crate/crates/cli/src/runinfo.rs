use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hpl_core::{Error, ExperimentConfig, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to rerun a command: the resolved config, the seed and
/// content hashes of every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Input name → SHA-256 over its files.
    pub inputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

fn collect_files(dir: &Path, rel: &Path, out: &mut Vec<(PathBuf, PathBuf)>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        let r = rel.join(e.file_name());
        if p.is_dir() {
            collect_files(&p, &r, out)?;
        } else {
            out.push((p, r));
        }
    }
    Ok(())
}

/// SHA-256 over relative paths and contents of every file below `path`
/// (or of the single file), in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    if path.is_dir() {
        collect_files(path, Path::new(""), &mut files)?;
    } else {
        files.push((path.to_path_buf(), PathBuf::from(path.file_name().unwrap_or_default())));
    }
    let mut h = Sha256::new();
    for (abs, rel) in files {
        let bytes = std::fs::read(&abs).map_err(|e| Error::io(&abs, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_json<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("hpl-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("format".to_string(), "1".to_string()),
    ])
}
