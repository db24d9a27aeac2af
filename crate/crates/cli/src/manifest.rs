use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Entry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Writes `manifest.json` in `dir` with the size and SHA-256 of each listed
/// file (paths relative to `dir`, sorted).
pub fn write(dir: &Path, files: &[String]) -> anyhow::Result<Vec<Entry>> {
    let mut names = files.to_vec();
    names.sort();
    names.dedup();
    let entries = names
        .into_iter()
        .map(|name| {
            let p = dir.join(&name);
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Entry {
                path: name,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "files": &entries }))?;
    fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(entries)
}
