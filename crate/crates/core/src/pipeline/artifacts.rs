//! CSV and manifest writers.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    })
}

/// Writes a header row followed by one row per index. `columns` supplies
/// the value columns; `keys` the first column. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_columns<K: Display>(
    path: &Path,
    header: &[String],
    keys: &[K],
    columns: &[&[f64]],
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for (i, key) in keys.iter().enumerate() {
        let mut row = Vec::with_capacity(columns.len() + 1);
        row.push(key.to_string());
        row.extend(columns.iter().map(|c| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `t,actual,predicted`.
pub fn write_forecast_csv<K: Display>(
    path: &Path,
    keys: &[K],
    actual: &[f64],
    predicted: &[f64],
) -> Result<()> {
    let header = ["t", "actual", "predicted"].map(String::from);
    write_columns(path, &header, keys, &[actual, predicted])
}

/// `t,imf0..imf{K-1}`.
pub fn write_decomposition_csv<K: Display>(
    path: &Path,
    keys: &[K],
    modes: &[Vec<f64>],
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..modes.len()).map(|k| format!("imf{k}")));
    let cols: Vec<&[f64]> = modes.iter().map(|m| m.as_slice()).collect();
    write_columns(path, &header, keys, &cols)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run: the config snapshot, seeds and
/// the hash of every artifact it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactHash>,
}

impl Manifest {
    /// Hashes `files` (given relative to `root`) and writes
    /// `manifest.json` into `root`.
    pub fn write(
        root: &Path,
        command: &str,
        seeds: &[u64],
        config: &impl Serialize,
        files: &[PathBuf],
    ) -> Result<Self> {
        let mut files = files.to_vec();
        files.sort();
        files.dedup();
        let artifacts = files
            .iter()
            .map(|rel| {
                Ok(ArtifactHash {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&root.join(rel))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seeds: seeds.to_vec(),
            config: serde_json::to_value(config)?,
            artifacts,
        };
        write_json(&root.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}
