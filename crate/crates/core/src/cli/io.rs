use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use super::Failure;
use crate::experiments::LabeledDataset;
use crate::SampleSet;

/// FNV-1a 64-bit digest of a file, as 16 hex digits.
pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    let mut h = fnv::FnvHasher::default();
    h.write(&bytes);
    Ok(format!("{:016x}", h.finish()))
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let fail = |e: std::io::Error| Failure(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.flush().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset, Failure> {
    Ok(LabeledDataset::from_csv_path(path)?)
}

/// Points only; a `label` column is ignored.
pub fn read_points(path: &Path) -> Result<SampleSet, Failure> {
    Ok(read_dataset(path)?.features)
}

/// A numeric matrix stored with a header row.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, Failure> {
    let d = read_dataset(path)?;
    if d.labels.is_some() {
        return Err(Failure(format!("{}: a matrix file cannot have a label column", path.display())));
    }
    if d.is_empty() {
        return Err(Failure(format!("{}: matrix has no rows", path.display())));
    }
    Ok(d.features.to_matrix())
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, Failure> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Failure(format!("{what} rows differ in length")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Provenance written next to every result file as `<out>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub version: &'static str,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub runtime_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_runtimes: Option<Vec<Option<f64>>>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn digests(inputs: &[&Path]) -> Result<BTreeMap<String, String>, Failure> {
    inputs.iter().map(|p| Ok((p.display().to_string(), file_digest(p)?))).collect()
}
