//! Directory layouts shared by the commands.

use std::path::{Path, PathBuf};

use soh_core::preprocess::ProcessedSample;
use soh_core::record::BatteryRecord;
use soh_core::Error;

use crate::error::{CliError, Result};

pub const RECORDS: &str = "records";
pub const SAMPLES: &str = "samples";

/// `dir/sub` when it exists, else `dir`.
fn resolve(dir: &Path, sub: &str) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(CliError::Missing { what: "data directory", path: dir.into() });
    }
    let nested = dir.join(sub);
    Ok(if nested.is_dir() { nested } else { dir.into() })
}

/// `*.json` files in `dir`, sorted by name, manifests left out.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(".json") && name != crate::manifest::MANIFEST {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Records under `dir`; per-file failures are returned alongside.
pub fn load_records(dir: &Path) -> Result<(Vec<BatteryRecord>, Vec<(String, String)>)> {
    let dir = resolve(dir, RECORDS)?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for f in json_files(&dir)? {
        match BatteryRecord::load(&f) {
            Ok(r) => ok.push(r),
            Err(e) => failed.push((f.display().to_string(), e.to_string())),
        }
    }
    Ok((ok, failed))
}

pub fn load_samples(dir: &Path) -> Result<Vec<ProcessedSample>> {
    let dir = resolve(dir, SAMPLES)?;
    let samples = json_files(&dir)?.iter().map(|f| ProcessedSample::load(f)).collect::<soh_core::Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(CliError::Missing { what: "preprocessed samples", path: dir });
    }
    Ok(samples)
}

/// File-name-safe form of a battery id.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}
