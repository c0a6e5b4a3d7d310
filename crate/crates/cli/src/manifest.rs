use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use soh_core::Error;

use crate::error::Result;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable config object.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputFile>,
    /// sha256 over the sorted `(path, sha256)` pairs of `outputs`
    pub directory_checksum: String,
    pub wall_time_s: f64,
    pub version: String,
    pub git: Option<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

/// Collects every file a command writes under its output directory and
/// emits the manifest last.
pub struct Run {
    command: String,
    out: PathBuf,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<OutputFile>,
    config_hash: String,
    seed: Option<u64>,
}

impl Run {
    pub fn start(command: &str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            command: command.into(),
            out: out.into(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_hash: String::new(),
            seed: None,
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn config(&mut self, hash: String, seed: Option<u64>) {
        self.config_hash = hash;
        self.seed = seed;
    }

    /// Write `bytes` to `out/rel`, creating parent directories.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(rel, bytes);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Register a file written by someone else.
    pub fn adopt(&mut self, rel: &str) -> Result<()> {
        let path = self.out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.record(rel, &bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputFile { path: rel.into(), sha256: sha256_hex(bytes), bytes: bytes.len() });
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<RunManifest> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for o in &self.outputs {
            h.update(o.path.as_bytes());
            h.update([0]);
            h.update(o.sha256.as_bytes());
            h.update([b'\n']);
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            directory_checksum: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
            git: option_env!("SOHF_GIT_REV").map(String::from),
            summary,
        };
        let path = self.out.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

impl RunManifest {
    pub fn summary_line(&self) -> String {
        format!("{}: {} files, checksum {}, {:.1}s", self.command, self.outputs.len(), &self.directory_checksum[..12], self.wall_time_s)
    }
}
