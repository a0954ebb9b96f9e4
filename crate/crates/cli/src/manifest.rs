//! Run manifests: what was run, with which parameters, on which bytes.
//!
//! Manifests hold no timestamps, paths or worker counts so that identical
//! runs produce identical manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileEntry {
    role: String,
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    tool: &'static str,
    version: &'static str,
    stage: &'a str,
    config: &'a Map<String, Value>,
    config_sha256: String,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
    #[serde(skip_serializing_if = "Map::is_empty")]
    summary: &'a Map<String, Value>,
}

pub struct Manifest {
    stage: &'static str,
    config: Map<String, Value>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    summary: Map<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn basename(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl Manifest {
    pub fn new(stage: &'static str) -> Self {
        Manifest {
            stage,
            config: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Map::new(),
        }
    }

    /// Records an effective parameter.
    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileEntry {
            role: role.into(),
            file: basename(path),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        self.outputs.push(FileEntry {
            role: role.into(),
            file: basename(path),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    /// Hash of the canonical (key-sorted) parameter JSON.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.config).unwrap_or_default();
        hex::encode(Sha256::digest(&canonical))
    }

    /// Writes `<output>.manifest.json` next to the primary output.
    pub fn write(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        let file = ManifestFile {
            tool: "tokensieve",
            version: env!("CARGO_PKG_VERSION"),
            stage: self.stage,
            config: &self.config,
            config_sha256: self.config_hash(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            summary: &self.summary,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "output".into());
    name.push(".manifest.json");
    output.with_file_name(name)
}
