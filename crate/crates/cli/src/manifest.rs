//! Run manifests: the resolved config plus content digests of every input
//! and output file, written next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use bireal_core::netspec::NetworkSpec;
use bireal_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style blob digest: SHA-256 over `"blob <len>\0"` and the content.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    digest: String,
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    version: &'static str,
    spec: String,
    spec_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    /// Digest over the config snapshot and every input digest, in order.
    input_digest: String,
}

fn entries<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<Vec<FileEntry>> {
    paths
        .into_iter()
        .map(|p| Ok(FileEntry { path: p.display().to_string(), digest: content_digest(&fs::read(p)?) }))
        .collect()
}

impl Manifest {
    pub fn for_spec(command: &str, spec: &NetworkSpec) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            spec: spec.name.clone(),
            spec_digest: hex(&spec.digest()),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            input_digest: String::new(),
        }
    }

    pub fn new(command: &str, cfg: &RunConfig, spec: &NetworkSpec) -> Self {
        Manifest { config: Some(cfg.to_toml()), ..Self::for_spec(command, spec) }
    }

    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        self.inputs = entries(paths)?;
        let mut h = Sha256::new();
        h.update(self.config.as_deref().unwrap_or(""));
        for e in &self.inputs {
            h.update(&e.digest);
        }
        self.input_digest = hex(&h.finalize());
        Ok(())
    }

    pub fn outputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        self.outputs = entries(paths)?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?)
    }
}

/// `model.brnx` -> `model.brnx.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
