//! Provenance records written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Serialize)]
pub struct Manifest<'a, A: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub argv: Vec<String>,
    pub args: &'a A,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl<'a, A: Serialize> Manifest<'a, A> {
    pub fn new(command: &'static str, args: &'a A, seed: Option<u64>) -> Self {
        Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().collect(),
            args,
            seed,
            checkpoint: None,
            checkpoint_sha256: None,
            outputs: Vec::new(),
            extra: None,
        }
    }

    pub fn checkpoint(mut self, path: &Path, sha256: String) -> Self {
        self.checkpoint = Some(path.display().to_string());
        self.checkpoint_sha256 = Some(sha256);
        self
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}
