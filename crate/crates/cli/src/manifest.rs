//! Run manifests: resolved settings plus SHA-256 of every input and output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug)]
pub struct Manifest {
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
            .collect()
    }

    /// Hashes every listed file and writes the manifest as JSON to `path`.
    pub fn write(&self, config: &BTreeMap<String, String>, path: &Path) -> Result<()> {
        let value: Value = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "inputs": Self::hashes(&self.inputs)?,
            "outputs": Self::hashes(&self.outputs)?,
        });
        let text = serde_json::to_string_pretty(&value).expect("JSON values always serialize");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_hashes_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, b"abc").unwrap();
        let mut m = Manifest::new("test");
        m.input(&a);
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_owned(), "7".to_owned());
        let out = dir.path().join("manifest.json");
        m.write(&cfg, &out).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["config"]["seed"], "7");
        assert_eq!(
            v["inputs"][a.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
