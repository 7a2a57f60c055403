//! Run manifests: every command routes its file I/O through [`Run`], which
//! records sha256 digests of inputs and outputs and either writes the outputs
//! plus `<primary>.manifest`, or (in check mode) verifies them bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub params: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn key(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

pub struct Run {
    command: &'static str,
    params: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
    check: bool,
}

impl Run {
    /// `params` is any serializable argument struct; its fields become the
    /// manifest's parameter map.
    pub fn new<P: Serialize>(command: &'static str, params: &P, check: bool) -> Result<Self, CliError> {
        let value = serde_json::to_value(params)?;
        let mut map = BTreeMap::new();
        if let serde_json::Value::Object(fields) = value {
            for (k, v) in fields {
                let text = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => continue,
                    other => other.to_string(),
                };
                map.insert(k, text);
            }
        }
        Ok(Self {
            command,
            params: map,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            check,
        })
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.inputs.insert(key(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?)
            .map_err(|_| CliError::Input(format!("{}: not UTF-8 text", path.display())))
    }

    pub fn write(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((path.into(), bytes.into()));
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            params: self.params.clone(),
            inputs: self.inputs.clone(),
            outputs: self
                .outputs
                .iter()
                .map(|(p, b)| (key(p), sha256_hex(b)))
                .collect(),
        }
    }

    /// Writes outputs and `<primary>.manifest`, or verifies them in check mode.
    pub fn finish(self, primary: &Path) -> Result<PathBuf, CliError> {
        let manifest = self.manifest();
        let path = manifest_path(primary);
        if self.check {
            let existing = read_manifest(&path)
                .map_err(|e| CliError::Check(format!("{}: {e}", path.display())))?;
            if existing != manifest {
                return Err(CliError::Check(format!(
                    "{} does not match this run",
                    path.display()
                )));
            }
            for (file, digest) in &manifest.outputs {
                let on_disk = fs::read(file)
                    .map_err(|e| CliError::Check(format!("{file}: {e}")))?;
                if &sha256_hex(&on_disk) != digest {
                    return Err(CliError::Check(format!("{file} differs from its recorded digest")));
                }
            }
            log::info!("check passed for {}", path.display());
            return Ok(path);
        }
        for (file, bytes) in &self.outputs {
            if let Some(dir) = file.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            fs::write(file, bytes)?;
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
