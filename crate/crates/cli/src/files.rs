//! Input/output directories and the hash-chained manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub catalog_hash: Option<String>,
    /// SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

/// Files read from one directory, with their hashes.
pub struct Inputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn new(dir: &Path) -> Self {
        Inputs { dir: dir.to_path_buf(), hashes: BTreeMap::new() }
    }

    pub fn read(&mut self, name: &str) -> Result<String, CliError> {
        let path = self.dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        self.hashes.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    pub fn hash(&self, name: &str) -> Option<&str> {
        self.hashes.get(name).map(String::as_str)
    }

    /// The manifest an earlier command left here, if any.
    pub fn manifest(&self, command: &str) -> Result<Option<Manifest>, CliError> {
        let path = self.dir.join(manifest_name(command));
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Core(hetpref_core::Error::Input(format!("{}: {e}", path.display()))))
    }

    /// Checks that the file `name` read here is the one `command` wrote.
    pub fn check_written_by(&self, command: &str, name: &str) -> Result<(), CliError> {
        let Some(m) = self.manifest(command)? else {
            log::warn!("no {} in {}; skipping hash check of {name}", manifest_name(command), self.dir.display());
            return Ok(());
        };
        let actual = self.hash(name).expect("file was read before checking");
        match m.outputs.get(name) {
            Some(expected) if expected == actual => Ok(()),
            Some(expected) => Err(CliError::HashMismatch {
                what: name.to_string(),
                expected: expected.clone(),
                actual: actual.to_string(),
            }),
            None => Err(CliError::Config(format!("{} does not list {name}", manifest_name(command)))),
        }
    }

    pub fn into_hashes(self) -> BTreeMap<String, String> {
        self.hashes
    }
}

/// Files written to one directory, with their hashes.
pub struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Outputs { dir: dir.to_path_buf(), hashes: BTreeMap::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        self.hashes.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(hetpref_core::Error::from)?;
        s.push('\n');
        self.write(name, &s)
    }

    /// Writes `<command>.manifest.json` listing everything written so far.
    pub fn finish(
        mut self,
        command: &str,
        seed: u64,
        config_sha256: String,
        catalog_hash: Option<String>,
        inputs: BTreeMap<String, String>,
    ) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256,
            catalog_hash,
            inputs,
            outputs: std::mem::take(&mut self.hashes),
        };
        self.write_json(&manifest_name(command), &manifest)?;
        Ok(manifest)
    }
}
