use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File name of the manifest for outputs named `stem`.
pub fn manifest_file(stem: &str) -> String {
    format!("{stem}.manifest.toml")
}

/// Record of one command invocation, written before any of its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    /// Config text as read, so the run does not depend on the file surviving.
    pub config: Option<String>,
    pub seeds: Vec<u64>,
    pub checkpoint_hash: Option<String>,
    pub output_dir: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            args,
            output_dir: output_dir.display().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `<stem>.manifest.toml` into `dir` and returns its file name.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let name = manifest_file(stem);
        let path = dir.join(&name);
        fs::write(&path, self.to_toml()).map_err(|e| Error::file(&path, e))?;
        Ok(name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }
}
