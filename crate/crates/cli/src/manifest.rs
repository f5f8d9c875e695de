//! `run_manifest.json`: resolved config, seed, version and artifact hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn version() -> String {
    format!("{}-{}", env!("CARGO_PKG_VERSION"), env!("DELTA_GIT_DESCRIBE"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the output directory -> sha256 hex.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hashes of every file under `root` except the manifest itself, keyed by
/// `/`-separated relative path.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for e in WalkDir::new(root).sort_by_file_name() {
        let e = e.map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        if !e.file_type().is_file() {
            continue;
        }
        let rel = e.path().strip_prefix(root).expect("under root");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if key == MANIFEST_FILE {
            continue;
        }
        out.insert(key, sha256_file(e.path())?);
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            version: version(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes `out` and writes the manifest into it.
    pub fn finish(mut self, out: &Path) -> Result<RunManifest> {
        self.artifacts = hash_tree(out)?;
        let p = out.join(MANIFEST_FILE);
        write_json(&p, &self)?;
        Ok(self)
    }
}

pub fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    fs::write(p, body).map_err(|e| CliError::io(p, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Contract(format!("{}: {e}", p.display())))
}

pub fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}
