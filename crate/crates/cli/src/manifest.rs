use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajflow::data::write_atomic;
use trajflow::rng::sha256_hex;

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// sha256 of every input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_s: f64,
    /// sha256 of the manifest with this field empty and wall time zeroed.
    #[serde(default)]
    pub hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: 0.0,
            hash: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let mut v = self.clone();
        v.hash.clear();
        v.wall_time_s = 0.0;
        sha256_hex(&serde_json::to_vec(&v).expect("manifest serializes"))
    }

    /// Writes `<dir>/manifests/<command>-<hash prefix>.json` and returns its path.
    pub fn write(mut self, dir: &Path, wall_time_s: f64) -> trajflow::Result<PathBuf> {
        self.wall_time_s = wall_time_s;
        self.hash = self.content_hash();
        let path = dir
            .join("manifests")
            .join(format!("{}-{}.json", self.command, &self.hash[..16]));
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| trajflow::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        write_atomic(&path, serde_json::to_string_pretty(&self).expect("manifest serializes").as_bytes())?;
        Ok(path)
    }
}
