//! Artifact writer. Every JSON artifact carries the master seed, and a
//! manifest lists each file with its digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub struct Artifacts {
    dir: PathBuf,
    seed: u64,
    files: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Artifacts {
    pub fn create(dir: &Path, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        Ok(Artifacts { dir: dir.to_path_buf(), seed, files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            map.insert("seed".into(), json!(self.seed));
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` and returns the list of files.
    pub fn finish<C: Serialize>(mut self, subcommand: &str, config: &C) -> Result<Vec<String>, CliError> {
        let canonical = serde_json::to_string(config)?;
        let files: Vec<Value> = self.files.iter().map(|(n, h)| json!({ "name": n, "sha256": h })).collect();
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "library_version": phaselock::VERSION,
            "subcommand": subcommand,
            "seed": self.seed,
            "config_hash": sha256_hex(canonical.as_bytes()),
            "config": serde_json::from_str::<Value>(&canonical)?,
            "files": files,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(CliError::io(&path))?;
        self.files.push(("manifest.json".into(), String::new()));
        Ok(self.files.into_iter().map(|(n, _)| n).collect())
    }
}
