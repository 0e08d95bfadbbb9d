//! Report files and the run manifest.
//!
//! JSON is written with sorted keys where maps are involved and shortest
//! round-trip float formatting, so identical runs give identical bytes. The
//! only wall-clock value lives under the manifest's `volatile` key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Collects files written by one command and their hashes.
pub struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn csv(
        &mut self,
        name: &str,
        header: &[String],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::Runtime(e.to_string()))?;
        for row in rows {
            w.write_record(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(mut self, command: &str, res: &Resolved) -> Result<(), CliError> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": res.run.seed,
            "model_hash": model_hash(res),
            "run_hash": sha256_hex(&serde_json::to_vec(&res.run).unwrap_or_default()),
            "outputs": self.files,
            "volatile": { "created_unix_secs": created },
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.clear();
        Ok(())
    }
}

/// SHA-256 of the canonical JSON of the model and observable blocks.
pub fn model_hash(res: &Resolved) -> String {
    let v = json!({ "model": res.config.model, "observable": res.config.observable });
    sha256_hex(&serde_json::to_vec(&v).unwrap_or_default())
}

/// Model summary shared by every report.
pub fn model_summary(res: &Resolved) -> Value {
    let m = &res.model;
    json!({
        "name": m.name(),
        "rate": m.rate(),
        "regimes": m.regimes(),
        "dim": m.dim(),
        "params": m.params(),
        "declared_constants": m.declared_constants(),
        "warnings": m.warnings(),
        "hash": model_hash(res),
    })
}

/// Fields common to every JSON report.
pub fn report_header(command: &str, res: &Resolved) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(res.run.seed));
    m.insert("model".into(), model_summary(res));
    m.insert("observable".into(), json!(res.config.observable));
    m.insert(
        "observable_resolved".into(),
        json!({
            "kind": format!("{:?}", res.observable.kind()),
            "sup_bound": res.observable.sup_bound(),
            "lip_const": res.observable.lip_const(),
        }),
    );
    m.insert("defaults".into(), json!(res.defaults));
    m
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
