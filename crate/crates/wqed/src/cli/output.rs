//! Run artifacts: CSV tables, the JSON manifest and atomic file writes.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::CliError;

/// Shortest round-trip decimal form; scientific notation outside
/// [1e-4, 1e15) so tiny weights stay readable. Never locale dependent.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// RFC-4180 table built in memory.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Row of plain numbers.
    pub fn push_f64(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&x| fmt_f64(x)).collect());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }
}

/// Everything a run produced, before it touches the disk.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub tolerances: BTreeMap<String, f64>,
    pub convergence: BTreeMap<String, bool>,
    pub results: BTreeMap<String, serde_json::Value>,
    /// Module error raised after partial output was produced.
    pub error: Option<String>,
}

impl RunOutput {
    pub fn table(&mut self, name: &str, table: &Table) {
        self.files.push((name.to_string(), table.to_bytes()));
    }

    pub fn text(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text.into_bytes()));
    }

    pub fn tolerance(&mut self, key: &str, value: f64) {
        self.tolerances.insert(key.to_string(), value);
    }

    pub fn flag(&mut self, key: &str, value: bool) {
        self.convergence.insert(key.to_string(), value);
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("result serializes");
        self.results.insert(key.to_string(), v);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub units: String,
    pub scenario: serde_json::Value,
    pub wall_time_s: f64,
    pub tolerances: BTreeMap<String, f64>,
    pub convergence: BTreeMap<String, bool>,
    pub results: BTreeMap<String, serde_json::Value>,
    pub files: Vec<FileEntry>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Data files first, manifest last, so a manifest on disk always describes
/// a complete set of files.
pub fn write_run(dir: &Path, out: &RunOutput, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    manifest.files.clear();
    for (name, bytes) in &out.files {
        write_atomic(&dir.join(name), bytes)?;
        manifest.files.push(FileEntry {
            name: name.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}
