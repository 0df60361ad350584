//! Versioned output envelopes, the resolved-config echo and the manifest of
//! consumed inputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const OUTPUT_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    laddermoe::checkpoint::hex(bytes)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes `{"format", "version", ...body}` as pretty JSON.
pub fn write_json(path: &Path, format: &str, body: impl Serialize) -> CliResult<()> {
    let mut v = json!({ "format": format, "version": OUTPUT_VERSION });
    match serde_json::to_value(body)? {
        serde_json::Value::Object(fields) => v.as_object_mut().expect("object").extend(fields),
        other => {
            v["data"] = other;
        }
    }
    write_text(path, &(serde_json::to_string_pretty(&v)? + "\n"))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub files: usize,
}

/// SHA-256 of a file, or of a directory's sorted `relative path, file digest`
/// list.
pub fn digest(path: &Path) -> CliResult<InputRecord> {
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    if path.is_file() {
        let bytes = std::fs::read(path).map_err(io)?;
        return Ok(InputRecord {
            path: path.to_path_buf(),
            sha256: hex(&Sha256::digest(&bytes)),
            files: 1,
        });
    }
    let mut h = Sha256::new();
    let mut files = 0;
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
        let bytes = std::fs::read(entry.path()).map_err(io)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
        files += 1;
    }
    if files == 0 && !path.exists() {
        return Err(CliError::Runtime(format!("input {} does not exist", path.display())));
    }
    Ok(InputRecord {
        path: path.to_path_buf(),
        sha256: hex(&h.finalize()),
        files,
    })
}

/// `{out}/{command}.inputs.json`.
pub fn write_inputs(out: &Path, command: &str, inputs: &[&Path]) -> CliResult<()> {
    let records = inputs.iter().map(|p| digest(p)).collect::<CliResult<Vec<_>>>()?;
    write_json(
        &out.join(format!("{command}.inputs.json")),
        "laddermoe-inputs",
        json!({ "command": command, "inputs": records }),
    )
}
