//! Report envelope and file writers.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use kamtor_core::config::SolverConfig;
use serde::Serialize;

/// Bumped whenever a field of a written report or CSV header changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: &'a SolverConfig,
    pub result: &'a T,
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<R: Serialize>(dir: &Path, name: &str, rows: &[R]) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with a header even when there are no rows.
pub fn write_csv_with_header<R: Serialize>(dir: &Path, name: &str, header: &[&str], rows: &[R]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(dir, name, rows);
    }
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    w.flush()?;
    Ok(())
}
