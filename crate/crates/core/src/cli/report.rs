//! Report JSON and artifact files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::stats::Method;

pub const REPORT_FORMAT: &str = "taskgeo-report-v1";

/// Shared schema of every report; `method` tells distance reports apart and
/// `details` carries the method-specific fields.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub format: &'static str,
    pub command: &'static str,
    pub method: Option<Method>,
    pub source: Option<String>,
    pub target: Option<String>,
    pub seed: u64,
    pub distance: Option<f64>,
    pub details: serde_json::Value,
    pub config: RunConfig,
}

impl Report {
    /// The embedded config omits `out`.
    pub fn new(command: &'static str, config: &RunConfig) -> Self {
        let config = RunConfig {
            out: None,
            ..config.clone()
        };
        Self {
            format: REPORT_FORMAT,
            command,
            method: config.method,
            source: None,
            target: None,
            seed: config.seed,
            distance: None,
            details: serde_json::Value::Null,
            config,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s.into_bytes())
    }
}

/// A named file body to be written under the output directory.
pub struct Artifact {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &'static str, bytes: Vec<u8>) -> Self {
        Self { name, bytes }
    }

    /// Renders through a writer-based serializer.
    pub fn render(name: &'static str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Self> {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        Ok(Self { name, bytes })
    }
}

/// Writes `report.json` plus `artifacts` into `dir`. Nothing is written when
/// any target exists and `force` is off.
pub fn write_report(report: &Report, artifacts: Vec<Artifact>, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let mut all = vec![Artifact::new("report.json", report.to_json()?)];
    all.extend(artifacts);
    write_files(dir, &all, force)
}

pub fn write_files(dir: &Path, files: &[Artifact], force: bool) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f.name)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, p) in files.iter().zip(&paths) {
        std::fs::write(p, &f.bytes).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}
