//! Atomic file output, CSV rows and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nnflow::fields::{write_dump, Field};
use nnflow::outer::{Rung, SolveReport};

use crate::CliError;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_field<F: Field>(path: &Path, field: &F) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_dump(&mut buf, field)?;
    write_atomic(path, &buf)
}

/// One diagnostics row: `rung_id,eps,alpha,delta,eta,name,value`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub rung_id: usize,
    pub rung: Rung,
    pub name: String,
    pub value: f64,
}

pub const CSV_HEADER: &str = "rung_id,eps,alpha,delta,eta,name,value";

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{:e}\n",
            r.rung_id, r.rung.eps, r.rung.alpha, r.rung.delta, r.rung.eta, r.name, r.value
        ));
    }
    out
}

/// Solver metrics and diagnostics of one rung as CSV rows.
pub fn rung_rows(rung_id: usize, rung: &Rung, report: &SolveReport) -> Vec<CsvRow> {
    let mut named = vec![
        ("outer_iterations".to_string(), report.iterations as f64),
        ("converged".to_string(), if report.converged { 1.0 } else { 0.0 }),
        ("last_update".to_string(), report.last_update()),
        ("max_mass_error".to_string(), report.max_mass_error),
        ("min_density".to_string(), report.min_density),
    ];
    if let Some(r) = report.fixed_point_residual {
        named.push(("fixed_point_residual".to_string(), r));
    }
    if let Some(d) = &report.diagnostics {
        named.extend(d.rows());
    }
    named
        .into_iter()
        .map(|(name, value)| CsvRow {
            rung_id,
            rung: *rung,
            name,
            value,
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RungArtifacts {
    pub index: usize,
    pub rung: Option<Rung>,
    pub status: String,
    pub iterations: usize,
    pub last_update: f64,
    pub seconds: f64,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub command: String,
    pub exit_status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub rungs: Vec<RungArtifacts>,
    pub artifacts: Vec<PathBuf>,
    pub total_seconds: f64,
}

impl RunManifest {
    /// Paths are stored relative to the output directory.
    pub fn missing(&self, dir: &Path) -> Vec<PathBuf> {
        self.rungs
            .iter()
            .flat_map(|r| r.paths.iter())
            .chain(self.artifacts.iter())
            .filter(|p| !dir.join(p).exists())
            .cloned()
            .collect()
    }
}
