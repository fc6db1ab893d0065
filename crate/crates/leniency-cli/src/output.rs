//! Result documents, the run manifest, and the JSON/CSV writers.
//!
//! Output is byte-reproducible: field order is fixed by the struct
//! definitions, floats use the shortest round-trip form, and the manifest
//! timestamp comes only from SOURCE_DATE_EPOCH.

use leniency_iv::data::{PruneReport, Schema};
use leniency_iv::error::{Error, Result};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Provenance block attached to every output document.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub data: Option<String>,
    pub schema: Option<Schema>,
    pub estimators: Vec<String>,
    pub seed: Option<u64>,
    /// Unix seconds from SOURCE_DATE_EPOCH; null when unset, so reruns are
    /// byte-identical by default.
    pub timestamp: Option<u64>,
    pub prune: Option<PruneSummary>,
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        RunManifest {
            tool: "leniency",
            version: env!("CARGO_PKG_VERSION"),
            command,
            data: None,
            schema: None,
            estimators: Vec::new(),
            seed: None,
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|v| v.parse().ok()),
            prune: None,
        }
    }
}

/// Condensed pruning outcome for the manifest.
#[derive(Serialize)]
pub struct PruneSummary {
    pub rows_in: usize,
    pub rows_used: usize,
    pub rows_dropped: usize,
    pub passes: usize,
    pub dropped_instrument_columns: Vec<String>,
    pub dropped_control_columns: Vec<String>,
}

impl PruneSummary {
    pub fn from_report(rows_in: usize, rows_used: usize, report: &PruneReport) -> Self {
        PruneSummary {
            rows_in,
            rows_used,
            rows_dropped: report.dropped_rows.len(),
            passes: report.iterations,
            dropped_instrument_columns: report.dropped_instrument_columns.clone(),
            dropped_control_columns: report.dropped_control_columns.clone(),
        }
    }
}

/// One estimator's results in the fixed output layout.
#[derive(Serialize)]
pub struct EstimateRow {
    pub estimator: String,
    pub beta: Option<f64>,
    pub se_robust: Option<f64>,
    pub se_plain: Option<f64>,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "partial_R2")]
    pub partial_r2: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub g_trace: f64,
    pub note: Option<String>,
}

#[derive(Serialize)]
pub struct WeakIvOut {
    pub beta0: f64,
    pub stat: f64,
    pub p: f64,
    pub level: f64,
    /// Present when the confidence set is a single interval.
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub set: Vec<IntervalOut>,
    pub empty: bool,
}

#[derive(Serialize)]
pub struct IntervalOut {
    pub lo: f64,
    pub hi: f64,
    pub open_lower: bool,
    pub open_upper: bool,
}

#[derive(Serialize)]
pub struct RhoOut {
    /// Point value when evaluated at a single effect.
    pub value: Option<f64>,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub rho_at_lo: f64,
    pub rho_at_hi: f64,
    pub max_abs_rho: f64,
    pub flag_076: bool,
}

pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format '{other}'"))),
        }
    }
}

/// A rendered CSV table.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn opt_str(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

/// Writes the document: JSON (with embedded manifest) or CSV. CSV written
/// to a file gets a `<path>.manifest.json` sidecar; CSV to stdout does not.
pub fn emit<D: Serialize>(
    doc: &D,
    manifest: &RunManifest,
    table: Table,
    out: &Option<PathBuf>,
    format: &Format,
) -> Result<()> {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(doc)
                .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
            text.push('\n');
            write_all(out, text.as_bytes())
        }
        Format::Csv => {
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(&table.header)
                    .and_then(|()| table.rows.iter().try_for_each(|r| w.write_record(r)))
                    .map_err(Error::from)?;
                w.flush()?;
            }
            write_all(out, &buf)?;
            if let Some(path) = out {
                let mut text = serde_json::to_string_pretty(manifest)
                    .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
                text.push('\n');
                let sidecar = sidecar_path(path);
                std::fs::write(sidecar, text)?;
            }
            Ok(())
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn write_all(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}
