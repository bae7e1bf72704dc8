//! Trace, summary and manifest files.
//!
//! A run directory holds `trace.csv` or `trace.json`, `summary.json` and
//! `manifest.json`. Floats are rounded to 9 significant digits before they are
//! written so traces compare byte-for-byte across platforms.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Overrides;
use crate::gate::Phase;
use crate::sim::{Comparison, RunSummary, StepRecord, SweepPoint};

/// Trace column order. Changing it breaks the golden trace on purpose.
pub const TRACE_COLUMNS: [&str; 19] = [
    "step",
    "edge_id",
    "cloud_delay_s",
    "best_edge_delay_s",
    "best_overlap_ratio",
    "best_edge_id",
    "multi_hop",
    "query_len_tokens",
    "entity_count",
    "arm",
    "phase",
    "accuracy",
    "delay_s",
    "u_r",
    "u_d",
    "u_t",
    "safe_set_size",
    "acc_violation",
    "delay_violation",
];

pub const SIGNIFICANT_DIGITS: usize = 9;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Json,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Json => "json",
        }
    }
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "json" => Ok(TraceFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

impl fmt::Display for TraceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// Rounds to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

/// One trace line, already rounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub edge_id: usize,
    pub cloud_delay_s: f64,
    pub best_edge_delay_s: f64,
    pub best_overlap_ratio: f64,
    pub best_edge_id: usize,
    pub multi_hop: bool,
    pub query_len_tokens: u32,
    pub entity_count: u32,
    pub arm: String,
    pub phase: Phase,
    pub accuracy: f64,
    pub delay_s: f64,
    pub u_r: f64,
    pub u_d: f64,
    pub u_t: f64,
    pub safe_set_size: usize,
    pub acc_violation: bool,
    pub delay_violation: bool,
}

impl From<&StepRecord> for TraceRow {
    fn from(r: &StepRecord) -> Self {
        let c = &r.context;
        let o = &r.outcome;
        Self {
            step: r.step,
            edge_id: r.edge_id,
            cloud_delay_s: round_sig(c.cloud_delay_s),
            best_edge_delay_s: round_sig(c.best_edge_delay_s),
            best_overlap_ratio: round_sig(c.best_overlap_ratio),
            best_edge_id: c.best_edge_id,
            multi_hop: c.multi_hop,
            query_len_tokens: c.query_len_tokens,
            entity_count: c.entity_count,
            arm: r.arm.clone(),
            phase: r.phase,
            accuracy: round_sig(o.accuracy),
            delay_s: round_sig(o.delay_s),
            u_r: round_sig(o.resource_cost_tflops),
            u_d: round_sig(o.time_cost_tflops),
            u_t: round_sig(o.total_cost),
            safe_set_size: r.safe_set_size,
            acc_violation: r.acc_violation,
            delay_violation: r.delay_violation,
        }
    }
}

/// Hex SHA-256 of the scenario bytes a run was configured from.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Where a run's configuration came from, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub scenario: String,
    pub config_sha256: String,
    pub overrides: Overrides,
}

impl Provenance {
    pub fn new(scenario: impl Into<String>, config_bytes: &[u8], overrides: Overrides) -> Self {
        Self {
            scenario: scenario.into(),
            config_sha256: config_hash(config_bytes),
            overrides,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub policy: Option<String>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(provenance: &Provenance, policy: Option<String>, seeds: Vec<u64>, steps: u64) -> Self {
        Self {
            tool: "tiergate",
            version: env!("CARGO_PKG_VERSION"),
            provenance: provenance.clone(),
            policy,
            seeds,
            steps,
            files: Vec::new(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, OutputError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| OutputError::Io {
            path: path.to_owned(),
            source,
        })
}

fn ensure_dir(dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_owned(),
        source,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| OutputError::Json {
        path: path.to_owned(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| OutputError::Io {
            path: path.to_owned(),
            source,
        })
}

/// Writes the trace rows alone in the requested format.
pub fn write_trace(
    records: &[StepRecord],
    path: &Path,
    format: TraceFormat,
) -> Result<(), OutputError> {
    let rows = records.iter().map(TraceRow::from);
    match format {
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(path)?);
            let wrap = |source| OutputError::Csv {
                path: path.to_owned(),
                source,
            };
            if records.is_empty() {
                w.write_record(TRACE_COLUMNS).map_err(wrap)?;
            }
            for row in rows {
                w.serialize(row).map_err(wrap)?;
            }
            w.flush().map_err(|source| OutputError::Io {
                path: path.to_owned(),
                source,
            })
        }
        TraceFormat::Json => write_json(path, &rows.collect::<Vec<_>>()),
    }
}

pub fn read_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRow>, OutputError> {
    let file = File::open(path).map_err(|source| OutputError::Io {
        path: path.to_owned(),
        source,
    })?;
    match format {
        TraceFormat::Csv => csv::Reader::from_reader(file)
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|source| OutputError::Csv {
                path: path.to_owned(),
                source,
            }),
        TraceFormat::Json => {
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| {
                OutputError::Json {
                    path: path.to_owned(),
                    source,
                }
            })
        }
    }
}

/// Paths written by one of the `emit_*` functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
}

fn finish(
    out_dir: &Path,
    mut manifest: Manifest,
    files: Vec<PathBuf>,
) -> Result<Emitted, OutputError> {
    let manifest_path = out_dir.join("manifest.json");
    manifest.files = files
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    write_json(&manifest_path, &manifest)?;
    let mut files = files;
    files.push(manifest_path);
    Ok(Emitted { files })
}

/// Writes `trace.{csv,json}`, `summary.json` and `manifest.json` for one run.
pub fn emit_trace(
    records: &[StepRecord],
    summary: &RunSummary,
    provenance: &Provenance,
    out_dir: &Path,
    format: TraceFormat,
) -> Result<Emitted, OutputError> {
    ensure_dir(out_dir)?;
    let trace_path = out_dir.join(format!("trace.{}", format.extension()));
    write_trace(records, &trace_path, format)?;
    let summary_path = out_dir.join("summary.json");
    write_json(&summary_path, summary)?;
    let manifest = Manifest::new(
        provenance,
        Some(summary.policy.to_string()),
        vec![summary.seed],
        summary.total_steps,
    );
    finish(out_dir, manifest, vec![trace_path, summary_path])
}

#[derive(Debug, Serialize)]
struct ComparisonLine {
    policy: String,
    runs: usize,
    mean_cost: f64,
    exploit_mean_cost: f64,
    exploit_cost_stddev: f64,
    exploit_accuracy: f64,
    exploit_mean_delay_s: f64,
    exploit_violation_rate: f64,
    reduction_overall: f64,
    reduction_exploit: f64,
}

/// Writes `comparison.{csv,json}` and `manifest.json`. The JSON form carries
/// every per-seed summary; the CSV form has one line per policy.
pub fn emit_comparison(
    comparison: &Comparison,
    provenance: &Provenance,
    out_dir: &Path,
    format: TraceFormat,
) -> Result<Emitted, OutputError> {
    ensure_dir(out_dir)?;
    let path = out_dir.join(format!("comparison.{}", format.extension()));
    match format {
        TraceFormat::Json => write_json(&path, comparison)?,
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(&path)?);
            for row in &comparison.rows {
                let line = ComparisonLine {
                    policy: row.policy.to_string(),
                    runs: row.runs.len(),
                    mean_cost: round_sig(row.overall.mean_cost),
                    exploit_mean_cost: round_sig(row.exploit.mean_cost),
                    exploit_cost_stddev: round_sig(row.exploit_cost_stddev),
                    exploit_accuracy: round_sig(row.exploit.accuracy),
                    exploit_mean_delay_s: round_sig(row.exploit.mean_delay_s),
                    exploit_violation_rate: round_sig(row.exploit.violation_rate),
                    reduction_overall: round_sig(row.reduction_overall),
                    reduction_exploit: round_sig(row.reduction_exploit),
                };
                w.serialize(line).map_err(|source| OutputError::Csv {
                    path: path.clone(),
                    source,
                })?;
            }
            w.flush().map_err(|source| OutputError::Io {
                path: path.clone(),
                source,
            })?;
        }
    }
    let manifest = Manifest::new(provenance, None, comparison.seeds.clone(), comparison.steps);
    finish(out_dir, manifest, vec![path])
}

#[derive(Debug, Serialize)]
struct SweepLine {
    value: f64,
    runs: usize,
    mean_cost: f64,
    exploit_mean_cost: f64,
    exploit_accuracy: f64,
    exploit_violation_rate: f64,
}

/// Writes `sweep.{csv,json}` and `manifest.json`.
pub fn emit_sweep(
    points: &[SweepPoint],
    policy: &str,
    seeds: &[u64],
    steps: u64,
    provenance: &Provenance,
    out_dir: &Path,
    format: TraceFormat,
) -> Result<Emitted, OutputError> {
    ensure_dir(out_dir)?;
    let path = out_dir.join(format!("sweep.{}", format.extension()));
    match format {
        TraceFormat::Json => write_json(&path, points)?,
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(&path)?);
            for p in points {
                let line = SweepLine {
                    value: round_sig(p.value),
                    runs: p.runs.len(),
                    mean_cost: round_sig(p.overall.mean_cost),
                    exploit_mean_cost: round_sig(p.exploit.mean_cost),
                    exploit_accuracy: round_sig(p.exploit.accuracy),
                    exploit_violation_rate: round_sig(p.exploit.violation_rate),
                };
                w.serialize(line).map_err(|source| OutputError::Csv {
                    path: path.clone(),
                    source,
                })?;
            }
            w.flush().map_err(|source| OutputError::Io {
                path: path.clone(),
                source,
            })?;
        }
    }
    let manifest = Manifest::new(provenance, Some(policy.to_owned()), seeds.to_vec(), steps);
    finish(out_dir, manifest, vec![path])
}
