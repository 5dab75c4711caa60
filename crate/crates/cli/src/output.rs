//! Metrics CSV rows, run manifests and content hashes.
//!
//! CSV bodies hold only values that are a pure function of the flags, so
//! two identical invocations write identical bytes. Timings go to the
//! manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::harness::{mean_std, SeedRun};
use crate::{CliError, CliResult};

pub const METRICS_HEADER: &[&str] = &[
    "seed",
    "k",
    "P",
    "m",
    "reg_weight",
    "stochastic",
    "accuracy",
    "bin_low",
    "bin_high",
    "worst_class_acc",
    "min_prompt_share",
    "mean_min_prompt_share",
];

/// Label of the across-seed summary row.
pub const SUMMARY_SEED: &str = "mean±std";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub k: usize,
    pub prompts: usize,
    pub length: usize,
    pub reg_weight: f64,
    pub stochastic: String,
    pub accuracy: f64,
    pub bin_low: f64,
    pub bin_high: f64,
    pub worst_class_acc: f64,
    /// Smallest per-class prompt share over all classes.
    pub min_prompt_share: f64,
    /// Per-class smallest prompt share, averaged over classes.
    pub mean_min_prompt_share: f64,
}

impl MetricsRow {
    pub fn from_run(run: &SeedRun, k: usize) -> Self {
        let shares = run.metrics.min_prompt_shares();
        let (mean_share, _) = mean_std(&shares);
        Self {
            seed: run.seed,
            k,
            prompts: run.config.prompt_count,
            length: run.config.prompt_length,
            reg_weight: run.config.reg_weight,
            stochastic: run.config.stochastic.as_str().to_string(),
            accuracy: run.metrics.accuracy,
            bin_low: run.metrics.bins.0,
            bin_high: run.metrics.bins.1,
            worst_class_acc: run.metrics.worst_class_accuracy,
            min_prompt_share: shares.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_min_prompt_share: mean_share,
        }
    }

    fn metric_values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.bin_low,
            self.bin_high,
            self.worst_class_acc,
            self.min_prompt_share,
            self.mean_min_prompt_share,
        ]
    }

    fn config_fields(&self) -> Vec<String> {
        vec![
            self.k.to_string(),
            self.prompts.to_string(),
            self.length.to_string(),
            self.reg_weight.to_string(),
            self.stochastic.clone(),
        ]
    }

    pub fn record(&self) -> Vec<String> {
        let mut out = vec![self.seed.to_string()];
        out.extend(self.config_fields());
        out.extend(self.metric_values().iter().map(|v| v.to_string()));
        out
    }
}

/// `mean±std` of every metric column over `rows`, with the configuration
/// columns of the first row.
pub fn summary_record(rows: &[MetricsRow]) -> Vec<String> {
    let mut out = vec![SUMMARY_SEED.to_string()];
    out.extend(rows[0].config_fields());
    let columns: Vec<[f64; 6]> = rows.iter().map(MetricsRow::metric_values).collect();
    for j in 0..6 {
        let values: Vec<f64> = columns.iter().map(|c| c[j]).collect();
        let (mean, std) = mean_std(&values);
        out.push(format!("{mean}±{std}"));
    }
    out
}

/// Per-seed rows followed by the summary row.
pub fn metrics_csv(rows: &[MetricsRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    if !rows.is_empty() {
        w.write_record(summary_record(rows))?;
    }
    w.into_inner()
        .map_err(|e| CliError::io("metrics.csv", e.into_error()))
}

/// Tidy sweep CSV: one row per (grid value, seed), grid order first.
pub fn sweep_csv(key: &str, rows: &[(String, MetricsRow)]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sweep_key", "sweep_value"];
    header.extend_from_slice(METRICS_HEADER);
    w.write_record(&header)?;
    for (value, row) in rows {
        let mut record = vec![key.to_string(), value.clone()];
        record.extend(row.record());
        w.write_record(&record)?;
    }
    w.into_inner()
        .map_err(|e| CliError::io("sweep.csv", e.into_error()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Writes `bytes` to `path` and returns its digest entry.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<FileDigest> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(bytes),
    })
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&read_file(path)?),
    })
}

/// Everything needed to reproduce a command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: String,
    pub tool_version: String,
    /// Parsed configuration of the command.
    pub config: C,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub inputs: Vec<FileDigest>,
    /// SHA-256 over the serialized configuration, seeds and input digests.
    pub content_hash: String,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_ms: Vec<u128>,
    pub total_wall_clock_ms: u128,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, config: C, seeds: Vec<u64>, out_dir: &Path, inputs: Vec<FileDigest>) -> CliResult<Self> {
        let hashed = serde_json::to_vec(&(&config, &seeds, &inputs))?;
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            content_hash: sha256_hex(&hashed),
            config,
            seeds,
            out_dir: out_dir.to_path_buf(),
            inputs,
            outputs: Vec::new(),
            wall_clock_ms: Vec::new(),
            total_wall_clock_ms: 0,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_file(path, &bytes).map(|_| ())
    }
}
