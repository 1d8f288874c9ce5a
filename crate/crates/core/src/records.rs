//! On-disk record formats: line-delimited turn records, run and batch
//! manifests, and the per-update metrics files.
//!
//! Turn records are the interchange format between rollout, objective, and
//! diagnostics: one JSON object per line with stable field names. Floats are
//! written in shortest round-trip form, so records survive a
//! serialize/parse loop bit for bit and identical runs produce identical
//! bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{StepMetrics, TurnSample};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Writes one turn record per line.
pub fn write_turn_records(w: &mut impl Write, samples: &[TurnSample]) -> Result<(), RecordError> {
    for s in samples {
        let line = serde_json::to_string(s).expect("turn samples always serialize");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_turn_records(path: &Path, samples: &[TurnSample]) -> Result<(), RecordError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_turn_records(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_turn_records(path: &Path) -> Result<Vec<TurnSample>, RecordError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (ix, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|source| RecordError::Json { line: ix + 1, source })?;
        out.push(s);
    }
    Ok(out)
}

/// Identifies one persisted rollout batch: which behavior snapshot collected
/// it, under which seed, against which environment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    /// Stage index whose policy snapshot collected the batch.
    pub snapshot_stage: u64,
    pub collection_seed: u64,
    pub env_config_hash: u64,
}

/// Everything needed to reconstruct a run: code version, configuration
/// content hash, seed, and any command-line overrides that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub feature_hash_version: u32,
    pub config_hash: u64,
    pub seed: u64,
    pub variant: String,
    pub env: String,
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Stages finished so far; equals the configured total on clean exit.
    pub stages_completed: u64,
}

pub fn save_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifests always serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RecordError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| RecordError::Json { line: 0, source })
}

/// Appends update metrics to both metrics files in a run directory:
/// `metrics.csv` for spreadsheet use and `metrics.jsonl` for tooling.
/// Append-only so resumed runs continue the same files.
pub struct MetricsWriter {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

pub const METRICS_CSV_HEADER: &str = "stage,update,loss,grad_norm,off_policy_kl,reference_kl,\
valid_format_ratio,rollout_success,oob_total,oob_lower_neg,oob_upper_pos,\
kl_share_0,kl_share_1,kl_share_2,kl_share_3,kl_share_4,kl_share_5,kl_share_6,kl_share_7,\
filtered_groups,skipped";

impl MetricsWriter {
    pub fn open(run_dir: &Path) -> Result<Self, RecordError> {
        let csv_path = run_dir.join("metrics.csv");
        let fresh = !csv_path.exists();
        let mut csv = BufWriter::new(OpenOptions::new().create(true).append(true).open(&csv_path)?);
        if fresh {
            writeln!(csv, "{METRICS_CSV_HEADER}")?;
        }
        let jsonl = BufWriter::new(
            OpenOptions::new().create(true).append(true).open(run_dir.join("metrics.jsonl"))?,
        );
        Ok(MetricsWriter { csv, jsonl })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<(), RecordError> {
        write!(self.csv, "{},{},{},{},{},{},{},{},{},{},{}", m.stage, m.update, m.loss, m.grad_norm,
            m.off_policy_kl, m.reference_kl, m.valid_format_ratio, m.rollout_success, m.oob_total,
            m.oob_lower_neg, m.oob_upper_pos)?;
        for share in m.kl_shares {
            write!(self.csv, ",{share}")?;
        }
        writeln!(self.csv, ",{},{}", m.filtered_groups, m.skipped)?;
        let line = serde_json::to_string(m).expect("metrics always serialize");
        self.jsonl.write_all(line.as_bytes())?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordError> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

/// One evaluation snapshot, taken every few stages at the eval temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    pub valid_format_ratio: f64,
}

pub const EVAL_CSV_HEADER: &str = "stage,success_rate,mean_return,valid_format_ratio";

/// Append-only writer for `eval.csv`.
pub struct EvalWriter {
    csv: BufWriter<File>,
}

impl EvalWriter {
    pub fn open(run_dir: &Path) -> Result<Self, RecordError> {
        let path = run_dir.join("eval.csv");
        let fresh = !path.exists();
        let mut csv = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        if fresh {
            writeln!(csv, "{EVAL_CSV_HEADER}")?;
        }
        Ok(EvalWriter { csv })
    }

    pub fn append(&mut self, r: &EvalRecord) -> Result<(), RecordError> {
        writeln!(self.csv, "{},{},{},{}", r.stage, r.success_rate, r.mean_return, r.valid_format_ratio)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordError> {
        Ok(self.csv.flush()?)
    }
}

pub fn load_eval_records(run_dir: &Path) -> Result<Vec<EvalRecord>, RecordError> {
    let text = fs::read_to_string(run_dir.join("eval.csv"))?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = || -> Result<&str, RecordError> {
            cols.next().ok_or_else(|| RecordError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("eval.csv line {} is short", ix + 1),
            )))
        };
        let stage = next()?.parse().map_err(bad_eval_field(ix))?;
        let success_rate = next()?.parse().map_err(bad_eval_field(ix))?;
        let mean_return = next()?.parse().map_err(bad_eval_field(ix))?;
        let valid_format_ratio = next()?.parse().map_err(bad_eval_field(ix))?;
        out.push(EvalRecord { stage, success_rate, mean_return, valid_format_ratio });
    }
    Ok(out)
}

fn bad_eval_field<E: std::fmt::Display>(ix: usize) -> impl Fn(E) -> RecordError {
    move |e| {
        RecordError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("eval.csv line {}: {e}", ix + 1),
        ))
    }
}

/// Standard file names inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn checkpoint(&self, stage: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{stage:06}.bin"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint_final.bin")
    }

    pub fn batch_records(&self, stage: u64) -> PathBuf {
        self.dir.join(format!("batch_{stage:06}.jsonl"))
    }

    pub fn batch_manifest(&self, stage: u64) -> PathBuf {
        self.dir.join(format!("batch_{stage:06}.manifest.json"))
    }
}
