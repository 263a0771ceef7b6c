//! Line-delimited metrics: one header line, then one record per node per
//! round.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sentinel::DefenseCounters;

pub const SCHEMA_NAME: &str = "dgrpo-metrics";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: schema {found} unsupported (expected {SCHEMA_NAME} v{SCHEMA_VERSION})")]
    SchemaMismatch { path: PathBuf, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Honest,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    TopK,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub version: u32,
    pub decode: Decode,
    pub seed: u64,
    pub validation_prompts: usize,
    pub validation_samples: usize,
}

impl MetricsHeader {
    pub fn new(
        decode: Decode,
        seed: u64,
        validation_prompts: usize,
        validation_samples: usize,
    ) -> Self {
        Self {
            schema: SCHEMA_NAME.into(),
            version: SCHEMA_VERSION,
            decode,
            seed,
            validation_prompts,
            validation_samples,
        }
    }
}

/// Validation fields describe the node's model before the round's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub node_id: usize,
    pub role: Role,
    pub mean_reward: Option<f64>,
    pub train_reward: Option<f64>,
    pub asr: Option<f64>,
    pub conditional_asr: Option<f64>,
    pub extended_asr: Option<f64>,
    pub eligible_count: u64,
    pub defense: DefenseCounters,
    pub groups_used: usize,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Single writer appending to one metrics file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(io)?;
        let mut writer = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writer.line(header)?;
        writer.flush()?;
        Ok(writer)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), MetricsError> {
        let text = serde_json::to_string(value).expect("metrics serialize");
        writeln!(self.out, "{text}").map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn append(&mut self, records: &[MetricsRecord]) -> Result<(), MetricsError> {
        for r in records {
            self.line(r)?;
        }
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.out.flush().map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn write_metrics(
    path: &Path,
    header: &MetricsHeader,
    records: &[MetricsRecord],
) -> Result<(), MetricsError> {
    let mut w = MetricsWriter::create(path, header)?;
    w.append(records)
}

pub fn load_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsRecord>), MetricsError> {
    let file = File::open(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, reason: String| MetricsError::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        reason,
    };
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty metrics file".into()))?;
    let first = first.map_err(io)?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(0, e.to_string()))?;
    let schema = raw.get("schema").and_then(|v| v.as_str()).unwrap_or("?");
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if schema != SCHEMA_NAME || version != u64::from(SCHEMA_VERSION) {
        return Err(MetricsError::SchemaMismatch {
            path: path.to_path_buf(),
            found: format!("{schema} v{version}"),
        });
    }
    let header: MetricsHeader =
        serde_json::from_value(raw).map_err(|e| parse_err(0, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?);
    }
    Ok((header, records))
}

/// Mean of a field over honest records of one round.
pub fn honest_mean(
    records: &[MetricsRecord],
    round: usize,
    field: impl Fn(&MetricsRecord) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.round == round && r.role == Role::Honest)
        .filter_map(field)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, node: usize, asr: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            round,
            node_id: node,
            role: Role::Honest,
            mean_reward: Some(0.25),
            train_reward: Some(0.5),
            asr,
            conditional_asr: None,
            extended_asr: None,
            eligible_count: 0,
            defense: DefenseCounters::default(),
            groups_used: 16,
            checksum: "00ff".into(),
            wall_time: None,
        }
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let header = MetricsHeader::new(Decode::TopK, 7, 64, 4);
        let records = vec![
            record(0, 0, Some(0.0)),
            record(0, 1, None),
            record(1, 0, Some(0.1 + 0.2)),
        ];
        write_metrics(&path, &header, &records).unwrap();
        let (h, r) = load_metrics(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, records);
        assert!(!std::fs::read_to_string(&path)
            .unwrap()
            .contains("wall_time"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"schema\":\"dgrpo-metrics\",\"version\":2}\n").unwrap();
        assert!(matches!(
            load_metrics(&path),
            Err(MetricsError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_metrics(Path::new("/nonexistent/m.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.jsonl"));
    }

    #[test]
    fn honest_mean_skips_absent() {
        let rs = vec![
            record(0, 0, Some(0.2)),
            record(0, 1, None),
            record(0, 2, Some(0.4)),
        ];
        assert!((honest_mean(&rs, 0, |r| r.asr).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(honest_mean(&rs, 1, |r| r.asr), None);
    }
}
