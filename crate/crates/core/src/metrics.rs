//! `metrics.jsonl`: one record per line with the fields
//! `{step, scenario, metric, value, subset, seed}`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: u64,
    pub scenario: String,
    pub metric: String,
    pub value: f64,
    pub subset: String,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(step: u64, scenario: &str, metric: &str, value: f64, subset: &str, seed: u64) -> Self {
        Self {
            step,
            scenario: scenario.into(),
            metric: metric.into(),
            value,
            subset: subset.into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.is_empty() || self.metric.is_empty() || self.subset.is_empty() {
            return Err(Error::Metrics("scenario, metric and subset must be non-empty".into()));
        }
        if !self.value.is_finite() {
            return Err(Error::Metrics(format!(
                "non-finite value for {}/{}/{} at step {}",
                self.scenario, self.metric, self.subset, self.step
            )));
        }
        Ok(())
    }

    /// Identifies the curve this record belongs to.
    pub fn curve(&self) -> (String, String, String) {
        (self.scenario.clone(), self.metric.clone(), self.subset.clone())
    }
}

/// Parses JSONL text; blank lines are skipped, anything else must be a
/// valid record.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord =
            serde_json::from_str(line).map_err(|e| Error::Metrics(format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| Error::Metrics(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

/// One JSON object per line, newline-terminated.
pub fn to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, to_jsonl(records)?).map_err(|e| Error::io(path, e))
}

/// Appends records, flushing after each batch.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, records: &[MetricRecord]) -> Result<()> {
        for r in records {
            r.validate()?;
            let line = serde_json::to_string(r)?;
            writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Keeps only records with `step <= last_step`; used when resuming.
pub fn truncate_after(path: &Path, last_step: u64) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line).map_err(|e| Error::Metrics(e.to_string()))?;
        if rec.step <= last_step {
            kept.push(rec);
        }
    }
    write_metrics(path, &kept)?;
    Ok(kept.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_round_trip() {
        let r = MetricRecord::new(50, "icku", "acc", 0.5, "all", 3);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"step":50,"scenario":"icku","metric":"acc","value":0.5,"subset":"all","seed":3}"#
        );
        assert_eq!(parse_metrics(&line).unwrap(), vec![r]);
    }

    #[test]
    fn rejects_missing_and_extra_fields() {
        assert!(parse_metrics(r#"{"step":1,"scenario":"a","metric":"b","value":1}"#).is_err());
        assert!(parse_metrics(
            r#"{"step":1,"scenario":"a","metric":"b","value":1,"subset":"all","seed":0,"x":1}"#
        )
        .is_err());
    }
}
