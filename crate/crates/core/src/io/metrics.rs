//! Evaluation metrics and the NDJSON metrics stream.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::UnitId;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Mcc,
}

/// Accuracy, or Matthews correlation for binary labels (class 1 positive;
/// 0 when the denominator vanishes).
pub fn eval_metric(predictions: &[usize], labels: &[usize], kind: MetricKind) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no labels to evaluate"));
    }
    match kind {
        MetricKind::Accuracy => {
            let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len() as f64)
        }
        MetricKind::Mcc => {
            let (mut tp, mut tn, mut fp, mut fn_) = (0f64, 0f64, 0f64, 0f64);
            for (&p, &l) in predictions.iter().zip(labels) {
                if p > 1 || l > 1 {
                    return Err(Error::input("mcc is defined for binary labels"));
                }
                match (p, l) {
                    (1, 1) => tp += 1.0,
                    (0, 0) => tn += 1.0,
                    (1, 0) => fp += 1.0,
                    _ => fn_ += 1.0,
                }
            }
            let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
            Ok(if denom == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / denom })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Eval,
    Prune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDims {
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub rank: usize,
}

impl From<&ModelConfig> for ConfigDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            heads: c.heads,
            layers: c.layers,
            intermediate: c.intermediate,
            rank: c.rank,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalValue {
    pub kind: MetricKind,
    pub value: f64,
}

/// One NDJSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub kind: RecordKind,
    pub stage: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossComponents>,
    pub config: ConfigDims,
    pub param_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<EvalValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removed: Option<Vec<UnitId>>,
}

impl MetricsRecord {
    pub fn new(kind: RecordKind, stage: usize, step: usize, config: &ModelConfig, param_count: usize) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            kind,
            stage,
            step,
            lr: None,
            loss: None,
            config: config.into(),
            param_count,
            metric: None,
            removed: None,
        }
    }
}

/// Collects records in memory and optionally mirrors each to an NDJSON file.
#[derive(Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            writer: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric.map(|m| m.value))
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn to_ndjson(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses an NDJSON metrics file, rejecting lines of another schema version.
pub fn read_ndjson(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)?;
        if rec.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::input(format!(
                "line {}: schema version {} unsupported",
                n + 1,
                rec.schema_version
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
