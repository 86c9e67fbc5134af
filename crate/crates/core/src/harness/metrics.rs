//! Experiment metric records, their collection and CSV / JSON-lines export.

use std::collections::BTreeMap;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("unknown experiment {0}")]
    UnknownExperiment(String),
    #[error("timestamp {t} precedes {last} in experiment {experiment}")]
    NonMonotone { experiment: String, t: f64, last: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("bad tag field {0:?}")]
    Tags(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" => Ok(Format::Jsonl),
            o => Err(format!("unknown format {o:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment_id: String,
    /// Simulated seconds since the experiment started.
    pub timestamp: f64,
    pub metric: String,
    pub value: f64,
    pub unit: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(experiment_id: &str, timestamp: f64, metric: &str, value: f64, unit: &str) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            timestamp,
            metric: metric.into(),
            value,
            unit: unit.into(),
            tags: BTreeMap::new(),
        }
    }

    pub fn tag(mut self, k: &str, v: impl Into<String>) -> Self {
        self.tags.insert(k.into(), v.into());
        self
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    experiment_id: String,
    timestamp: f64,
    metric: String,
    value: f64,
    unit: String,
    tags: String,
}

fn tags_to_field(tags: &BTreeMap<String, String>) -> String {
    tags.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn field_to_tags(s: &str) -> Result<BTreeMap<String, String>, MetricsError> {
    if s.is_empty() {
        return Ok(BTreeMap::new());
    }
    s.split(';')
        .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| MetricsError::Tags(kv.into())))
        .collect()
}

/// Append-only per-experiment series. Timestamps never go backwards within
/// one experiment.
#[derive(Clone, Debug, Default)]
pub struct MetricStore {
    experiments: BTreeMap<String, Vec<MetricRecord>>,
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<(), MetricsError> {
        let series = self.experiments.entry(r.experiment_id.clone()).or_default();
        if let Some(last) = series.last() {
            if r.timestamp < last.timestamp {
                return Err(MetricsError::NonMonotone {
                    experiment: r.experiment_id,
                    t: r.timestamp,
                    last: last.timestamp,
                });
            }
        }
        series.push(r);
        Ok(())
    }

    pub fn records(&self, experiment: &str) -> Result<&[MetricRecord], MetricsError> {
        self.experiments.get(experiment).map(Vec::as_slice).ok_or_else(|| MetricsError::UnknownExperiment(experiment.into()))
    }

    pub fn experiments(&self) -> impl Iterator<Item = &str> {
        self.experiments.keys().map(String::as_str)
    }

    pub fn export(&self, experiment: &str, format: Format) -> Result<String, MetricsError> {
        let recs = self.records(experiment)?;
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in recs {
                    w.serialize(CsvRow {
                        experiment_id: r.experiment_id.clone(),
                        timestamp: r.timestamp,
                        metric: r.metric.clone(),
                        value: r.value,
                        unit: r.unit.clone(),
                        tags: tags_to_field(&r.tags),
                    })?;
                }
                let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
                Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
            }
            Format::Jsonl => {
                let mut out = String::new();
                for r in recs {
                    out.push_str(&serde_json::to_string(r).expect("records serialize"));
                    out.push('\n');
                }
                Ok(out)
            }
        }
    }

    pub fn import(text: &str, format: Format) -> Result<Vec<MetricRecord>, MetricsError> {
        match format {
            Format::Csv => {
                let mut rd = csv::Reader::from_reader(text.as_bytes());
                rd.deserialize::<CsvRow>()
                    .map(|row| {
                        let row = row?;
                        Ok(MetricRecord {
                            experiment_id: row.experiment_id,
                            timestamp: row.timestamp,
                            metric: row.metric,
                            value: row.value,
                            unit: row.unit,
                            tags: field_to_tags(&row.tags)?,
                        })
                    })
                    .collect()
            }
            Format::Jsonl => text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetricsError::Json { line: i + 1, message: e.to_string() }))
                .collect(),
        }
    }
}

/// Many producers, one consumer. Producers clone the sender; the consumer
/// drains into a store once producers are done.
pub struct MetricSink {
    tx: mpsc::Sender<MetricRecord>,
    rx: mpsc::Receiver<MetricRecord>,
}

impl Default for MetricSink {
    fn default() -> Self {
        let (tx, rx) = mpsc::channel();
        Self { tx, rx }
    }
}

impl MetricSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sender(&self) -> mpsc::Sender<MetricRecord> {
        self.tx.clone()
    }

    /// Moves everything sent so far into `store`. Records that would break
    /// timestamp order are dropped and counted.
    pub fn drain_into(&self, store: &mut MetricStore) -> usize {
        let mut rejected = 0;
        while let Ok(r) = self.rx.try_recv() {
            if store.push(r).is_err() {
                rejected += 1;
            }
        }
        rejected
    }
}
