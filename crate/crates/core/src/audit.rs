//! Append-only audit trail of key movements, serialized as JSON lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::ids::{ChannelId, JobId, KeyId, Ksid, NodeId, NodePair, SaeId};
use crate::time::SimTime;

/// Byte range taken from one stored block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeySegment {
    pub block: KeyId,
    pub offset: u32,
    pub len: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSource {
    Channel { channel_id: ChannelId, vendor: String },
    Relay { job_id: JobId },
}

impl BlockSource {
    pub fn vendor(&self) -> Option<&str> {
        match self {
            BlockSource::Channel { vendor, .. } => Some(vendor),
            BlockSource::Relay { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interface {
    Etsi014,
    Etsi004,
    Combination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditRecord {
    Ingested { t: SimTime, pair: NodePair, key_id: KeyId, bytes: usize, source: BlockSource },
    Evicted { t: SimTime, pair: NodePair, key_id: KeyId, bytes: usize },
    Served {
        t: SimTime,
        pair: NodePair,
        master: NodeId,
        slave: NodeId,
        key_id: KeyId,
        bytes: usize,
        interface: Interface,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        sae: Option<SaeId>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        ksid: Option<Ksid>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        index: Option<u64>,
        segments: Vec<KeySegment>,
    },
    Retrieved { t: SimTime, pair: NodePair, node: NodeId, key_id: KeyId },
    ServedExpired { t: SimTime, pair: NodePair, key_id: KeyId },
    RelayHop {
        t: SimTime,
        job_id: JobId,
        hop: usize,
        from: NodeId,
        to: NodeId,
        bytes: usize,
        segments: Vec<KeySegment>,
    },
    Deposited { t: SimTime, job_id: JobId, pair: NodePair, key_id: KeyId, bytes: usize },
    JobFinished {
        t: SimTime,
        job_id: JobId,
        delivered: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        reason: Option<String>,
    },
    SessionOpened { t: SimTime, ksid: Ksid, src: SaeId, dst: SaeId, max_bps: f64 },
    SessionClosed { t: SimTime, ksid: Ksid, discarded_chunks: usize },
}

impl AuditRecord {
    pub fn time(&self) -> SimTime {
        match self {
            AuditRecord::Ingested { t, .. }
            | AuditRecord::Evicted { t, .. }
            | AuditRecord::Served { t, .. }
            | AuditRecord::Retrieved { t, .. }
            | AuditRecord::ServedExpired { t, .. }
            | AuditRecord::RelayHop { t, .. }
            | AuditRecord::Deposited { t, .. }
            | AuditRecord::JobFinished { t, .. }
            | AuditRecord::SessionOpened { t, .. }
            | AuditRecord::SessionClosed { t, .. } => *t,
        }
    }
}

#[derive(Default)]
pub struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("records", &self.records.lock().len()).finish()
    }
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also mirrors every record to `path` as it is appended.
    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let log = Self::default();
        *log.sink.lock() = Some(BufWriter::new(File::create(path)?));
        Ok(log)
    }

    pub fn append(&self, rec: AuditRecord) {
        let mut records = self.records.lock();
        if let Some(w) = self.sink.lock().as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from).and_then(|_| w.write_all(b"\n")) {
                tracing::warn!("audit sink write failed: {e}");
            }
        }
        records.push(rec);
    }

    pub fn flush(&self) -> std::io::Result<()> {
        match self.sink.lock().as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records.lock().iter() {
            out.push_str(&serde_json::to_string(r).expect("audit records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Findings of the single-use check over an audit trail.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SingleUseReport {
    pub served: usize,
    pub duplicate_key_ids: Vec<KeyId>,
    /// Block byte ranges handed out more than once.
    pub overlapping_segments: Vec<(KeySegment, KeySegment)>,
}

impl SingleUseReport {
    pub fn is_clean(&self) -> bool {
        self.duplicate_key_ids.is_empty() && self.overlapping_segments.is_empty()
    }
}

/// Checks that no served key id repeats and that no stored byte was handed
/// out twice, whether to an application or to a relay hop.
pub fn check_single_use(records: &[AuditRecord]) -> SingleUseReport {
    let mut report = SingleUseReport::default();
    let mut ids = BTreeSet::new();
    let mut by_block: BTreeMap<KeyId, Vec<KeySegment>> = BTreeMap::new();
    for r in records {
        let segs = match r {
            AuditRecord::Served { key_id, segments, .. } => {
                report.served += 1;
                if !ids.insert(*key_id) {
                    report.duplicate_key_ids.push(*key_id);
                }
                segments
            }
            AuditRecord::RelayHop { segments, .. } => segments,
            _ => continue,
        };
        for s in segs {
            by_block.entry(s.block).or_default().push(*s);
        }
    }
    for segs in by_block.values_mut() {
        segs.sort_by_key(|s| s.offset);
        for w in segs.windows(2) {
            if w[0].offset + w[0].len > w[1].offset {
                report.overlapping_segments.push((w[0], w[1]));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(b: u128, offset: u32, len: u32) -> KeySegment {
        KeySegment { block: KeyId(uuid::Uuid::from_u128(b)), offset, len }
    }

    fn hop(segments: Vec<KeySegment>) -> AuditRecord {
        AuditRecord::RelayHop {
            t: SimTime(0),
            job_id: JobId::from("j"),
            hop: 0,
            from: "A".into(),
            to: "B".into(),
            bytes: 0,
            segments,
        }
    }

    #[test]
    fn overlap_is_reported() {
        let clean = check_single_use(&[hop(vec![seg(1, 0, 10)]), hop(vec![seg(1, 10, 5), seg(2, 0, 5)])]);
        assert!(clean.is_clean());
        let dirty = check_single_use(&[hop(vec![seg(1, 0, 10)]), hop(vec![seg(1, 9, 2)])]);
        assert_eq!(dirty.overlapping_segments.len(), 1);
    }

    #[test]
    fn records_round_trip_as_json() {
        let r = hop(vec![seg(3, 1, 2)]);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.starts_with("{\"event\":\"relay_hop\""));
        assert_eq!(serde_json::from_str::<AuditRecord>(&s).unwrap(), r);
    }
}
