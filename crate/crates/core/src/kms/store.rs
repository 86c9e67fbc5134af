//! Key buffer shared by the two ends of a node pair.
//!
//! Both ends hold identical copies of every block. Operations that remove
//! key material apply to the two copies under one lock, which is the
//! serialization point that makes the pair linearizable.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::Serialize;

use crate::audit::{BlockSource, KeySegment};
use crate::ids::{KeyId, NodeId, NodePair, SaeId};
use crate::time::SimTime;

#[derive(Clone, Debug)]
pub(crate) struct StoredBlock {
    pub key_id: KeyId,
    pub bits: Vec<u8>,
    pub offset: usize,
    pub source: BlockSource,
}

impl StoredBlock {
    fn remaining(&self) -> usize {
        self.bits.len() - self.offset
    }
}

/// Which stored blocks an operation may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyFilter<'a> {
    Any,
    /// Only material produced by a quantum channel, optionally of one vendor.
    Channel(Option<&'a str>),
}

impl KeyFilter<'_> {
    fn admits(&self, src: &BlockSource) -> bool {
        match self {
            KeyFilter::Any => true,
            KeyFilter::Channel(None) => matches!(src, BlockSource::Channel { .. }),
            KeyFilter::Channel(Some(v)) => src.vendor() == Some(*v),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ServedEntry {
    pub bits: Vec<u8>,
    pub expires_at: SimTime,
    pub master: NodeId,
    pub slave_sae: Option<SaeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyIdFault {
    Unknown,
    Expired,
    Consumed,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct EndState {
    pub blocks: VecDeque<StoredBlock>,
    pub served: BTreeMap<KeyId, ServedEntry>,
    pub tombstones: BTreeMap<KeyId, KeyIdFault>,
}

/// Byte counters for one pair. At every instant
/// `ingested = served + buffered + expired + relay_consumed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PairStats {
    pub ingested_bytes: u64,
    pub served_bytes: u64,
    pub buffered_bytes: u64,
    pub expired_bytes: u64,
    pub relay_consumed_bytes: u64,
    pub served_keys: u64,
    pub evicted_blocks: u64,
}

impl PairStats {
    pub fn balanced(&self) -> bool {
        self.ingested_bytes == self.served_bytes + self.buffered_bytes + self.expired_bytes + self.relay_consumed_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evicted {
    pub key_id: KeyId,
    pub bytes: usize,
}

#[derive(Debug)]
pub struct PairStore {
    pub(crate) pair: NodePair,
    pub(crate) ends: [EndState; 2],
    pub(crate) stats: PairStats,
    capacity: usize,
    /// Unread bytes across all blocks of one end.
    total: usize,
    seen: HashSet<KeyId>,
}

impl PairStore {
    pub fn new(pair: NodePair, capacity: usize) -> Self {
        Self {
            pair,
            ends: [EndState::default(), EndState::default()],
            stats: PairStats::default(),
            capacity,
            total: 0,
            seen: HashSet::new(),
        }
    }

    pub fn pair(&self) -> &NodePair {
        &self.pair
    }

    pub fn stats(&self) -> PairStats {
        let mut s = self.stats;
        s.buffered_bytes = self.buffered(KeyFilter::Any) as u64;
        s
    }

    pub fn buffered(&self, filter: KeyFilter<'_>) -> usize {
        if filter == KeyFilter::Any {
            return self.total;
        }
        self.ends[0].blocks.iter().filter(|b| filter.admits(&b.source)).map(StoredBlock::remaining).sum()
    }

    pub fn block_count(&self) -> usize {
        self.ends[0].blocks.len()
    }

    /// Adds a block to both ends, evicting the oldest blocks when the pair
    /// would exceed its capacity. A repeated key id is refused.
    pub fn ingest(&mut self, key_id: KeyId, bits: Vec<u8>, source: BlockSource) -> Result<Vec<Evicted>, KeyId> {
        if !self.seen.insert(key_id) {
            return Err(key_id);
        }
        let n = bits.len();
        self.stats.ingested_bytes += n as u64;
        let block = StoredBlock { key_id, bits, offset: 0, source };
        self.ends[0].blocks.push_back(block.clone());
        self.ends[1].blocks.push_back(block);
        self.total += n;
        let mut evicted = Vec::new();
        while self.total > self.capacity {
            let Some(front) = self.ends[0].blocks.pop_front() else { break };
            self.ends[1].blocks.pop_front();
            let bytes = front.remaining();
            self.total -= bytes;
            self.stats.expired_bytes += bytes as u64;
            self.stats.evicted_blocks += 1;
            evicted.push(Evicted { key_id: front.key_id, bytes });
        }
        Ok(evicted)
    }

    /// Removes `n` bytes in FIFO order from blocks admitted by `filter`, from
    /// both ends. Nothing is removed when fewer than `n` bytes qualify.
    pub fn take(&mut self, n: usize, filter: KeyFilter<'_>) -> Option<(Vec<u8>, Vec<KeySegment>)> {
        if n == 0 || self.buffered(filter) < n {
            return None;
        }
        let mut out = Vec::with_capacity(n);
        let mut segments = Vec::new();
        let mut need = n;
        let mut i = 0;
        while need > 0 {
            let b = &self.ends[0].blocks[i];
            if !filter.admits(&b.source) {
                i += 1;
                continue;
            }
            let k = need.min(b.remaining());
            out.extend_from_slice(&b.bits[b.offset..b.offset + k]);
            segments.push(KeySegment { block: b.key_id, offset: b.offset as u32, len: k as u32 });
            need -= k;
            self.total -= k;
            for end in &mut self.ends {
                let blk = &mut end.blocks[i];
                blk.offset += k;
            }
            if self.ends[0].blocks[i].remaining() == 0 {
                for end in &mut self.ends {
                    end.blocks.remove(i);
                }
            } else {
                i += 1;
            }
        }
        Some((out, segments))
    }

    /// Moves served entries past their deadline to the expired tombstones.
    pub fn sweep(&mut self, now: SimTime) -> Vec<KeyId> {
        let mut expired = Vec::new();
        for end in &mut self.ends {
            let ids: Vec<KeyId> = end.served.iter().filter(|(_, e)| e.expires_at <= now).map(|(k, _)| *k).collect();
            for id in ids {
                end.served.remove(&id);
                end.tombstones.insert(id, KeyIdFault::Expired);
                expired.push(id);
            }
        }
        expired
    }

    pub(crate) fn side(&self, node: &NodeId) -> usize {
        self.pair.side_of(node).expect("node belongs to pair")
    }

    /// Whether `bytes` occurs inside any buffered block of this pair.
    pub fn contains_bytes(&self, bytes: &[u8]) -> bool {
        !bytes.is_empty()
            && self.ends.iter().any(|e| {
                e.blocks.iter().any(|b| b.bits[b.offset..].windows(bytes.len()).any(|w| w == bytes))
                    || e.served.values().any(|s| s.bits.windows(bytes.len()).any(|w| w == bytes))
            })
    }

    /// Snapshot of one end's buffer as (key id, unread bytes).
    pub fn end_view(&self, node: &NodeId) -> Vec<(KeyId, Vec<u8>)> {
        let side = self.side(node);
        self.ends[side].blocks.iter().map(|b| (b.key_id, b.bits[b.offset..].to_vec())).collect()
    }
}
