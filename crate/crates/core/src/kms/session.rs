//! Session-style key delivery: an application pair opens a session and both
//! sides pull equal chunks by index.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{Kms, KmsError};
use crate::audit::{AuditRecord, Interface};
use crate::ids::{KeyId, Ksid, NodeId, SaeId};
use crate::kms::KeyFilter;
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Qos {
    pub key_chunk_size_bytes: usize,
    /// Peak key consumption per side, in bits per second.
    pub max_bps: f64,
    /// How long a chunk fetched by one side stays available to the other.
    pub ttl_s: f64,
}

impl Default for Qos {
    fn default() -> Self {
        Self { key_chunk_size_bytes: 32, max_bps: 256.0, ttl_s: 3600.0 }
    }
}

/// Rate knowledge the key manager needs from the control plane.
pub trait RouteOracle {
    /// Estimated deliverable key rate between two nodes in bits per second,
    /// net of existing reservations. `None` when no route exists.
    fn deliverable_bps(&self, a: &NodeId, b: &NodeId) -> Option<f64>;
    fn reserve(&self, a: &NodeId, b: &NodeId, bps: f64);
    fn release(&self, a: &NodeId, b: &NodeId, bps: f64);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyChunk {
    pub ksid: Ksid,
    pub index: u64,
    pub key_id: KeyId,
    pub bits: Vec<u8>,
}

impl std::fmt::Debug for KeyChunk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyChunk({}, #{}, {} bytes)", self.ksid, self.index, self.bits.len())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionInfo {
    pub ksid: Ksid,
    pub source: SaeId,
    pub destination: SaeId,
    pub qos: Qos,
    pub state: SessionState,
    pub next_index: u64,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    capacity: f64,
    rate: f64,
    last: SimTime,
}

impl Bucket {
    fn new(rate_bps: f64, chunk_bits: f64, now: SimTime) -> Self {
        let capacity = rate_bps.max(chunk_bits);
        Self { tokens: capacity, capacity, rate: rate_bps, last: now }
    }

    fn refill(&mut self, now: SimTime) {
        let dt = now.saturating_sub(self.last).as_secs_f64();
        self.tokens = (self.tokens + dt * self.rate).min(self.capacity);
        self.last = self.last.max(now);
    }
}

#[derive(Debug)]
struct Retained {
    key_id: KeyId,
    bits: Vec<u8>,
    expires_at: SimTime,
    fetched: [bool; 2],
}

#[derive(Debug)]
pub(super) struct Session {
    ksid: Ksid,
    ends: [SaeId; 2],
    nodes: [NodeId; 2],
    qos: Qos,
    state: SessionState,
    next_index: u64,
    cursor: [u64; 2],
    buckets: [Bucket; 2],
    retained: BTreeMap<u64, Retained>,
}

impl Session {
    fn info(&self) -> SessionInfo {
        SessionInfo {
            ksid: self.ksid,
            source: self.ends[0].clone(),
            destination: self.ends[1].clone(),
            qos: self.qos.clone(),
            state: self.state,
            next_index: self.next_index,
        }
    }
}

impl Kms {
    /// Opens a session between two application endpoints after checking the
    /// requested rate against what the network can deliver between them.
    pub fn open_connect(
        &self,
        src: &SaeId,
        dst: &SaeId,
        qos: Qos,
        oracle: &dyn RouteOracle,
        now: SimTime,
    ) -> Result<Ksid, KmsError> {
        let sn = self.app_node(src)?;
        let dn = match self.app_node(dst) {
            Ok(n) => n,
            Err(KmsError::UnknownNode(_)) => return Err(KmsError::Unreachable(dst.clone())),
            Err(e) => return Err(e),
        };
        if sn == dn {
            return Err(KmsError::DegenerateEndpoints(sn));
        }
        let st = self.settings();
        if qos.key_chunk_size_bytes < st.min_key_size_bytes || qos.key_chunk_size_bytes > st.max_key_size_bytes {
            return Err(KmsError::SizeOutOfBounds {
                size: qos.key_chunk_size_bytes,
                min: st.min_key_size_bytes,
                max: st.max_key_size_bytes,
            });
        }
        if !(qos.max_bps > 0.0 && qos.max_bps.is_finite()) {
            return Err(KmsError::InvalidQos("max_bps must be positive".into()));
        }
        if !(qos.ttl_s > 0.0) {
            return Err(KmsError::InvalidQos("ttl_s must be positive".into()));
        }
        let rate = oracle.deliverable_bps(&sn, &dn).ok_or_else(|| KmsError::Unreachable(dst.clone()))?;
        let admissible = st.admission_fraction * rate.max(0.0);
        if qos.max_bps > admissible {
            return Err(KmsError::QosUnsatisfiable { requested_bps: qos.max_bps, admissible_bps: admissible });
        }
        oracle.reserve(&sn, &dn, qos.max_bps);
        let ksid = Ksid(self.fresh_id().0);
        let chunk_bits = (qos.key_chunk_size_bytes * 8) as f64;
        let session = Session {
            ksid,
            ends: [src.clone(), dst.clone()],
            nodes: [sn, dn],
            buckets: [Bucket::new(qos.max_bps, chunk_bits, now), Bucket::new(qos.max_bps, chunk_bits, now)],
            qos: qos.clone(),
            state: SessionState::Open,
            next_index: 0,
            cursor: [0, 0],
            retained: BTreeMap::new(),
        };
        self.sessions.lock().insert(ksid, Arc::new(Mutex::new(session)));
        self.audit().append(AuditRecord::SessionOpened {
            t: now,
            ksid,
            src: src.clone(),
            dst: dst.clone(),
            max_bps: qos.max_bps,
        });
        Ok(ksid)
    }

    fn session(&self, ksid: &Ksid) -> Result<Arc<Mutex<Session>>, KmsError> {
        self.sessions.lock().get(ksid).cloned().ok_or(KmsError::UnknownKsid)
    }

    pub fn session_info(&self, ksid: &Ksid) -> Result<SessionInfo, KmsError> {
        Ok(self.session(ksid)?.lock().info())
    }

    /// Next chunk for `caller`, or the chunk at `index` when the other side
    /// has already taken it and it is still retained. Both sides receive the
    /// same octets for the same index.
    pub fn get_key(&self, ksid: &Ksid, caller: &SaeId, index: Option<u64>, now: SimTime) -> Result<KeyChunk, KmsError> {
        let handle = self.session(ksid)?;
        let mut s = handle.lock();
        if s.state == SessionState::Closed {
            return Err(KmsError::SessionClosed);
        }
        let side = s.ends.iter().position(|e| e == caller).ok_or(KmsError::NotSessionParty)?;
        s.retained.retain(|_, r| r.expires_at > now);

        let idx = match index {
            Some(i) => i,
            None => s
                .retained
                .range(s.cursor[side]..)
                .find(|(_, r)| !r.fetched[side])
                .map(|(i, _)| *i)
                .unwrap_or(s.next_index),
        };
        let chunk_bits = (s.qos.key_chunk_size_bytes * 8) as f64;
        s.buckets[side].refill(now);

        if let Some(r) = s.retained.get(&idx) {
            if r.fetched[side] {
                return Err(KmsError::IndexUnavailable(idx));
            }
            if s.buckets[side].tokens + 1e-9 < chunk_bits {
                return Err(KmsError::RateLimited);
            }
            s.buckets[side].tokens -= chunk_bits;
            let r = s.retained.get_mut(&idx).expect("present");
            r.fetched[side] = true;
            let chunk = KeyChunk { ksid: *ksid, index: idx, key_id: r.key_id, bits: r.bits.clone() };
            if r.fetched == [true, true] {
                s.retained.remove(&idx);
            }
            s.cursor[side] = s.cursor[side].max(idx + 1);
            return Ok(chunk);
        }
        if idx != s.next_index {
            return Err(KmsError::IndexUnavailable(idx));
        }
        if s.buckets[side].tokens + 1e-9 < chunk_bits {
            return Err(KmsError::RateLimited);
        }
        let n = s.qos.key_chunk_size_bytes;
        let store = self.pair_store(&s.nodes[0], &s.nodes[1])?;
        let (bits, segments, pair) = {
            let mut ps = store.lock();
            let Some((bits, segments)) = ps.take(n, KeyFilter::Any) else {
                return Err(KmsError::KeyExhausted);
            };
            ps.stats.served_bytes += n as u64;
            ps.stats.served_keys += 1;
            (bits, segments, ps.pair.clone())
        };
        s.buckets[side].tokens -= chunk_bits;
        let key_id = self.fresh_id();
        self.audit().append(AuditRecord::Served {
            t: now,
            pair,
            master: s.nodes[side].clone(),
            slave: s.nodes[1 - side].clone(),
            key_id,
            bytes: n,
            interface: Interface::Etsi004,
            sae: Some(caller.clone()),
            ksid: Some(*ksid),
            index: Some(idx),
            segments,
        });
        let mut fetched = [false, false];
        fetched[side] = true;
        let expires_at = now + SimDuration::from_secs_f64(s.qos.ttl_s);
        s.retained.insert(idx, Retained { key_id, bits: bits.clone(), expires_at, fetched });
        s.next_index += 1;
        s.cursor[side] = idx + 1;
        Ok(KeyChunk { ksid: *ksid, index: idx, key_id, bits })
    }

    /// Closes a session, dropping retained chunks for good. Closing twice is
    /// harmless.
    pub fn close(&self, ksid: &Ksid, oracle: &dyn RouteOracle, now: SimTime) -> Result<(), KmsError> {
        let handle = self.session(ksid)?;
        let mut s = handle.lock();
        if s.state == SessionState::Closed {
            return Ok(());
        }
        s.state = SessionState::Closed;
        let discarded_chunks = s.retained.len();
        s.retained.clear();
        oracle.release(&s.nodes[0], &s.nodes[1], s.qos.max_bps);
        self.audit().append(AuditRecord::SessionClosed { t: now, ksid: *ksid, discarded_chunks });
        Ok(())
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        self.sessions.lock().values().map(|s| s.lock().info()).collect()
    }
}
