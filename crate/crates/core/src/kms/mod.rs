//! Local key management: per-pair key buffers behind the two application
//! interfaces (request style and session style).

mod session;
mod store;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditLog, AuditRecord, BlockSource, Interface, KeySegment};
use crate::ids::{JobId, KeyId, NodeId, NodePair, SaeId};
use crate::settings::KmsSettings;
use crate::time::{SimDuration, SimTime};
use crate::topology::Topology;

pub use session::{KeyChunk, Qos, RouteOracle, SessionInfo, SessionState};
pub use store::{Evicted, KeyFilter, KeyIdFault, PairStats, PairStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KeyIdFailure {
    pub key_id: String,
    pub reason: KeyIdFault,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum KmsError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is a relay without key management")]
    NotKmsNode(NodeId),
    #[error("unknown application {0}")]
    UnknownApp(SaeId),
    #[error("degenerate endpoints: both ends on {0}")]
    DegenerateEndpoints(NodeId),
    #[error("integrity fault: duplicate key id {0}")]
    IntegrityFault(KeyId),
    #[error("insufficient key: requested {requested} bytes, {available} available")]
    InsufficientKey { requested: usize, available: usize },
    #[error("key size {size} bytes outside [{min}, {max}]")]
    SizeOutOfBounds { size: usize, min: usize, max: usize },
    #[error("number of keys {number} outside [1, {max}]")]
    BadKeyCount { number: usize, max: usize },
    #[error("key id errors: {0:?}")]
    KeyIdErrors(Vec<KeyIdFailure>),
    #[error("destination {0} unreachable")]
    Unreachable(SaeId),
    #[error("QoS unsatisfiable: {requested_bps} bps requested, {admissible_bps:.1} bps admissible")]
    QosUnsatisfiable { requested_bps: f64, admissible_bps: f64 },
    #[error("invalid QoS: {0}")]
    InvalidQos(String),
    #[error("KEY_EXHAUSTED")]
    KeyExhausted,
    #[error("rate limited")]
    RateLimited,
    #[error("session closed")]
    SessionClosed,
    #[error("unknown ksid")]
    UnknownKsid,
    #[error("caller is not a party of the session")]
    NotSessionParty,
    #[error("index {0} is not available")]
    IndexUnavailable(u64),
}

/// A key handed to an application over the request-style interface.
#[derive(Clone, PartialEq, Eq)]
pub struct ServedKey {
    pub key_id: KeyId,
    pub bits: Vec<u8>,
}

impl std::fmt::Debug for ServedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ServedKey({}, {} bytes)", self.key_id, self.bits.len())
    }
}

/// Field names follow the REST key-delivery convention; sizes are in bits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct StatusRecord {
    pub source_KME_ID: String,
    pub target_KME_ID: String,
    pub master_SAE_ID: String,
    pub slave_SAE_ID: String,
    pub key_size: usize,
    pub stored_key_count: usize,
    pub max_key_count: usize,
    pub max_key_per_request: usize,
    pub max_key_size: usize,
    pub min_key_size: usize,
    pub max_SAE_ID_count: usize,
}

#[derive(Clone, Debug)]
struct NodeProfile {
    kms_enabled: bool,
    apps: Vec<String>,
}

/// Key management for every node of a network. Each node's view is the set
/// of pair stores it belongs to.
pub struct Kms {
    settings: KmsSettings,
    nodes: BTreeMap<NodeId, NodeProfile>,
    pairs: RwLock<BTreeMap<NodePair, Arc<Mutex<PairStore>>>>,
    sessions: Mutex<BTreeMap<crate::ids::Ksid, Arc<Mutex<session::Session>>>>,
    ids: Mutex<ChaCha20Rng>,
    audit: Arc<AuditLog>,
}

impl std::fmt::Debug for Kms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kms").field("pairs", &self.pairs.read().len()).finish()
    }
}

impl Kms {
    pub fn new(topo: &Topology, audit: Arc<AuditLog>) -> Self {
        let nodes = topo
            .nodes
            .values()
            .map(|n| (n.id.clone(), NodeProfile { kms_enabled: n.kms_enabled, apps: n.apps.clone() }))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(topo.settings.simulation.seed);
        rng.set_stream(u64::MAX);
        Self {
            settings: topo.settings.kms.clone(),
            nodes,
            pairs: RwLock::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
            ids: Mutex::new(rng),
            audit,
        }
    }

    pub fn settings(&self) -> &KmsSettings {
        &self.settings
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    fn fresh_id(&self) -> KeyId {
        KeyId::random(&mut *self.ids.lock())
    }

    fn node(&self, id: &NodeId) -> Result<&NodeProfile, KmsError> {
        self.nodes.get(id).ok_or_else(|| KmsError::UnknownNode(id.to_string()))
    }

    /// Resolves an application id to its node, refusing relay nodes.
    pub fn app_node(&self, sae: &SaeId) -> Result<NodeId, KmsError> {
        let node = sae.node();
        let profile = self.node(&node)?;
        if !profile.kms_enabled {
            return Err(KmsError::NotKmsNode(node));
        }
        if let Some((_, app)) = sae.0.split_once(':') {
            if !profile.apps.is_empty() && !profile.apps.iter().any(|a| a == app) {
                return Err(KmsError::UnknownApp(sae.clone()));
            }
        }
        Ok(node)
    }

    fn app_pair(&self, a: &SaeId, b: &SaeId) -> Result<(NodeId, NodeId), KmsError> {
        let na = self.app_node(a)?;
        let nb = self.app_node(b)?;
        if na == nb {
            return Err(KmsError::DegenerateEndpoints(na));
        }
        Ok((na, nb))
    }

    /// The pair store for two nodes, created empty on first use.
    pub fn pair_store(&self, a: &NodeId, b: &NodeId) -> Result<Arc<Mutex<PairStore>>, KmsError> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(KmsError::DegenerateEndpoints(a.clone()));
        }
        let pair = NodePair::new(a, b);
        if let Some(s) = self.pairs.read().get(&pair) {
            return Ok(s.clone());
        }
        let mut w = self.pairs.write();
        Ok(w.entry(pair.clone()).or_insert_with(|| Arc::new(Mutex::new(PairStore::new(pair, self.settings.capacity_bytes)))).clone())
    }

    pub fn pairs(&self) -> Vec<NodePair> {
        self.pairs.read().keys().cloned().collect()
    }

    pub fn pair_stats(&self, a: &NodeId, b: &NodeId) -> Option<PairStats> {
        self.pairs.read().get(&NodePair::new(a, b)).map(|s| s.lock().stats())
    }

    pub fn all_stats(&self) -> BTreeMap<NodePair, PairStats> {
        self.pairs.read().iter().map(|(k, v)| (k.clone(), v.lock().stats())).collect()
    }

    pub fn buffered(&self, a: &NodeId, b: &NodeId, filter: KeyFilter<'_>) -> usize {
        self.pairs.read().get(&NodePair::new(a, b)).map_or(0, |s| s.lock().buffered(filter))
    }

    /// Queues a block under the pair (`owner`, `peer`) on both ends.
    pub fn ingest(
        &self,
        owner: &NodeId,
        peer: &NodeId,
        key_id: KeyId,
        bits: Vec<u8>,
        source: BlockSource,
        now: SimTime,
    ) -> Result<Vec<Evicted>, KmsError> {
        let store = self.pair_store(owner, peer)?;
        let mut s = store.lock();
        let bytes = bits.len();
        let evicted = s.ingest(key_id, bits, source.clone()).map_err(KmsError::IntegrityFault)?;
        let pair = s.pair.clone();
        self.audit.append(AuditRecord::Ingested { t: now, pair: pair.clone(), key_id, bytes, source });
        for e in &evicted {
            self.audit.append(AuditRecord::Evicted { t: now, pair: pair.clone(), key_id: e.key_id, bytes: e.bytes });
        }
        Ok(evicted)
    }

    fn sweep(&self, s: &mut PairStore, now: SimTime) {
        for key_id in s.sweep(now) {
            self.audit.append(AuditRecord::ServedExpired { t: now, pair: s.pair.clone(), key_id });
        }
    }

    fn ttl(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.settings.ttl_s)
    }

    // ---------------------------------------------------------------- request-style interface

    pub fn etsi14_status(&self, master: &SaeId, slave: &SaeId, _now: SimTime) -> Result<StatusRecord, KmsError> {
        let (mn, sn) = self.app_pair(master, slave)?;
        let buffered = self.buffered(&mn, &sn, KeyFilter::Any);
        let k = self.settings.default_key_size_bytes;
        Ok(StatusRecord {
            source_KME_ID: mn.to_string(),
            target_KME_ID: sn.to_string(),
            master_SAE_ID: master.to_string(),
            slave_SAE_ID: slave.to_string(),
            key_size: k * 8,
            stored_key_count: buffered / k,
            max_key_count: self.settings.capacity_bytes / k,
            max_key_per_request: self.settings.max_key_per_request,
            max_key_size: self.settings.max_key_size_bytes * 8,
            min_key_size: self.settings.min_key_size_bytes * 8,
            max_SAE_ID_count: 0,
        })
    }

    /// Carves `number` keys of `size_bytes` for `master`; the slave side can
    /// collect each of them once by id. All keys are issued or none.
    pub fn etsi14_get_enc_keys(
        &self,
        master: &SaeId,
        slave: &SaeId,
        number: usize,
        size_bytes: usize,
        now: SimTime,
    ) -> Result<Vec<ServedKey>, KmsError> {
        let (mn, sn) = self.app_pair(master, slave)?;
        let st = &self.settings;
        if number == 0 || number > st.max_key_per_request {
            return Err(KmsError::BadKeyCount { number, max: st.max_key_per_request });
        }
        if size_bytes < st.min_key_size_bytes || size_bytes > st.max_key_size_bytes {
            return Err(KmsError::SizeOutOfBounds {
                size: size_bytes,
                min: st.min_key_size_bytes,
                max: st.max_key_size_bytes,
            });
        }
        let store = self.pair_store(&mn, &sn)?;
        let mut s = store.lock();
        self.sweep(&mut s, now);
        let available = s.buffered(KeyFilter::Any);
        if available < number * size_bytes {
            return Err(KmsError::InsufficientKey { requested: number * size_bytes, available });
        }
        let slave_side = s.side(&sn);
        let mut out = Vec::with_capacity(number);
        for _ in 0..number {
            let (bits, segments) = s.take(size_bytes, KeyFilter::Any).expect("availability checked");
            let key_id = self.fresh_id();
            s.stats.served_bytes += size_bytes as u64;
            s.stats.served_keys += 1;
            s.ends[slave_side].served.insert(
                key_id,
                store::ServedEntry {
                    bits: bits.clone(),
                    expires_at: now + self.ttl(),
                    master: mn.clone(),
                    slave_sae: Some(slave.clone()),
                },
            );
            self.audit.append(AuditRecord::Served {
                t: now,
                pair: s.pair.clone(),
                master: mn.clone(),
                slave: sn.clone(),
                key_id,
                bytes: size_bytes,
                interface: Interface::Etsi014,
                sae: Some(master.clone()),
                ksid: None,
                index: None,
                segments,
            });
            out.push(ServedKey { key_id, bits });
        }
        Ok(out)
    }

    /// Slave-side retrieval of keys issued to `master`. Every id must be
    /// valid or nothing is released; errors are reported per id.
    pub fn etsi14_get_keys_with_ids(
        &self,
        slave: &SaeId,
        master: &SaeId,
        key_ids: &[String],
        now: SimTime,
    ) -> Result<Vec<ServedKey>, KmsError> {
        let (sn, mn) = self.app_pair(slave, master)?;
        if key_ids.is_empty() || key_ids.len() > self.settings.max_key_per_request {
            return Err(KmsError::BadKeyCount { number: key_ids.len(), max: self.settings.max_key_per_request });
        }
        let store = self.pair_store(&sn, &mn)?;
        let mut s = store.lock();
        self.sweep(&mut s, now);
        let side = s.side(&sn);
        let end = &s.ends[side];
        let mut failures = Vec::new();
        let mut ok = Vec::new();
        for raw in key_ids {
            let fault = match KeyId::parse(raw) {
                None => Some(KeyIdFault::Unknown),
                Some(id) if ok.contains(&id) => Some(KeyIdFault::Consumed),
                Some(id) => match end.served.get(&id) {
                    Some(e) if e.master == mn && e.slave_sae.as_ref().is_none_or(|x| x == slave) => {
                        ok.push(id);
                        None
                    }
                    Some(_) => Some(KeyIdFault::Unknown),
                    None => Some(end.tombstones.get(&id).copied().unwrap_or(KeyIdFault::Unknown)),
                },
            };
            if let Some(reason) = fault {
                failures.push(KeyIdFailure { key_id: raw.clone(), reason });
            }
        }
        if !failures.is_empty() {
            return Err(KmsError::KeyIdErrors(failures));
        }
        let pair = s.pair.clone();
        let end = &mut s.ends[side];
        let mut out = Vec::with_capacity(ok.len());
        for id in ok {
            let e = end.served.remove(&id).expect("validated");
            end.tombstones.insert(id, KeyIdFault::Consumed);
            self.audit.append(AuditRecord::Retrieved { t: now, pair: pair.clone(), node: sn.clone(), key_id: id });
            out.push(ServedKey { key_id: id, bits: e.bits });
        }
        Ok(out)
    }

    // ---------------------------------------------------------------- forwarding hooks

    /// Consumes channel-produced key between two adjacent nodes for one relay
    /// hop. Both mirrored copies are consumed together.
    pub fn consume_link_key(
        &self,
        a: &NodeId,
        b: &NodeId,
        n: usize,
        vendor: Option<&str>,
    ) -> Result<(Vec<u8>, Vec<KeySegment>), KmsError> {
        let store = self.pair_store(a, b)?;
        let mut s = store.lock();
        let filter = KeyFilter::Channel(vendor);
        let available = s.buffered(filter);
        let (bits, segs) = s.take(n, filter).ok_or(KmsError::InsufficientKey { requested: n, available })?;
        s.stats.relay_consumed_bytes += n as u64;
        Ok((bits, segs))
    }

    /// Stores a relayed end-to-end key between `src` and `dst`.
    pub fn deposit(
        &self,
        src: &NodeId,
        dst: &NodeId,
        job_id: &JobId,
        bits: Vec<u8>,
        now: SimTime,
    ) -> Result<KeyId, KmsError> {
        let key_id = self.fresh_id();
        let bytes = bits.len();
        self.ingest(src, dst, key_id, bits, BlockSource::Relay { job_id: job_id.clone() }, now)?;
        self.audit.append(AuditRecord::Deposited {
            t: now,
            job_id: job_id.clone(),
            pair: NodePair::new(src, dst),
            key_id,
            bytes,
        });
        Ok(key_id)
    }

    /// Whether `bytes` sits in the store of any pair other than `except`.
    pub fn any_store_contains(&self, bytes: &[u8], except: Option<&NodePair>) -> bool {
        self.pairs.read().iter().any(|(p, s)| Some(p) != except && s.lock().contains_bytes(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ChannelId;
    use crate::topology::load_topology;

    pub(crate) const TWO: &str = r#"
[kms]
capacity_bytes = 1024
ttl_s = 10.0
[[nodes]]
id = "A"
domain = "X"
[[nodes]]
id = "B"
domain = "X"
[[nodes]]
id = "R"
domain = "X"
kms = false
"#;

    fn kms() -> Kms {
        Kms::new(&load_topology(TWO).unwrap(), Arc::new(AuditLog::new()))
    }

    fn src() -> BlockSource {
        BlockSource::Channel { channel_id: ChannelId::from("c"), vendor: "V".into() }
    }

    fn fill(k: &Kms, n: usize, seed: u8) -> KeyId {
        let id = KeyId(uuid::Uuid::from_u128(seed as u128 + 1));
        k.ingest(&"A".into(), &"B".into(), id, (0..n).map(|i| (i as u8) ^ seed).collect(), src(), SimTime(0)).unwrap();
        id
    }

    #[test]
    fn duplicate_ingest_is_integrity_fault() {
        let k = kms();
        let id = fill(&k, 8, 1);
        let r = k.ingest(&"A".into(), &"B".into(), id, vec![0; 8], src(), SimTime(0));
        assert_eq!(r, Err(KmsError::IntegrityFault(id)));
    }

    #[test]
    fn enc_then_dec_once() {
        let k = kms();
        fill(&k, 64, 7);
        let keys = k.etsi14_get_enc_keys(&"A".into(), &"B".into(), 2, 32, SimTime(0)).unwrap();
        assert_eq!(k.buffered(&"A".into(), &"B".into(), KeyFilter::Any), 0);
        let ids: Vec<String> = keys.iter().map(|k| k.key_id.to_string()).collect();
        let got = k.etsi14_get_keys_with_ids(&"B".into(), &"A".into(), &ids, SimTime(1)).unwrap();
        assert_eq!(got, keys);
        let again = k.etsi14_get_keys_with_ids(&"B".into(), &"A".into(), &ids[..1], SimTime(1)).unwrap_err();
        assert_eq!(
            again,
            KmsError::KeyIdErrors(vec![KeyIdFailure { key_id: ids[0].clone(), reason: KeyIdFault::Consumed }])
        );
    }

    #[test]
    fn enc_is_all_or_nothing() {
        let k = kms();
        fill(&k, 40, 3);
        let err = k.etsi14_get_enc_keys(&"A".into(), &"B".into(), 2, 32, SimTime(0)).unwrap_err();
        assert_eq!(err, KmsError::InsufficientKey { requested: 64, available: 40 });
        assert_eq!(k.buffered(&"A".into(), &"B".into(), KeyFilter::Any), 40);
    }

    #[test]
    fn served_ids_expire() {
        let k = kms();
        fill(&k, 32, 3);
        let keys = k.etsi14_get_enc_keys(&"A".into(), &"B".into(), 1, 32, SimTime(0)).unwrap();
        let id = keys[0].key_id.to_string();
        let err = k.etsi14_get_keys_with_ids(&"B".into(), &"A".into(), std::slice::from_ref(&id), SimTime(10_000_001)).unwrap_err();
        assert_eq!(err, KmsError::KeyIdErrors(vec![KeyIdFailure { key_id: id, reason: KeyIdFault::Expired }]));
    }

    #[test]
    fn relay_nodes_have_no_application_interface() {
        let k = kms();
        assert_eq!(
            k.etsi14_status(&"R".into(), &"A".into(), SimTime(0)),
            Err(KmsError::NotKmsNode("R".into()))
        );
        assert!(matches!(k.etsi14_status(&"A".into(), &"Z".into(), SimTime(0)), Err(KmsError::UnknownNode(_))));
    }

    #[test]
    fn capacity_evicts_oldest() {
        let k = kms();
        let first = fill(&k, 600, 1);
        fill(&k, 600, 2);
        let st = k.pair_stats(&"A".into(), &"B".into()).unwrap();
        assert_eq!((st.buffered_bytes, st.expired_bytes, st.evicted_blocks), (600, 600, 1));
        assert!(st.balanced());
        let view = k.pair_store(&"A".into(), &"B".into()).unwrap().lock().end_view(&"A".into());
        assert!(view.iter().all(|(id, _)| *id != first));
    }
}
