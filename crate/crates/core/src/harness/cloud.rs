//! Key-request load from many clients against one node pair's key store.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Barrier};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::audit::BlockSource;
use crate::ids::{ChannelId, KeyId, SaeId};
use crate::kms::{Kms, KmsError};
use crate::time::{EventQueue, SimDuration, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudParams {
    pub master: SaeId,
    pub slave: SaeId,
    pub clients: usize,
    pub rate_per_client_hz: f64,
    pub duration_s: f64,
    /// Deterministic service time per request at the key manager.
    pub service_ms: f64,
    pub keys_per_request: usize,
    pub key_size_bytes: usize,
    /// Key supply into the pair, in bytes per second.
    pub supply_bytes_per_s: f64,
    pub supply_interval_s: f64,
    pub initial_bytes: usize,
}

impl Default for CloudParams {
    fn default() -> Self {
        Self {
            master: SaeId::from("A"),
            slave: SaeId::from("B"),
            clients: 1,
            rate_per_client_hz: 1.0,
            duration_s: 60.0,
            service_ms: 0.5,
            keys_per_request: 1,
            key_size_bytes: 32,
            supply_bytes_per_s: 4096.0,
            supply_interval_s: 0.1,
            initial_bytes: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CloudSummary {
    pub clients: usize,
    pub issued: u64,
    pub served: u64,
    pub rejected: BTreeMap<String, u64>,
    pub in_flight: u64,
    pub duration_s: f64,
    pub throughput_rps: f64,
    pub supplied_bytes: u64,
    pub duplicate_key_ids: usize,
    /// Keys whose slave-side copy differed from the master-side one.
    pub mismatched: u64,
}

impl CloudSummary {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn conserved(&self) -> bool {
        self.served + self.rejected_total() + self.in_flight == self.issued
    }
}

fn reason(e: &KmsError) -> String {
    match e {
        KmsError::InsufficientKey { .. } => "insufficient_key".into(),
        KmsError::KeyIdErrors(_) => "key_id".into(),
        other => format!("{other:?}").split(['(', ' ', '{']).next().unwrap_or("other").to_lowercase(),
    }
}

enum Ev {
    Request,
    Done,
    Supply,
}

/// Simulated load: Poisson clients feeding one deterministic server that
/// fetches keys for the master and then for the slave.
pub fn run_cloud_load(kms: &Kms, p: &CloudParams, seed: u64) -> Result<CloudSummary, KmsError> {
    let owner = kms.app_node(&p.master)?;
    let peer = kms.app_node(&p.slave)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let end = SimTime::from_secs_f64(p.duration_s);
    let mut q = EventQueue::new();
    let mut s = CloudSummary { clients: p.clients, duration_s: p.duration_s, ..Default::default() };
    let supply_source = BlockSource::Channel { channel_id: ChannelId::from("cloud-supply"), vendor: "sim".into() };
    let ingest = |n: usize, now: SimTime, rng: &mut ChaCha20Rng| -> Result<(), KmsError> {
        if n == 0 {
            return Ok(());
        }
        let mut bits = vec![0u8; n];
        rng.fill_bytes(&mut bits);
        kms.ingest(&owner, &peer, KeyId::random(rng), bits, supply_source.clone(), now)?;
        Ok(())
    };
    ingest(p.initial_bytes, SimTime(0), &mut rng)?;

    if p.clients > 0 && p.rate_per_client_hz > 0.0 {
        let gap = Exp::new(p.rate_per_client_hz * p.clients as f64).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += rng.sample(gap);
            let at = SimTime::from_secs_f64(t);
            if at >= end {
                break;
            }
            q.schedule(at, Ev::Request);
        }
    }
    let step = SimDuration::from_secs_f64(p.supply_interval_s);
    let mut k = SimTime(step.0);
    while k <= end {
        q.schedule(k, Ev::Supply);
        k = k + step;
    }

    let service = SimDuration::from_secs_f64(p.service_ms / 1000.0);
    let mut carry = 0.0;
    let mut waiting: VecDeque<SimTime> = VecDeque::new();
    let mut busy = false;
    let mut seen = BTreeSet::new();
    while let Some((now, ev)) = q.pop_due(end) {
        match ev {
            Ev::Supply => {
                let bytes = p.supply_bytes_per_s * p.supply_interval_s + carry;
                let whole = bytes.floor();
                carry = bytes - whole;
                ingest(whole as usize, now, &mut rng)?;
                s.supplied_bytes += whole as u64;
            }
            Ev::Request => {
                s.issued += 1;
                waiting.push_back(now);
            }
            Ev::Done => busy = false,
        }
        if !busy
            && waiting.pop_front().is_some() {
                busy = true;
                match kms.etsi14_get_enc_keys(&p.master, &p.slave, p.keys_per_request, p.key_size_bytes, now) {
                    Ok(keys) => {
                        let ids: Vec<String> = keys.iter().map(|k| k.key_id.to_string()).collect();
                        match kms.etsi14_get_keys_with_ids(&p.slave, &p.master, &ids, now) {
                            Ok(got) if got == keys => {}
                            _ => s.mismatched += 1,
                        }
                        for k in &keys {
                            if !seen.insert(k.key_id) {
                                s.duplicate_key_ids += 1;
                            }
                        }
                        s.served += 1;
                    }
                    Err(e) => *s.rejected.entry(reason(&e)).or_insert(0) += 1,
                }
                q.schedule(now + service, Ev::Done);
            }
    }
    // A request in service at the horizon has already been counted.
    s.in_flight = waiting.len() as u64;
    s.throughput_rps = s.served as f64 / p.duration_s;
    Ok(s)
}

/// Real threads hammering the same pair at once. Returns every key id each
/// thread received.
pub fn hammer(kms: Arc<Kms>, master: SaeId, slave: SaeId, threads: usize, requests: usize, now: SimTime) -> Vec<Vec<KeyId>> {
    let barrier = Arc::new(Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let (kms, barrier, master, slave) = (kms.clone(), barrier.clone(), master.clone(), slave.clone());
            std::thread::spawn(move || {
                barrier.wait();
                let mut got = Vec::new();
                for _ in 0..requests {
                    if let Ok(keys) = kms.etsi14_get_enc_keys(&master, &slave, 1, 32, now) {
                        got.extend(keys.into_iter().map(|k| k.key_id));
                    }
                }
                got
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().expect("client thread")).collect()
}
