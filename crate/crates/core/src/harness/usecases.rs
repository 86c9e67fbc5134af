//! Workloads that run on a whole simulated network: an encrypted stream fed
//! by fresh keys, combined-source deliveries, and credential-gated key access.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::southbound::RelayStatus;
use crate::controller::ProvisionPolicy;
use crate::ids::{NodeId, SaeId};
use crate::kms::{KmsError, Qos};
use crate::network::Network;

use super::metrics::MetricRecord;

// ---------------------------------------------------------------- stream

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamParams {
    pub master: SaeId,
    pub slave: SaeId,
    pub target_mbps: f64,
    /// Payload bytes protected by one key before rekeying.
    pub rekey_bytes: f64,
    pub key_size_bytes: usize,
    pub duration_s: f64,
    pub step_s: f64,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            master: SaeId::from("Quevedo"),
            slave: SaeId::from("Norte"),
            target_mbps: 500.0,
            rekey_bytes: 1e9,
            key_size_bytes: 32,
            duration_s: 600.0,
            step_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StreamSummary {
    pub sent_bytes: f64,
    pub achieved_mbps: f64,
    pub keys_used: u64,
    pub stalled_steps: u64,
    pub steps: u64,
}

/// Encrypts a constant-rate stream, pulling one key per `rekey_bytes`. A
/// step without key stalls the stream until the next step.
pub fn run_stream(net: &mut Network, p: &StreamParams, experiment: &str, out: &mut Vec<MetricRecord>) -> StreamSummary {
    let mut s = StreamSummary::default();
    let start = net.now().as_secs_f64();
    // Bytes the current key may still protect.
    let mut cover = 0.0;
    let steps = (p.duration_s / p.step_s).round() as u64;
    for _ in 0..steps {
        net.run_for(p.step_s);
        s.steps += 1;
        let want = p.target_mbps * 1e6 / 8.0 * p.step_s;
        if cover < want {
            let keys = ((want - cover) / p.rekey_bytes).ceil() as usize;
            let kms = net.kms().clone();
            let now = net.now();
            match kms.etsi14_get_enc_keys(&p.master, &p.slave, keys, p.key_size_bytes, now) {
                Ok(ks) => {
                    let ids: Vec<String> = ks.iter().map(|k| k.key_id.to_string()).collect();
                    let _ = kms.etsi14_get_keys_with_ids(&p.slave, &p.master, &ids, now);
                    s.keys_used += ks.len() as u64;
                    cover += ks.len() as f64 * p.rekey_bytes;
                }
                Err(_) => s.stalled_steps += 1,
            }
        }
        let sent = want.min(cover);
        cover -= sent;
        s.sent_bytes += sent;
        let t = net.now().as_secs_f64() - start;
        out.push(MetricRecord::new(experiment, t, "throughput", sent * 8.0 / 1e6 / p.step_s, "Mbps"));
    }
    s.achieved_mbps = s.sent_bytes * 8.0 / 1e6 / p.duration_s;
    s
}

// ---------------------------------------------------------------- combined sources

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndependentParams {
    pub src: NodeId,
    pub dst: NodeId,
    pub requests: usize,
    pub interval_s: f64,
    pub size_bytes: usize,
    pub warmup_s: f64,
}

impl Default for IndependentParams {
    fn default() -> Self {
        Self {
            src: NodeId::from("Quevedo"),
            dst: NodeId::from("Norte"),
            requests: 50,
            interval_s: 10.0,
            size_bytes: 32,
            warmup_s: 300.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IndependentSummary {
    pub plain_delivered: usize,
    pub combined_delivered: usize,
    pub failed: usize,
    pub mean_plain_ms: f64,
    pub mean_combined_ms: f64,
}

/// Alternates plain and combined deliveries between the same endpoints and
/// compares their latency.
pub fn run_independent(
    net: &mut Network,
    p: &IndependentParams,
    experiment: &str,
    out: &mut Vec<MetricRecord>,
) -> IndependentSummary {
    net.run_for(p.warmup_s);
    let start = net.now().as_secs_f64();
    let (mut plain, mut comb) = (Vec::new(), Vec::new());
    let mut s = IndependentSummary::default();
    for _ in 0..p.requests {
        for (policy, series) in [(ProvisionPolicy::Plain, "plain"), (ProvisionPolicy::IndependentSources, "combined")] {
            match net.provision(&p.src, &p.dst, p.size_bytes, policy) {
                Ok(r) if r.status == RelayStatus::Delivered => {
                    let ms = r.latency_s * 1000.0;
                    out.push(
                        MetricRecord::new(experiment, net.now().as_secs_f64() - start, "delivery_latency", ms, "ms")
                            .tag("series", series),
                    );
                    if series == "plain" {
                        plain.push(ms)
                    } else {
                        comb.push(ms)
                    }
                }
                _ => s.failed += 1,
            }
        }
        net.run_for(p.interval_s);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    s.plain_delivered = plain.len();
    s.combined_delivered = comb.len();
    s.mean_plain_ms = mean(&plain);
    s.mean_combined_ms = mean(&comb);
    s
}

// ---------------------------------------------------------------- key as a service

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GateError {
    #[error("unknown client {0}")]
    UnknownClient(String),
    #[error("credential rejected for {0}")]
    BadCredential(String),
    #[error(transparent)]
    Kms(#[from] KmsError),
}

/// Clients without their own QKD equipment reach a node's session interface
/// only with a master key shared with that node beforehand.
#[derive(Clone, Debug, Default)]
pub struct KaasGate {
    clients: BTreeMap<String, (SaeId, [u8; 32])>,
}

fn digest(secret: &[u8]) -> [u8; 32] {
    Sha256::digest(secret).into()
}

impl KaasGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enroll(&mut self, client: &str, sae: SaeId, master_key: &[u8]) {
        self.clients.insert(client.to_owned(), (sae, digest(master_key)));
    }

    pub fn authorize(&self, client: &str, master_key: &[u8]) -> Result<&SaeId, GateError> {
        let (sae, d) = self.clients.get(client).ok_or_else(|| GateError::UnknownClient(client.into()))?;
        let given = digest(master_key);
        // Compare every byte regardless of where the first difference is.
        let diff = d.iter().zip(given.iter()).fold(0u8, |acc, (a, b)| acc | (a ^ b));
        if diff != 0 {
            return Err(GateError::BadCredential(client.into()));
        }
        Ok(sae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KaasParams {
    /// Node each client attaches to, in client order.
    pub nodes: Vec<NodeId>,
    pub peer: NodeId,
    pub clients: usize,
    /// Every n-th client presents a wrong master key.
    pub bad_every: usize,
    pub chunks_per_client: usize,
    pub chunk_bytes: usize,
    pub max_bps: f64,
    pub warmup_s: f64,
}

impl Default for KaasParams {
    fn default() -> Self {
        Self {
            nodes: vec![NodeId::from("Quintin"), NodeId::from("Quijote"), NodeId::from("Quevedo")],
            peer: NodeId::from("Quijote"),
            clients: 12,
            bad_every: 4,
            chunks_per_client: 2,
            chunk_bytes: 32,
            max_bps: 64.0,
            warmup_s: 600.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct KaasSummary {
    pub authorized: usize,
    pub refused: usize,
    pub sessions: usize,
    pub chunks: usize,
    pub errors: BTreeMap<String, usize>,
}

pub fn run_kaas(net: &mut Network, p: &KaasParams, experiment: &str, out: &mut Vec<MetricRecord>) -> KaasSummary {
    net.run_for(p.warmup_s);
    let mut gate = KaasGate::new();
    let mut s = KaasSummary::default();
    for i in 0..p.clients {
        let node = &p.nodes[i % p.nodes.len()];
        let name = format!("client-{i:03}");
        let secret = format!("master-key-{i}");
        gate.enroll(&name, SaeId::new(node.as_str()), secret.as_bytes());
        let presented = if p.bad_every > 0 && (i + 1) % p.bad_every == 0 { "wrong".to_string() } else { secret };
        let sae = match gate.authorize(&name, presented.as_bytes()) {
            Ok(sae) => {
                s.authorized += 1;
                sae.clone()
            }
            Err(_) => {
                s.refused += 1;
                continue;
            }
        };
        let peer_node = if node == &p.peer { p.nodes.iter().find(|n| *n != node).unwrap_or(node) } else { &p.peer };
        let peer = SaeId::new(peer_node.as_str());
        let qos = Qos { key_chunk_size_bytes: p.chunk_bytes, max_bps: p.max_bps, ttl_s: 600.0 };
        let pace = p.chunk_bytes as f64 * 8.0 / p.max_bps;
        match net.open_session(&sae, &peer, qos) {
            Ok(ksid) => {
                s.sessions += 1;
                for _ in 0..p.chunks_per_client {
                    net.run_for(pace);
                    let a = net.get_key(&ksid, &sae, None);
                    let b = a.as_ref().ok().map(|c| net.get_key(&ksid, &peer, Some(c.index)));
                    match (a, b) {
                        (Ok(x), Some(Ok(y))) if x.bits == y.bits => s.chunks += 1,
                        (Err(e), _) | (_, Some(Err(e))) => *s.errors.entry(kind(&e)).or_insert(0) += 1,
                        _ => *s.errors.entry("mismatch".into()).or_insert(0) += 1,
                    }
                }
                let _ = net.close_session(&ksid);
            }
            Err(e) => *s.errors.entry(kind(&e)).or_insert(0) += 1,
        }
        out.push(MetricRecord::new(experiment, net.now().as_secs_f64(), "kaas_chunks", s.chunks as f64, "count").tag("client", name));
        net.run_for(1.0);
    }
    s
}

/// Variant name of an error, without its payload.
fn kind(e: &KmsError) -> String {
    let d = format!("{e:?}");
    d.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_owned()
}
