//! Fixtures and oracles shared by the integration test binaries.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use qkdnet_core::audit::{check_single_use, AuditLog, BlockSource};
use qkdnet_core::controller::{HopBinding, RoutePlan};
use qkdnet_core::forwarding::{xor_into, Forwarder, HopFrame, JobStatus, TransportJob};
use qkdnet_core::ids::{ChannelId, JobId, KeyId, NodeId};
use qkdnet_core::kms::Kms;
use qkdnet_core::network::Network;
use qkdnet_core::time::SimTime;
use qkdnet_core::topology::{load_topology, load_topology_file, Topology};

pub fn madqci_topology() -> Topology {
    load_topology_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/madqci.toml")).unwrap()
}

pub fn madqci() -> Network {
    Network::new(madqci_topology(), Arc::new(AuditLog::new()))
}

pub fn n(s: &str) -> NodeId {
    NodeId::from(s)
}

/// Six key-managing nodes N0..N5 in one domain. Links are irrelevant to the
/// key stores, so none are declared.
pub fn chain_topology() -> Topology {
    let mut text = String::from("[kms]\ncapacity_bytes = 268435456\n");
    for i in 0..6 {
        text.push_str(&format!("[[nodes]]\nid = \"N{i}\"\ndomain = \"X\"\n"));
    }
    load_topology(&text).unwrap()
}

pub fn chain_route(start: usize, hops: usize) -> RoutePlan {
    let nodes: Vec<NodeId> = (start..=start + hops).map(|i| NodeId::new(format!("N{i}"))).collect();
    RoutePlan {
        hops: nodes
            .windows(2)
            .map(|w| HopBinding {
                from: w[0].clone(),
                to: w[1].clone(),
                channels: vec![ChannelId::new(format!("ch-{}-{}", w[0], w[1]))],
                vendors: vec!["V".into()],
                rate_bps: 1e3,
            })
            .collect(),
        nodes,
        domains: vec!["X".into()],
        bottleneck_bps: 1e3,
        epoch: 0,
    }
}

#[derive(Debug, Default)]
pub struct RelayCampaign {
    pub jobs: usize,
    pub delivered: usize,
    /// Jobs where some frame, recovered value, delivery or deposit disagreed
    /// with the independent XOR replay.
    pub mismatches: Vec<String>,
    pub single_use_clean: bool,
    /// Simulated time the whole campaign took.
    pub sim_elapsed_s: f64,
}

/// Relays `jobs` random keys over 1 to 5 hops and replays each hop with an
/// independent copy of every link's key stream.
pub fn relay_campaign(jobs: usize, seed: u64) -> RelayCampaign {
    let topo = chain_topology();
    let audit = Arc::new(AuditLog::new());
    let kms = Arc::new(Kms::new(&topo, audit.clone()));
    let fwd = Forwarder::new(topo.settings.forwarding.clone(), kms.clone(), audit.clone());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // The oracle's own copy of the unread link key between N(i) and N(i+1).
    let mut streams: Vec<VecDeque<u8>> = vec![VecDeque::new(); 5];
    let mut consumed = [0u64; 5];
    let mut out = RelayCampaign { jobs, ..Default::default() };
    let mut now = SimTime(0);
    for j in 0..jobs {
        let hops = rng.random_range(1..=5usize);
        let start = rng.random_range(0..=5 - hops);
        let size = rng.random_range(16..=512usize);
        for (i, s) in streams.iter_mut().enumerate().skip(start).take(hops) {
            while s.len() < size {
                let mut bits = vec![0u8; 4096];
                rng.fill_bytes(&mut bits);
                s.extend(bits.iter().copied());
                let (a, b) = (NodeId::new(format!("N{i}")), NodeId::new(format!("N{}", i + 1)));
                let src = BlockSource::Channel { channel_id: ChannelId::new(format!("ch-{a}-{b}")), vendor: "V".into() };
                kms.ingest(&a, &b, KeyId::random(&mut rng), bits, src, now).unwrap();
            }
        }
        for c in consumed.iter_mut().skip(start).take(hops) {
            *c += size as u64;
        }
        let mut payload = vec![0u8; size];
        rng.fill_bytes(&mut payload);
        let route = chain_route(start, hops);
        let (src, dst) = (route.nodes[0].clone(), route.nodes[hops].clone());
        let mut job = TransportJob::new(JobId::new(format!("job-{j:06}")), payload.clone(), route, now);
        let o = fwd.relay_key(&mut job, &|_| true, false, now);
        now = o.finished_at;

        let mut bad = Vec::new();
        if o.status != JobStatus::Delivered || o.traces.len() != hops {
            bad.push(format!("status {:?}, {} hops done", o.status, o.traces.len()));
        }
        for (k, tr) in o.traces.iter().enumerate() {
            let pad: Vec<u8> = streams[start + k].drain(..size).collect();
            let mut expect = payload.clone();
            xor_into(&mut expect, &pad);
            match HopFrame::decode(&tr.frame) {
                Ok(f) if f.ciphertext == expect && f.hop as usize == k => {}
                Ok(_) => bad.push(format!("hop {k} ciphertext")),
                Err(e) => bad.push(format!("hop {k} frame: {e}")),
            }
            if tr.recovered != payload {
                bad.push(format!("hop {k} recovered"));
            }
        }
        if o.delivered.as_deref() != Some(&payload[..]) {
            bad.push("delivered value".into());
        }
        let deposited = o.delivered_key.and_then(|id| {
            let store = kms.pair_store(&src, &dst).ok()?;
            let view = store.lock().end_view(&dst);
            view.into_iter().find(|(k, _)| *k == id).map(|(_, b)| b)
        });
        if deposited.as_deref() != Some(&payload[..]) {
            bad.push("deposit".into());
        }
        if bad.is_empty() {
            out.delivered += 1;
        } else {
            out.mismatches.push(format!("job {j}: {}", bad.join(", ")));
        }
    }
    // Each hop spends exactly the payload length of link key, no more.
    for (i, &c) in consumed.iter().enumerate() {
        let (a, b) = (NodeId::new(format!("N{i}")), NodeId::new(format!("N{}", i + 1)));
        let spent = kms.pair_stats(&a, &b).map_or(0, |s| s.relay_consumed_bytes);
        if spent != c {
            out.mismatches.push(format!("link N{i}-N{}: consumed {spent}, expected {c}", i + 1));
        }
    }
    out.single_use_clean = check_single_use(&audit.records()).is_clean();
    out.sim_elapsed_s = now.as_secs_f64();
    out
}

/// Every byte of key material still held in any pair store, seen from both
/// ends.
pub fn stored_key_material(net: &Network) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for p in net.kms().pairs() {
        let store = net.kms().pair_store(&p.lo, &p.hi).unwrap();
        let s = store.lock();
        for node in [&p.lo, &p.hi] {
            out.extend(s.end_view(node).into_iter().map(|(_, b)| b));
        }
    }
    out
}

/// Offsets where a 16-byte window of some key shows up in `hay`, either as
/// raw bytes or as lowercase or uppercase hex. Indexes the haystack, so the
/// key list can be large.
pub fn key_windows_in(hay: &[u8], keys: &[Vec<u8>]) -> Vec<usize> {
    use std::collections::HashMap;
    const W: usize = 16;
    let mut index: HashMap<[u8; W], Vec<usize>> = HashMap::new();
    for (i, w) in hay.windows(W).enumerate() {
        index.entry(w.try_into().unwrap()).or_default().push(i);
    }
    let hexval = |c: u8| (c as char).to_digit(16).map(|d| d as u8);
    for (i, w) in hay.windows(2 * W).enumerate() {
        let decoded: Option<Vec<u8>> = w.chunks(2).map(|p| Some(hexval(p[0])? << 4 | hexval(p[1])?)).collect();
        if let Some(d) = decoded {
            index.entry(d.try_into().unwrap()).or_default().push(i);
        }
    }
    let mut hits: Vec<usize> =
        keys.iter().flat_map(|k| k.windows(W)).filter_map(|w| index.get(w)).flatten().copied().collect();
    hits.sort_unstable();
    hits.dedup();
    hits
}
