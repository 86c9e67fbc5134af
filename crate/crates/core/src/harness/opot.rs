//! Proof-of-transit style tagging: each packet pays a key fetch and a tag
//! computation on top of its network delay, and waits when no key is left.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::time::{EventQueue, SimTime};

use super::metrics::MetricRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpotParams {
    pub packets: usize,
    pub packet_rate_hz: f64,
    pub base_delay_ms: f64,
    /// Log-normal spread of the network delay.
    pub base_jitter: f64,
    pub fetch_delay_ms: f64,
    /// Relative half-width of the uniform spread of the fetch delay.
    pub fetch_jitter: f64,
    pub tag_cost_ms: f64,
    /// Keys consumed per packet, one per attested node.
    pub transit_nodes: u64,
    /// Key supply as a fraction of demand. Absent means buffers never empty.
    pub key_supply: Option<f64>,
    pub initial_keys: u64,
}

impl Default for OpotParams {
    fn default() -> Self {
        Self {
            packets: 10_000,
            packet_rate_hz: 100.0,
            base_delay_ms: 3.26,
            base_jitter: 0.05,
            fetch_delay_ms: 0.6,
            fetch_jitter: 0.2,
            tag_cost_ms: 2.0,
            transit_nodes: 3,
            key_supply: None,
            initial_keys: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OpotResult {
    /// (arrival time s, latency ms) per packet.
    pub untagged: Vec<(f64, f64)>,
    pub tagged: Vec<(f64, f64)>,
    pub fetch_ms: Vec<f64>,
    pub waits_ms: Vec<f64>,
    pub spikes: usize,
    /// Packet arrival instants in microseconds.
    pub packet_arrivals_us: Vec<u64>,
    /// Interval between key arrivals in microseconds, when throttled.
    pub key_period_us: Option<u64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl OpotResult {
    pub fn mean_untagged(&self) -> f64 {
        mean(self.untagged.iter().map(|p| p.1))
    }

    pub fn mean_tagged(&self) -> f64 {
        mean(self.tagged.iter().map(|p| p.1))
    }

    pub fn mean_fetch(&self) -> f64 {
        mean(self.fetch_ms.iter().copied())
    }

    pub fn ratio(&self) -> f64 {
        self.mean_tagged() / self.mean_untagged()
    }

    pub fn records(&self, experiment: &str) -> Vec<MetricRecord> {
        let mut out = Vec::with_capacity(self.untagged.len() * 2);
        for (u, t) in self.untagged.iter().zip(&self.tagged) {
            out.push(MetricRecord::new(experiment, u.0, "latency", u.1, "ms").tag("series", "untagged"));
            out.push(MetricRecord::new(experiment, t.0, "latency", t.1, "ms").tag("series", "tagged"));
        }
        out
    }
}

enum Ev {
    Packet(usize),
    Key,
}

/// Runs the packet stream on the event engine.
pub fn run_opot(p: &OpotParams, seed: u64) -> OpotResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = OpotResult::default();
    if p.packets == 0 {
        return out;
    }
    let gap = Exp::new(p.packet_rate_hz).expect("positive packet rate");
    let mut q = EventQueue::new();
    let mut t = 0u64;
    let mut base = Vec::with_capacity(p.packets);
    for i in 0..p.packets {
        t += ((rng.sample(gap) * 1e6).round() as u64).max(1);
        out.packet_arrivals_us.push(t);
        q.schedule(SimTime(t), Ev::Packet(i));
        let z: f64 = rng.sample(StandardNormal);
        base.push(p.base_delay_ms * (p.base_jitter * z - p.base_jitter * p.base_jitter / 2.0).exp());
        out.fetch_ms.push(p.fetch_delay_ms * (1.0 + p.fetch_jitter * rng.random_range(-1.0..=1.0)));
    }
    if let Some(frac) = p.key_supply {
        let keys_per_s = frac * p.packet_rate_hz * p.transit_nodes as f64;
        let period = (1e6 / keys_per_s).round() as u64;
        out.key_period_us = Some(period);
        // Keys keep arriving until the whole backlog can drain.
        let needed = (p.packets as u64 * p.transit_nodes).saturating_sub(p.initial_keys);
        let end = t.max(needed * period);
        let mut k = period;
        while k <= end {
            q.schedule(SimTime(k), Ev::Key);
            k += period;
        }
    }

    let mut stock = p.initial_keys;
    let mut waiting: VecDeque<usize> = VecDeque::new();
    let mut acquired = vec![0u64; p.packets];
    let throttled = p.key_supply.is_some();
    while let Some((now, ev)) = q.pop_due(SimTime(u64::MAX)) {
        match ev {
            Ev::Packet(i) => waiting.push_back(i),
            Ev::Key => stock += 1,
        }
        while let Some(&i) = waiting.front() {
            if throttled && stock < p.transit_nodes {
                break;
            }
            if throttled {
                stock -= p.transit_nodes;
            }
            acquired[i] = now.0;
            waiting.pop_front();
        }
    }
    for i in 0..p.packets {
        let at = out.packet_arrivals_us[i];
        let wait_ms = (acquired[i] - at) as f64 / 1000.0;
        if acquired[i] > at {
            out.spikes += 1;
        }
        let ts = at as f64 / 1e6;
        out.untagged.push((ts, base[i]));
        out.tagged.push((ts, base[i] + wait_ms + out.fetch_ms[i] + p.tag_cost_ms));
        out.waits_ms.push(wait_ms);
    }
    out
}
