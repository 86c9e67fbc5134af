use std::sync::Arc;

use parking_lot::Mutex;
use qkdnet_core::harness::entropy::EntropyService;
use qkdnet_core::harness::{MetricRecord, MetricStore};
use qkdnet_core::network::Network;
use qkdnet_core::time::SimTime;

/// Metric series the service records about the running network.
pub const NETWORK_SERIES: &str = "network";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClockMode {
    /// Time moves only when a client advances it.
    Simulated,
    /// Time follows the wall clock, scaled by a speed factor.
    LiveClock,
}

pub struct Inner {
    pub net: Network,
    pub metrics: MetricStore,
    next_sample: SimTime,
    sample_every: SimTime,
}

#[derive(Clone)]
pub struct AppState {
    pub inner: Arc<Mutex<Inner>>,
    pub entropy: Arc<EntropyService>,
    pub mode: ClockMode,
}

impl AppState {
    pub fn new(net: Network, entropy: EntropyService, mode: ClockMode, sample_interval_s: f64) -> Self {
        let every = SimTime::from_secs_f64(sample_interval_s.max(0.001));
        let first = SimTime(net.now().0.div_ceil(every.0) * every.0);
        let inner = Inner { net, metrics: MetricStore::new(), next_sample: first, sample_every: every };
        let s = Self { inner: Arc::new(Mutex::new(inner)), entropy: Arc::new(entropy), mode };
        s.inner.lock().sample();
        s
    }

    /// Runs the network to `t`, sampling metrics on the way.
    pub fn advance_to(&self, t: SimTime) {
        let mut g = self.inner.lock();
        while g.next_sample <= t {
            let at = g.next_sample;
            g.net.run_until(at);
            g.sample();
        }
        g.net.run_until(t);
    }

    pub fn now(&self) -> SimTime {
        self.inner.lock().net.now()
    }
}

impl Inner {
    fn sample(&mut self) {
        let now = self.net.now();
        if now < self.next_sample {
            return;
        }
        let ts = now.as_secs_f64();
        let mut recs = Vec::new();
        for c in self.net.controller().channels().values() {
            let v = c.last_skr_kbps.unwrap_or(0.0);
            recs.push(MetricRecord::new(NETWORK_SERIES, ts, "skr", v, "kbps").tag("channel", c.channel_id.as_str()));
        }
        for (p, s) in self.net.kms().all_stats() {
            recs.push(
                MetricRecord::new(NETWORK_SERIES, ts, "buffered", s.buffered_bytes as f64, "bytes")
                    .tag("pair", format!("{}-{}", p.lo, p.hi)),
            );
        }
        for r in recs {
            // Timestamps only move forward here.
            let _ = self.metrics.push(r);
        }
        self.next_sample = SimTime(now.0 - now.0 % self.sample_every.0 + self.sample_every.0);
    }
}
