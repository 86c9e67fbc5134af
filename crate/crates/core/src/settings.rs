//! Tunables read from the network description file. Every field has a
//! default so a minimal file only needs nodes, links and modules.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Settings {
    pub network: NetworkSettings,
    pub simulation: SimulationSettings,
    pub kms: KmsSettings,
    pub forwarding: ForwardingSettings,
    pub controller: ControllerSettings,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub name: String,
    /// Loss added for every switch a signal crosses between two fibers.
    pub switch_insertion_loss_db: f64,
    pub min_loss_db: f64,
    pub max_loss_db: f64,
    /// Applied when a link omits its O-band loss.
    pub o_band_factor: f64,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            name: "network".into(),
            switch_insertion_loss_db: 1.0,
            min_loss_db: 0.0,
            max_loss_db: 40.0,
            o_band_factor: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub seed: u64,
    /// Sigma of the mean-preserving lognormal rate jitter. Zero disables it.
    pub jitter_sigma: f64,
    pub sync_delay_s: f64,
    pub qber_abort_pct: f64,
    /// Pull of the QBER walk toward its nominal value, per second.
    pub qber_reversion: f64,
    /// Step deviation of the QBER walk, in percentage points per sqrt(second).
    pub qber_step_pct: f64,
    pub block_size: usize,
    pub tick_s: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            jitter_sigma: 0.1,
            sync_delay_s: 60.0,
            qber_abort_pct: 11.0,
            qber_reversion: 0.05,
            qber_step_pct: 0.1,
            block_size: 256,
            tick_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmsSettings {
    /// Upper bound on buffered bytes per peer pair.
    pub capacity_bytes: usize,
    pub ttl_s: f64,
    pub default_key_size_bytes: usize,
    pub min_key_size_bytes: usize,
    pub max_key_size_bytes: usize,
    pub max_key_per_request: usize,
    /// Share of the estimated deliverable rate a single session may claim.
    pub admission_fraction: f64,
}

impl Default for KmsSettings {
    fn default() -> Self {
        Self {
            capacity_bytes: 4 << 20,
            ttl_s: 3600.0,
            default_key_size_bytes: 32,
            min_key_size_bytes: 8,
            max_key_size_bytes: 1024,
            max_key_per_request: 128,
            admission_fraction: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardingMode {
    /// Relay each end-to-end key when it is requested.
    OnDemand,
    /// Keep a pool of relayed keys topped up ahead of demand.
    Prepositioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    Fail,
    Park,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardingSettings {
    pub per_hop_delay_ms: f64,
    pub combine_cost_ms: f64,
    pub mode: ForwardingMode,
    pub on_exhaustion: ExhaustionPolicy,
    pub retry_initial_s: f64,
    pub retry_cap_s: f64,
    pub retry_deadline_s: f64,
    /// Target pool size per pair in prepositioned mode.
    pub preposition_bytes: usize,
}

impl Default for ForwardingSettings {
    fn default() -> Self {
        Self {
            per_hop_delay_ms: 0.5,
            combine_cost_ms: 1.0,
            mode: ForwardingMode::OnDemand,
            on_exhaustion: ExhaustionPolicy::Fail,
            retry_initial_s: 0.1,
            retry_cap_s: 5.0,
            retry_deadline_s: 30.0,
            preposition_bytes: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    pub heartbeat_interval_s: f64,
    pub missed_heartbeats: u32,
    pub rate_window_s: f64,
    /// Establish channels on idle modules after every switch change.
    pub auto_establish: bool,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self { heartbeat_interval_s: 5.0, missed_heartbeats: 3, rate_window_s: 300.0, auto_establish: true }
    }
}
