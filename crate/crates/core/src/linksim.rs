//! Established quantum channels simulated as calibrated key sources.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ids::{ChannelId, KeyId, ModuleId, NodeId, NodePair};
use crate::settings::SimulationSettings;
use crate::time::{SimDuration, SimTime};
use crate::topology::{Band, ChannelCandidate, RateProfile, Technology, Topology};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("stale candidate: computed at switch epoch {candidate:?}, current epoch {current}")]
    StaleCandidate { candidate: Option<u64>, current: u64 },
    #[error("channel not UP")]
    NotUp,
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("module {0} is already in use")]
    ModuleBusy(ModuleId),
    #[error("advance needs a positive time step")]
    BadStep,
}

/// Secret-key rate for `loss_db` on a profile. Log-linear between anchors,
/// flat below the first one, extending the last slope past the final anchor
/// and zero beyond the module's loss budget.
pub fn skr_at_loss(profile: &RateProfile, max_tolerated_loss_db: f64, loss_db: f64) -> f64 {
    let a = &profile.anchors;
    if loss_db > max_tolerated_loss_db + 1e-9 || a.is_empty() {
        return 0.0;
    }
    if loss_db <= a[0].loss_db {
        return a[0].skr_kbps;
    }
    if let Some(hit) = a.iter().find(|p| p.loss_db == loss_db) {
        return hit.skr_kbps;
    }
    let seg = match a.windows(2).position(|w| loss_db < w[1].loss_db) {
        Some(i) => i,
        None if a.len() == 1 => return a[0].skr_kbps,
        None => a.len() - 2,
    };
    let (p, q) = (&a[seg], &a[seg + 1]);
    let slope = (q.skr_kbps.ln() - p.skr_kbps.ln()) / (q.loss_db - p.loss_db);
    (p.skr_kbps.ln() + slope * (loss_db - p.loss_db)).exp()
}

impl Topology {
    /// Rate the emitter of `candidate` delivers at the candidate's path loss.
    pub fn candidate_skr(&self, c: &ChannelCandidate) -> f64 {
        let e = &self.modules[&c.emitter];
        let r = &self.modules[&c.receiver];
        let profile = &self.profiles[e.profile_for(&c.wavelength)];
        skr_at_loss(profile, e.max_tolerated_loss_db.min(r.max_tolerated_loss_db), c.loss_db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelState {
    Syncing,
    Up,
    Down,
}

/// Identified key material produced by a channel. Both ends of the channel
/// receive the same block.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBlock {
    pub key_id: KeyId,
    pub bits: Vec<u8>,
    pub channel_id: ChannelId,
    pub vendor: String,
    pub created_at: SimTime,
}

impl KeyBlock {
    pub fn size_bytes(&self) -> usize {
        self.bits.len()
    }
}

impl std::fmt::Debug for KeyBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyBlock")
            .field("key_id", &self.key_id)
            .field("size_bytes", &self.bits.len())
            .field("channel_id", &self.channel_id)
            .field("created_at", &self.created_at)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkHealth {
    pub channel_id: ChannelId,
    pub current_skr_kbps: f64,
    pub current_qber_pct: Option<f64>,
    pub window_start: SimTime,
    pub window_end: SimTime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantumChannel {
    pub channel_id: ChannelId,
    pub emitter: ModuleId,
    pub receiver: ModuleId,
    pub vendor: String,
    pub technology: Technology,
    pub path: Vec<crate::ids::LinkId>,
    pub nodes: Vec<NodeId>,
    pub band: Band,
    pub dwdm_channel: String,
    pub state: ChannelState,
    pub established_at: SimTime,
    pub up_at: SimTime,
    pub effective_loss_db: f64,
    pub nominal_skr_kbps: f64,
    pub nominal_qber_pct: Option<f64>,
    pub current_qber_pct: Option<f64>,
    pub down_reason: Option<String>,
    pub candidate: ChannelCandidate,
    #[serde(skip)]
    carry_bits: f64,
    #[serde(skip, default = "dead_rng")]
    rng: ChaCha20Rng,
}

fn dead_rng() -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(0)
}

impl QuantumChannel {
    pub fn pair(&self) -> NodePair {
        NodePair::new(self.nodes.first().expect("path"), self.nodes.last().expect("path"))
    }

    /// Seconds left before the channel comes UP, zero once it has.
    pub fn sync_remaining_s(&self, now: SimTime) -> f64 {
        match self.state {
            ChannelState::Syncing => self.up_at.saturating_sub(now).as_secs_f64(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Default)]
pub struct Advance {
    pub blocks: Vec<KeyBlock>,
    pub health: Option<LinkHealth>,
}

/// Registry of channels and their key generators.
#[derive(Debug)]
pub struct LinkSim {
    settings: SimulationSettings,
    channels: BTreeMap<ChannelId, QuantumChannel>,
    established: u64,
}

impl LinkSim {
    pub fn new(settings: SimulationSettings) -> Self {
        Self { settings, channels: BTreeMap::new(), established: 0 }
    }

    pub fn settings(&self) -> &SimulationSettings {
        &self.settings
    }

    /// Starts a channel in SYNCING. The candidate must come from the switch
    /// configuration that is current right now.
    pub fn establish_channel(
        &mut self,
        topo: &Topology,
        candidate: &ChannelCandidate,
        current_epoch: u64,
        now: SimTime,
    ) -> Result<ChannelId, LinkError> {
        if candidate.epoch != Some(current_epoch) {
            return Err(LinkError::StaleCandidate { candidate: candidate.epoch, current: current_epoch });
        }
        for m in [&candidate.emitter, &candidate.receiver] {
            if self.live().any(|c| &c.emitter == m || &c.receiver == m) {
                return Err(LinkError::ModuleBusy(m.clone()));
            }
        }
        self.established += 1;
        let n = self.established;
        let channel_id = ChannelId::new(format!("ch-{n:04}"));
        let mut rng = ChaCha20Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(n);
        let nominal_qber = topo.modules[&candidate.emitter].nominal_qber_pct;
        let up_at = now + SimDuration::from_secs_f64(self.settings.sync_delay_s);
        let ch = QuantumChannel {
            channel_id: channel_id.clone(),
            emitter: candidate.emitter.clone(),
            receiver: candidate.receiver.clone(),
            vendor: candidate.vendor.clone(),
            technology: candidate.technology,
            path: candidate.links.clone(),
            nodes: candidate.nodes.clone(),
            band: candidate.band,
            dwdm_channel: candidate.wavelength.clone(),
            state: if up_at <= now { ChannelState::Up } else { ChannelState::Syncing },
            established_at: now,
            up_at,
            effective_loss_db: topo.path_loss(&candidate.links, candidate.band).unwrap_or(candidate.loss_db),
            nominal_skr_kbps: topo.candidate_skr(candidate),
            nominal_qber_pct: nominal_qber,
            current_qber_pct: nominal_qber,
            down_reason: None,
            candidate: candidate.clone(),
            carry_bits: 0.0,
            rng,
        };
        self.channels.insert(channel_id.clone(), ch);
        Ok(channel_id)
    }

    /// Moves SYNCING channels whose delay has elapsed to UP. Returns them.
    pub fn poll_sync(&mut self, now: SimTime) -> Vec<ChannelId> {
        let mut up = Vec::new();
        for ch in self.channels.values_mut() {
            if ch.state == ChannelState::Syncing && now >= ch.up_at {
                ch.state = ChannelState::Up;
                up.push(ch.channel_id.clone());
            }
        }
        up
    }

    /// Moves one SYNCING channel to UP if its delay has elapsed.
    pub fn promote(&mut self, id: &ChannelId, now: SimTime) -> bool {
        match self.channels.get_mut(id) {
            Some(ch) if ch.state == ChannelState::Syncing && now >= ch.up_at => {
                ch.state = ChannelState::Up;
                true
            }
            _ => false,
        }
    }

    pub fn teardown(&mut self, id: &ChannelId, reason: &str) -> Result<(), LinkError> {
        let ch = self.channels.get_mut(id).ok_or_else(|| LinkError::UnknownChannel(id.clone()))?;
        if ch.state != ChannelState::Down {
            ch.state = ChannelState::Down;
            ch.down_reason = Some(reason.to_owned());
        }
        Ok(())
    }

    /// Runs an UP channel for `dt`, ending at `now`. Emits whole bytes only;
    /// the fractional remainder carries into the next step.
    pub fn advance(&mut self, id: &ChannelId, dt: SimDuration, now: SimTime) -> Result<Advance, LinkError> {
        let s = &self.settings;
        let ch = self.channels.get_mut(id).ok_or_else(|| LinkError::UnknownChannel(id.clone()))?;
        if ch.state != ChannelState::Up {
            return Err(LinkError::NotUp);
        }
        if dt.0 == 0 {
            return Err(LinkError::BadStep);
        }
        let dt_s = dt.as_secs_f64();
        let window_start = SimTime(now.0.saturating_sub(dt.0));

        if let (Some(q), Some(q0)) = (ch.current_qber_pct, ch.nominal_qber_pct) {
            let z: f64 = ch.rng.sample(StandardNormal);
            let next = q + s.qber_reversion * (q0 - q) * dt_s + s.qber_step_pct * dt_s.sqrt() * z;
            let next = next.clamp(0.0, 25.0);
            ch.current_qber_pct = Some(next);
            if next > s.qber_abort_pct {
                ch.state = ChannelState::Down;
                ch.down_reason = Some(format!("QBER {next:.2}% above abort threshold"));
                ch.carry_bits = 0.0;
                return Ok(Advance {
                    blocks: Vec::new(),
                    health: Some(LinkHealth {
                        channel_id: id.clone(),
                        current_skr_kbps: 0.0,
                        current_qber_pct: Some(next),
                        window_start,
                        window_end: now,
                    }),
                });
            }
        }

        let jitter = if s.jitter_sigma > 0.0 {
            let z: f64 = ch.rng.sample(StandardNormal);
            (s.jitter_sigma * z - s.jitter_sigma * s.jitter_sigma / 2.0).exp()
        } else {
            1.0
        };
        let rate = ch.nominal_skr_kbps * jitter;
        let bits = rate * 1000.0 * dt_s + ch.carry_bits;
        let bytes = (bits / 8.0).floor();
        ch.carry_bits = bits - bytes * 8.0;
        let mut remaining = bytes as usize;
        let mut blocks = Vec::new();
        while remaining > 0 {
            let n = remaining.min(s.block_size);
            remaining -= n;
            let key_id = KeyId::random(&mut ch.rng);
            let mut bits = vec![0u8; n];
            ch.rng.fill_bytes(&mut bits);
            blocks.push(KeyBlock { key_id, bits, channel_id: id.clone(), vendor: ch.vendor.clone(), created_at: now });
        }
        Ok(Advance {
            blocks,
            health: Some(LinkHealth {
                channel_id: id.clone(),
                current_skr_kbps: rate,
                current_qber_pct: ch.current_qber_pct,
                window_start,
                window_end: now,
            }),
        })
    }

    pub fn get(&self, id: &ChannelId) -> Option<&QuantumChannel> {
        self.channels.get(id)
    }

    pub fn channels(&self) -> impl Iterator<Item = &QuantumChannel> {
        self.channels.values()
    }

    /// Channels that are SYNCING or UP.
    pub fn live(&self) -> impl Iterator<Item = &QuantumChannel> {
        self.channels.values().filter(|c| c.state != ChannelState::Down)
    }

    pub fn up(&self) -> impl Iterator<Item = &QuantumChannel> {
        self.channels.values().filter(|c| c.state == ChannelState::Up)
    }

    /// Forces a QBER value, for fault injection.
    pub fn set_qber(&mut self, id: &ChannelId, qber_pct: f64) -> Result<(), LinkError> {
        let ch = self.channels.get_mut(id).ok_or_else(|| LinkError::UnknownChannel(id.clone()))?;
        ch.current_qber_pct = Some(qber_pct.clamp(0.0, 25.0));
        Ok(())
    }
}
