//! Whole-network runtime: physical layer, key managers, agents and the
//! controller, stepped on one simulated clock. Control traffic between the
//! controller and agents goes through the binary frame codec.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::audit::AuditLog;
use crate::controller::agent::{Agent, Plant};
use crate::controller::southbound::{RelayStatus, Southbound};
use crate::controller::{
    AgentStatus, Controller, ControllerError, JournalEntry, ProvisionPolicy, RoutePlan, SwitchCommand,
};
use crate::forwarding::Forwarder;
use crate::ids::{ChannelId, JobId, KeyId, NodeId, NodePair, SaeId, Ksid};
use crate::kms::{KeyChunk, KeyFilter, Kms, KmsError, PairStats, Qos};
use crate::linksim::{ChannelState, LinkError, LinkSim};
use crate::settings::ForwardingMode;
use crate::time::{EventQueue, SimDuration, SimTime};
use crate::topology::{SwitchConfig, Topology};

#[derive(Debug, thiserror::Error)]
pub enum ProvisionError {
    #[error("degenerate endpoints: {0}")]
    DegenerateEndpoints(NodeId),
    #[error("route planning failed")]
    Route(#[source] ControllerError),
    #[error("job {job_id} failed: {reason}")]
    Relay { job_id: JobId, reason: String, resumable: bool },
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptSource {
    Relay,
    /// Served from key positioned ahead of time.
    Pool,
}

/// Outcome of a provisioning request. Ids and measurements only.
#[derive(Clone, Debug, Serialize)]
pub struct DeliveryReceipt {
    pub job_id: Option<JobId>,
    pub component_jobs: Vec<JobId>,
    pub source: ReceiptSource,
    pub status: RelayStatus,
    pub src: NodeId,
    pub dst: NodeId,
    pub size_bytes: usize,
    pub route: Option<RoutePlan>,
    pub key_id: Option<KeyId>,
    pub latency_s: f64,
    pub link_key_bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelSummary {
    pub channel_id: ChannelId,
    pub a: NodeId,
    pub b: NodeId,
    pub vendor: String,
    pub dwdm_channel: String,
    pub links: Vec<u16>,
    pub state: ChannelState,
    pub nominal_skr_kbps: f64,
    pub qber_pct: Option<f64>,
    pub down_reason: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairSummary {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(flatten)]
    pub stats: PairStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub t_s: f64,
    pub epoch: u64,
    pub channels: Vec<ChannelSummary>,
    pub pairs: Vec<PairSummary>,
    pub agents: BTreeMap<NodeId, AgentStatus>,
    pub jobs_delivered: usize,
    pub jobs_failed: usize,
    pub jobs_parked: usize,
    pub control_frames: u64,
    pub control_bytes: u64,
}

pub struct Network {
    topo: Arc<Topology>,
    now: SimTime,
    next_tick: SimTime,
    linksim: LinkSim,
    fabric: SwitchConfig,
    kms: Arc<Kms>,
    audit: Arc<AuditLog>,
    forwarder: Forwarder,
    controller: Controller,
    agents: BTreeMap<NodeId, Agent>,
    silenced: BTreeSet<NodeId>,
    retries: EventQueue<(NodeId, JobId)>,
    prepositioned: BTreeSet<NodePair>,
    inflight_preposition: BTreeMap<NodePair, JobId>,
    frames: u64,
    frame_bytes: u64,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network").field("now", &self.now).field("epoch", &self.fabric.epoch).finish()
    }
}

impl Network {
    /// Builds the network and brings it up at t = 0: agents register, and
    /// with auto-establish on, every feasible channel starts syncing.
    pub fn new(topo: Topology, audit: Arc<AuditLog>) -> Self {
        let topo = Arc::new(topo);
        let kms = Arc::new(Kms::new(&topo, audit.clone()));
        let forwarder = Forwarder::new(topo.settings.forwarding.clone(), kms.clone(), audit.clone());
        let agents = topo.nodes.keys().enumerate().map(|(i, n)| (n.clone(), Agent::new(&topo, n, i as u64))).collect();
        let mut net = Self {
            next_tick: SimTime::from_secs_f64(topo.settings.simulation.tick_s),
            now: SimTime(0),
            linksim: LinkSim::new(topo.settings.simulation.clone()),
            fabric: topo.initial_switch_config(),
            controller: Controller::new(topo.clone()),
            kms,
            audit,
            forwarder,
            agents,
            silenced: BTreeSet::new(),
            retries: EventQueue::new(),
            prepositioned: BTreeSet::new(),
            inflight_preposition: BTreeMap::new(),
            frames: 0,
            frame_bytes: 0,
            topo,
        };
        let regs: Vec<(NodeId, Southbound)> = net.agents.values().map(|a| (a.node().clone(), a.registration())).collect();
        net.deliver_up(regs);
        if net.topo.settings.controller.auto_establish {
            net.controller.auto_establish();
        }
        net.pump();
        net
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn kms(&self) -> &Arc<Kms> {
        &self.kms
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn linksim(&self) -> &LinkSim {
        &self.linksim
    }

    pub fn forwarder(&self) -> &Forwarder {
        &self.forwarder
    }

    /// Physical switch state as last applied by the agents.
    pub fn fabric(&self) -> &SwitchConfig {
        &self.fabric
    }

    pub fn agent(&self, node: &NodeId) -> Option<&Agent> {
        self.agents.get(node)
    }

    pub fn agent_mut(&mut self, node: &NodeId) -> Option<&mut Agent> {
        self.agents.get_mut(node)
    }

    fn transit(&mut self, msg: Southbound) -> Southbound {
        let frame = msg.to_frame().encode();
        self.frames += 1;
        self.frame_bytes += frame.len() as u64;
        let (frame, _) = crate::wire::Frame::decode(&frame).expect("own frames decode");
        Southbound::from_frame(&frame).expect("own messages decode")
    }

    fn deliver_up(&mut self, msgs: Vec<(NodeId, Southbound)>) {
        for (node, msg) in msgs {
            if self.silenced.contains(&node) {
                continue;
            }
            let msg = self.transit(msg);
            if let Southbound::RelayResult(r) = &msg {
                if r.status == RelayStatus::Parked {
                    let at = self.now + SimDuration::from_secs_f64(self.forwarder.settings().retry_initial_s);
                    self.retries.schedule(at, (node.clone(), r.job_id.clone()));
                } else {
                    self.inflight_preposition.retain(|_, j| j != &r.job_id);
                }
            }
            if let Err(e) = self.controller.handle(msg, self.now) {
                tracing::warn!(node = %node, error = %e, "controller rejected message");
            }
        }
    }

    /// Delivers controller orders and agent replies until both sides are idle.
    fn pump(&mut self) {
        loop {
            let orders = self.controller.drain_outbox();
            if orders.is_empty() {
                break;
            }
            let mut replies = Vec::new();
            for (node, msg) in orders {
                if self.silenced.contains(&node) {
                    tracing::warn!(node = %node, "order dropped, agent unreachable");
                    continue;
                }
                let msg = self.transit(msg);
                let Some(agent) = self.agents.get_mut(&node) else { continue };
                let mut plant = Plant {
                    topo: &self.topo,
                    linksim: &mut self.linksim,
                    fabric: &mut self.fabric,
                    kms: &self.kms,
                    forwarder: &self.forwarder,
                };
                replies.extend(agent.handle(msg, &mut plant, self.now).into_iter().map(|m| (node.clone(), m)));
            }
            self.deliver_up(replies);
        }
    }

    fn tick(&mut self, dt: SimDuration) {
        let mut up = Vec::new();
        for (node, agent) in &mut self.agents {
            let mut plant = Plant {
                topo: &self.topo,
                linksim: &mut self.linksim,
                fabric: &mut self.fabric,
                kms: &self.kms,
                forwarder: &self.forwarder,
            };
            up.extend(agent.tick(&mut plant, dt, self.now).into_iter().map(|m| (node.clone(), m)));
        }
        self.deliver_up(up);
        self.controller.check_liveness(self.now);
        self.top_up_pools();
        self.pump();
    }

    fn retry(&mut self, node: NodeId, job: JobId) {
        let Some(agent) = self.agents.get_mut(&node) else { return };
        let mut plant = Plant {
            topo: &self.topo,
            linksim: &mut self.linksim,
            fabric: &mut self.fabric,
            kms: &self.kms,
            forwarder: &self.forwarder,
        };
        match agent.retry(&job, &mut plant, self.now) {
            Some(report) => self.deliver_up(vec![(node, report)]),
            None => {
                let attempts = agent.parked().find(|(j, _)| **j == job).map_or(0, |(_, a)| a);
                let s = self.forwarder.settings();
                let backoff = (s.retry_initial_s * 2f64.powi(attempts as i32)).min(s.retry_cap_s);
                self.retries.schedule(self.now + SimDuration::from_secs_f64(backoff), (node, job));
            }
        }
    }

    /// Runs the clock forward to `t`, ticking every configured interval and
    /// serving parked-job retries in time order.
    pub fn run_until(&mut self, t: SimTime) {
        let dt = SimDuration::from_secs_f64(self.topo.settings.simulation.tick_s);
        loop {
            let next_retry = self.retries.peek_time();
            match next_retry {
                Some(r) if r < self.next_tick && r <= t => {
                    let (at, (node, job)) = self.retries.pop_due(r).expect("peeked");
                    self.now = self.now.max(at);
                    self.retry(node, job);
                }
                _ if self.next_tick <= t => {
                    self.now = self.next_tick;
                    self.tick(dt);
                    self.next_tick = self.next_tick + dt;
                }
                _ => break,
            }
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, secs: f64) {
        let t = self.now + SimDuration::from_secs_f64(secs);
        self.run_until(t);
    }

    // ---------------------------------------------------------------- control

    pub fn apply_switch(&mut self, mut cmd: SwitchCommand) -> JournalEntry {
        cmd.issued_at = self.now;
        let entry = self.controller.apply_switch_config(cmd, self.now);
        self.pump();
        let mut up = Vec::new();
        for (node, agent) in &mut self.agents {
            let mut plant = Plant {
                topo: &self.topo,
                linksim: &mut self.linksim,
                fabric: &mut self.fabric,
                kms: &self.kms,
                forwarder: &self.forwarder,
            };
            up.extend(agent.revalidate(&mut plant, self.now).into_iter().map(|m| (node.clone(), m)));
        }
        self.deliver_up(up);
        entry
    }

    pub fn compute_route(&self, src: &NodeId, dst: &NodeId, min_bps: f64) -> Result<RoutePlan, ControllerError> {
        self.controller.compute_route(src, dst, min_bps)
    }

    /// Cuts an agent off from the controller in both directions.
    pub fn silence(&mut self, node: &NodeId) {
        self.silenced.insert(node.clone());
    }

    pub fn resume(&mut self, node: &NodeId) {
        self.silenced.remove(node);
    }

    pub fn set_qber(&mut self, channel: &ChannelId, qber_pct: f64) -> Result<(), LinkError> {
        self.linksim.set_qber(channel, qber_pct)
    }

    /// Key relayed ahead of demand and waiting between the two nodes.
    pub fn pool_bytes(&self, a: &NodeId, b: &NodeId) -> usize {
        self.kms.buffered(a, b, KeyFilter::Any) - self.kms.buffered(a, b, KeyFilter::Channel(None))
    }

    /// Keeps a relayed key pool between `a` and `b` filled in prepositioned
    /// forwarding mode.
    pub fn preposition(&mut self, a: &NodeId, b: &NodeId) {
        self.prepositioned.insert(NodePair::new(a, b));
    }

    fn top_up_pools(&mut self) {
        if self.forwarder.settings().mode != ForwardingMode::Prepositioned {
            return;
        }
        let target = self.forwarder.settings().preposition_bytes;
        let pairs: Vec<NodePair> = self.prepositioned.iter().cloned().collect();
        for p in pairs {
            if self.inflight_preposition.contains_key(&p) {
                continue;
            }
            let have = self.pool_bytes(&p.lo, &p.hi);
            if have >= target {
                continue;
            }
            let n = (target - have).min(self.topo.settings.simulation.block_size);
            match self.controller.provision(&p.lo, &p.hi, n, ProvisionPolicy::Plain, self.now) {
                Ok(job) => {
                    self.inflight_preposition.insert(p, job);
                }
                Err(e) => tracing::debug!(pair = ?p, error = %e, "pool top-up skipped"),
            }
        }
    }

    /// Delivers a fresh end-to-end key of `size_bytes` between two nodes.
    pub fn provision(
        &mut self,
        src: &NodeId,
        dst: &NodeId,
        size_bytes: usize,
        policy: ProvisionPolicy,
    ) -> Result<DeliveryReceipt, ProvisionError> {
        if src == dst {
            return Err(ProvisionError::DegenerateEndpoints(src.clone()));
        }
        if self.forwarder.settings().mode == ForwardingMode::Prepositioned
            && policy == ProvisionPolicy::Plain
            && self.pool_bytes(src, dst) >= size_bytes
        {
            return Ok(DeliveryReceipt {
                job_id: None,
                component_jobs: Vec::new(),
                source: ReceiptSource::Pool,
                status: RelayStatus::Delivered,
                src: src.clone(),
                dst: dst.clone(),
                size_bytes,
                route: None,
                key_id: None,
                latency_s: 0.0,
                link_key_bytes: 0,
            });
        }
        let job_id = self.controller.provision(src, dst, size_bytes, policy, self.now).map_err(ProvisionError::Route)?;
        self.pump();
        let rec = self.controller.job(&job_id).expect("job just issued");
        let report = rec.report.clone();
        if rec.status == RelayStatus::Failed {
            let f = report.and_then(|r| r.failure);
            return Err(ProvisionError::Relay {
                job_id,
                reason: f.as_ref().map_or_else(|| "unknown".into(), |f| f.reason.clone()),
                resumable: f.is_some_and(|f| f.resumable),
            });
        }
        Ok(DeliveryReceipt {
            job_id: Some(job_id),
            component_jobs: report.as_ref().map(|r| r.component_jobs.clone()).unwrap_or_default(),
            source: ReceiptSource::Relay,
            status: rec.status.clone(),
            src: src.clone(),
            dst: dst.clone(),
            size_bytes,
            route: Some(rec.route.clone()),
            key_id: report.as_ref().and_then(|r| r.key_id),
            latency_s: report.as_ref().map_or(0.0, |r| r.latency_s),
            link_key_bytes: report.as_ref().map_or(0, |r| r.link_key_bytes),
        })
    }

    // ---------------------------------------------------------------- sessions

    pub fn open_session(&mut self, src: &SaeId, dst: &SaeId, qos: Qos) -> Result<Ksid, KmsError> {
        self.kms.open_connect(src, dst, qos, &self.controller, self.now)
    }

    pub fn get_key(&mut self, ksid: &Ksid, caller: &SaeId, index: Option<u64>) -> Result<KeyChunk, KmsError> {
        self.kms.get_key(ksid, caller, index, self.now)
    }

    pub fn close_session(&mut self, ksid: &Ksid) -> Result<(), KmsError> {
        self.kms.close(ksid, &self.controller, self.now)
    }

    // ---------------------------------------------------------------- views

    pub fn snapshot(&self) -> Snapshot {
        let channels = self
            .linksim
            .channels()
            .map(|c| ChannelSummary {
                channel_id: c.channel_id.clone(),
                a: c.nodes[0].clone(),
                b: c.nodes.last().expect("nodes").clone(),
                vendor: c.vendor.clone(),
                dwdm_channel: c.dwdm_channel.clone(),
                links: c.path.iter().map(|l| l.0).collect(),
                state: c.state,
                nominal_skr_kbps: c.nominal_skr_kbps,
                qber_pct: c.current_qber_pct,
                down_reason: c.down_reason.clone(),
            })
            .collect();
        let pairs = self
            .kms
            .all_stats()
            .into_iter()
            .map(|(p, stats)| PairSummary { a: p.lo, b: p.hi, stats })
            .collect();
        let count = |s: RelayStatus| self.controller.jobs().filter(|j| j.status == s).count();
        Snapshot {
            t_s: self.now.as_secs_f64(),
            epoch: self.controller.switch_config().epoch,
            channels,
            pairs,
            agents: self.controller.registrations().iter().map(|(k, r)| (k.clone(), r.status)).collect(),
            jobs_delivered: count(RelayStatus::Delivered),
            jobs_failed: count(RelayStatus::Failed),
            jobs_parked: count(RelayStatus::Parked),
            control_frames: self.frames,
            control_bytes: self.frame_bytes,
        }
    }

    /// Channels per vendor that are UP right now.
    pub fn up_by_vendor(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for c in self.linksim.up() {
            *m.entry(c.vendor.clone()).or_insert(0) += 1;
        }
        m
    }

    #[doc(hidden)]
    pub fn pending_retries(&self) -> usize {
        self.retries.len()
    }
}

#[allow(dead_code)]
fn _assert_send() {
    fn is_send<T: Send>() {}
    is_send::<Network>();
}
