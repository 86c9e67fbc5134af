//! Logically centralized control plane. It sees capabilities, channel states,
//! rates and job outcomes reported by node agents, and never key material.

pub mod agent;
pub mod routing;
pub mod southbound;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::ids::{ChannelId, JobId, KeyId, ModuleId, NodeId, NodePair, PortId, SwitchId};
use crate::kms::RouteOracle;
use crate::linksim::ChannelState;
use crate::settings::ControllerSettings;
use crate::time::{SimDuration, SimTime};
use crate::topology::{CandidateKey, ChannelCandidate, Matching, SwitchConfig, SwitchStates, Topology};

use routing::{RouteGraph, Selection};
use southbound::{
    AgentRegistration, ChannelEvent, RelayOrder, RelayReport, RelayStatus, Southbound, SwitchOrder, TelemetryReport,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} has no key management")]
    NotKmsNode(NodeId),
    #[error("node {0} is not registered")]
    NotRegistered(NodeId),
    #[error("node {0} already has an active registration")]
    AlreadyRegistered(NodeId),
    #[error("degenerate endpoints: {0}")]
    DegenerateEndpoints(NodeId),
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("no route carries {requested_bps} bps, best is {best_bps:.1} bps")]
    QosInfeasible { requested_bps: f64, best_bps: f64 },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
}

/// One hop of a route and the channels that feed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopBinding {
    pub from: NodeId,
    pub to: NodeId,
    pub channels: Vec<ChannelId>,
    pub vendors: Vec<String>,
    pub rate_bps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub nodes: Vec<NodeId>,
    pub hops: Vec<HopBinding>,
    /// Domains in the order the route visits them.
    pub domains: Vec<String>,
    pub bottleneck_bps: f64,
    pub epoch: u64,
}

impl RoutePlan {
    pub fn contains_hop(&self, a: &NodeId, b: &NodeId) -> bool {
        self.hops.iter().any(|h| (&h.from == a && &h.to == b) || (&h.from == b && &h.to == a))
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = &ChannelId> {
        self.hops.iter().flat_map(|h| h.channels.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentStatus {
    Active,
    Suspect,
}

#[derive(Clone, Debug, Serialize)]
pub struct Registration {
    pub registration: AgentRegistration,
    pub status: AgentStatus,
    pub registered_at: SimTime,
    pub last_heartbeat: SimTime,
}

/// What the controller knows about a channel.
#[derive(Clone, Debug, Serialize)]
pub struct ChannelView {
    pub channel_id: ChannelId,
    pub a: NodeId,
    pub b: NodeId,
    pub vendor: String,
    pub emitter: ModuleId,
    pub receiver: ModuleId,
    pub state: ChannelState,
    pub nominal_skr_kbps: f64,
    pub last_skr_kbps: Option<f64>,
    pub qber_pct: Option<f64>,
    pub buffered_bytes: usize,
    pub since: SimTime,
    pub reason: Option<String>,
    #[serde(skip)]
    samples: VecDeque<(SimTime, SimTime, f64)>,
}

impl ChannelView {
    /// Time-weighted mean SKR over the trailing window, nominal before any
    /// telemetry arrived.
    pub fn mean_skr_kbps(&self, window: SimDuration) -> f64 {
        let Some(&(_, latest, _)) = self.samples.back() else { return self.nominal_skr_kbps };
        let from = SimTime(latest.0.saturating_sub(window.0));
        let (mut w, mut sum) = (0.0, 0.0);
        for &(s, e, r) in self.samples.iter().rev() {
            if e <= from {
                break;
            }
            let dt = (e - s.max(from)).as_secs_f64();
            w += dt;
            sum += r * dt;
        }
        if w > 0.0 {
            sum / w
        } else {
            self.nominal_skr_kbps
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchCommand {
    pub switch_id: SwitchId,
    pub cross_connects: Vec<(PortId, PortId)>,
    #[serde(default)]
    pub issued_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SwitchResult {
    Applied,
    Rejected,
}

/// One reconfiguration attempt. Applied entries carry the full resulting
/// switch state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub t: SimTime,
    pub switch_id: SwitchId,
    pub cross_connects: Vec<(PortId, PortId)>,
    pub result: SwitchResult,
    pub reason: Option<String>,
    pub epoch: u64,
    pub config: Option<SwitchConfig>,
    pub torn_down: Vec<ChannelId>,
    pub establishing: Vec<CandidateKey>,
    pub feasible_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProvisionPolicy {
    Plain,
    /// Two deliveries over channels of different vendors on every hop,
    /// XOR-combined at the endpoints.
    IndependentSources,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub src: NodeId,
    pub dst: NodeId,
    pub size_bytes: usize,
    pub policy: ProvisionPolicy,
    pub route: RoutePlan,
    pub components: Vec<Vec<Option<String>>>,
    pub issued_at: SimTime,
    pub status: RelayStatus,
    pub report: Option<RelayReport>,
}

#[derive(Debug, Default)]
struct Reservations {
    per_hop: BTreeMap<NodePair, f64>,
    held: BTreeMap<NodePair, Vec<(Vec<NodePair>, f64)>>,
}

#[derive(Debug, Serialize)]
pub struct Controller {
    #[serde(skip)]
    topo: Arc<Topology>,
    settings: ControllerSettings,
    config: SwitchConfig,
    #[serde(skip)]
    feasible: Vec<ChannelCandidate>,
    registrations: BTreeMap<NodeId, Registration>,
    channels: BTreeMap<ChannelId, ChannelView>,
    #[serde(serialize_with = "ser_reservations")]
    reservations: Mutex<Reservations>,
    journal: Vec<JournalEntry>,
    jobs: BTreeMap<JobId, JobRecord>,
    /// Modules a pending establish order has claimed.
    pending: BTreeSet<ModuleId>,
    #[serde(skip)]
    outbox: VecDeque<(NodeId, Southbound)>,
    next_job: u64,
}

fn ser_reservations<S: serde::Serializer>(r: &Mutex<Reservations>, s: S) -> Result<S::Ok, S::Error> {
    let r = r.lock();
    s.collect_map(r.per_hop.iter().map(|(k, v)| (format!("{}|{}", k.lo, k.hi), *v)))
}

impl Controller {
    pub fn new(topo: Arc<Topology>) -> Self {
        let config = topo.initial_switch_config();
        let feasible = topo.enumerate_feasible_channels(&SwitchStates::Given(config.clone()));
        Self {
            settings: topo.settings.controller.clone(),
            topo,
            config,
            feasible,
            registrations: BTreeMap::new(),
            channels: BTreeMap::new(),
            reservations: Mutex::new(Reservations::default()),
            journal: Vec::new(),
            jobs: BTreeMap::new(),
            pending: BTreeSet::new(),
            outbox: VecDeque::new(),
            next_job: 0,
        }
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn switch_config(&self) -> &SwitchConfig {
        &self.config
    }

    /// Candidates realizable under the current switch configuration.
    pub fn feasible(&self) -> &[ChannelCandidate] {
        &self.feasible
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn registrations(&self) -> &BTreeMap<NodeId, Registration> {
        &self.registrations
    }

    pub fn channels(&self) -> &BTreeMap<ChannelId, ChannelView> {
        &self.channels
    }

    pub fn job(&self, id: &JobId) -> Option<&JobRecord> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    /// The full decision state as JSON, for inspection and audits.
    pub fn state_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("controller state serializes")
    }

    pub(crate) fn drain_outbox(&mut self) -> Vec<(NodeId, Southbound)> {
        self.outbox.drain(..).collect()
    }

    // ---------------------------------------------------------------- agents

    pub fn handle(&mut self, msg: Southbound, now: SimTime) -> Result<(), ControllerError> {
        match msg {
            Southbound::Register(reg) => self.register_agent(reg, now),
            Southbound::Heartbeat { node_id, t } => self.heartbeat(&node_id, t),
            Southbound::Telemetry(t) => {
                self.telemetry(t);
                Ok(())
            }
            Southbound::ChannelEvent(e) => {
                self.channel_event(e);
                Ok(())
            }
            Southbound::RelayResult(r) => self.relay_result(r),
            Southbound::SwitchCmd(_) | Southbound::RelayCmd(_) => Ok(()),
        }
    }

    pub fn register_agent(&mut self, reg: AgentRegistration, now: SimTime) -> Result<(), ControllerError> {
        if self.topo.node(&reg.node_id).is_none() {
            return Err(ControllerError::UnknownNode(reg.node_id));
        }
        if let Some(r) = self.registrations.get(&reg.node_id) {
            if r.status == AgentStatus::Active {
                return Err(ControllerError::AlreadyRegistered(reg.node_id));
            }
        }
        tracing::debug!(node = %reg.node_id, "agent registered");
        self.registrations.insert(
            reg.node_id.clone(),
            Registration { registration: reg, status: AgentStatus::Active, registered_at: now, last_heartbeat: now },
        );
        Ok(())
    }

    pub fn heartbeat(&mut self, node: &NodeId, t: SimTime) -> Result<(), ControllerError> {
        let r = self.registrations.get_mut(node).ok_or_else(|| ControllerError::NotRegistered(node.clone()))?;
        r.last_heartbeat = r.last_heartbeat.max(t);
        r.status = AgentStatus::Active;
        Ok(())
    }

    /// Marks agents that missed enough heartbeats as suspect. Returns the
    /// nodes that changed state.
    pub fn check_liveness(&mut self, now: SimTime) -> Vec<NodeId> {
        let mut changed = Vec::new();
        for (id, r) in &mut self.registrations {
            let limit = self.settings.missed_heartbeats as f64 * r.registration.heartbeat_interval_s;
            if r.status == AgentStatus::Active && now.saturating_sub(r.last_heartbeat).as_secs_f64() >= limit {
                r.status = AgentStatus::Suspect;
                tracing::warn!(node = %id, "agent suspect");
                changed.push(id.clone());
            }
        }
        changed
    }

    fn active(&self, n: &NodeId) -> bool {
        self.registrations.get(n).is_some_and(|r| r.status == AgentStatus::Active)
    }

    fn telemetry(&mut self, t: TelemetryReport) {
        let window = SimDuration::from_secs_f64(self.settings.rate_window_s);
        if let Some(ch) = self.channels.get_mut(&t.channel_id) {
            ch.samples.push_back((t.window_start, t.window_end, t.skr_kbps));
            while ch.samples.front().is_some_and(|&(_, e, _)| e.0 + window.0 < t.window_end.0) {
                ch.samples.pop_front();
            }
            ch.last_skr_kbps = Some(t.skr_kbps);
            ch.qber_pct = t.qber_pct;
            ch.buffered_bytes = t.buffered_bytes;
        }
    }

    fn channel_event(&mut self, e: ChannelEvent) {
        self.pending.remove(&e.emitter);
        self.pending.remove(&e.receiver);
        let Some(id) = e.channel_id else {
            tracing::warn!(emitter = %e.emitter, reason = ?e.reason, "channel establishment failed");
            return;
        };
        let view = self.channels.entry(id.clone()).or_insert_with(|| ChannelView {
            channel_id: id,
            a: e.a.clone(),
            b: e.b.clone(),
            vendor: e.vendor.clone(),
            emitter: e.emitter.clone(),
            receiver: e.receiver.clone(),
            state: e.state,
            nominal_skr_kbps: e.nominal_skr_kbps,
            last_skr_kbps: None,
            qber_pct: None,
            buffered_bytes: 0,
            since: e.t,
            reason: None,
            samples: VecDeque::new(),
        });
        view.state = e.state;
        view.since = e.t;
        view.reason = e.reason;
        if e.state == ChannelState::Down {
            view.samples.clear();
        }
    }

    fn relay_result(&mut self, r: RelayReport) -> Result<(), ControllerError> {
        let job = self.jobs.get_mut(&r.job_id).ok_or_else(|| ControllerError::UnknownJob(r.job_id.clone()))?;
        job.status = r.status.clone();
        job.report = Some(r);
        Ok(())
    }

    // ---------------------------------------------------------------- channels

    fn busy_modules(&self) -> BTreeSet<ModuleId> {
        let mut busy = self.pending.clone();
        for c in self.channels.values().filter(|c| c.state != ChannelState::Down) {
            busy.insert(c.emitter.clone());
            busy.insert(c.receiver.clone());
        }
        busy
    }

    /// Orders every feasible channel whose modules are idle. Orders go to
    /// the emitter's node.
    pub fn auto_establish(&mut self) -> Vec<CandidateKey> {
        let mut busy = self.busy_modules();
        let mut by_node: BTreeMap<NodeId, Vec<ChannelCandidate>> = BTreeMap::new();
        let mut keys = Vec::new();
        for c in &self.feasible {
            if busy.contains(&c.emitter) || busy.contains(&c.receiver) {
                continue;
            }
            busy.insert(c.emitter.clone());
            busy.insert(c.receiver.clone());
            self.pending.insert(c.emitter.clone());
            self.pending.insert(c.receiver.clone());
            keys.push(c.key());
            by_node.entry(c.nodes[0].clone()).or_default().push(c.clone());
        }
        for (node, establish) in by_node {
            self.outbox.push_back((
                node,
                Southbound::SwitchCmd(SwitchOrder {
                    switch: None,
                    matching: None,
                    epoch: self.config.epoch,
                    teardown: Vec::new(),
                    establish,
                }),
            ));
        }
        keys
    }

    /// Validates and applies a new matching for one switch. Live channels
    /// that the new state no longer supports are torn down, then idle
    /// modules are paired up again if auto-establish is on.
    pub fn apply_switch_config(&mut self, cmd: SwitchCommand, now: SimTime) -> JournalEntry {
        let seq = self.journal.len() as u64;
        let checked = Matching::new(&cmd.switch_id, cmd.cross_connects.iter().cloned())
            .and_then(|m| self.topo.check_matching(&cmd.switch_id, &m).map(|_| m));
        let matching = match checked {
            Ok(m) => m,
            Err(e) => {
                let entry = JournalEntry {
                    seq,
                    t: now,
                    switch_id: cmd.switch_id,
                    cross_connects: cmd.cross_connects,
                    result: SwitchResult::Rejected,
                    reason: Some(e.to_string()),
                    epoch: self.config.epoch,
                    config: None,
                    torn_down: Vec::new(),
                    establishing: Vec::new(),
                    feasible_channels: self.feasible.len(),
                };
                self.journal.push(entry.clone());
                return entry;
            }
        };

        let mut config = self.config.clone();
        config.epoch += 1;
        config.matchings.insert(cmd.switch_id.clone(), matching.clone());
        let feasible = self.topo.enumerate_feasible_channels(&SwitchStates::Given(config.clone()));
        let keep: BTreeSet<(ModuleId, ModuleId)> =
            feasible.iter().map(|c| (c.emitter.clone(), c.receiver.clone())).collect();

        let mut torn_down = Vec::new();
        let mut teardown_by_node: BTreeMap<NodeId, Vec<ChannelId>> = BTreeMap::new();
        for c in self.channels.values().filter(|c| c.state != ChannelState::Down) {
            let still = keep.contains(&(c.emitter.clone(), c.receiver.clone()))
                && feasible.iter().any(|f| f.emitter == c.emitter && f.receiver == c.receiver && self.same_route(c, f));
            if !still {
                torn_down.push(c.channel_id.clone());
                teardown_by_node.entry(c.a.clone()).or_default().push(c.channel_id.clone());
            }
        }

        self.config = config;
        self.feasible = feasible;
        let switch_node = self.topo.switches[&cmd.switch_id].node.clone();
        // The switch turns first; teardown orders ride along with it.
        self.outbox.push_back((
            switch_node.clone(),
            Southbound::SwitchCmd(SwitchOrder {
                switch: Some(cmd.switch_id.clone()),
                matching: Some(matching.pairs().cloned().collect()),
                epoch: self.config.epoch,
                teardown: teardown_by_node.remove(&switch_node).unwrap_or_default(),
                establish: Vec::new(),
            }),
        ));
        for (node, ids) in teardown_by_node {
            self.outbox.push_back((
                node,
                Southbound::SwitchCmd(SwitchOrder {
                    switch: None,
                    matching: None,
                    epoch: self.config.epoch,
                    teardown: ids,
                    establish: Vec::new(),
                }),
            ));
        }
        // Count torn-down modules as idle for the re-pairing below.
        for id in &torn_down {
            if let Some(c) = self.channels.get_mut(id) {
                c.state = ChannelState::Down;
                c.reason = Some("switch reconfigured".into());
                c.since = now;
                c.samples.clear();
            }
        }
        let establishing = if self.settings.auto_establish { self.auto_establish() } else { Vec::new() };
        let entry = JournalEntry {
            seq,
            t: now,
            switch_id: cmd.switch_id,
            cross_connects: cmd.cross_connects,
            result: SwitchResult::Applied,
            reason: None,
            epoch: self.config.epoch,
            config: Some(self.config.clone()),
            torn_down,
            establishing,
            feasible_channels: self.feasible.len(),
        };
        self.journal.push(entry.clone());
        entry
    }

    fn same_route(&self, c: &ChannelView, f: &ChannelCandidate) -> bool {
        let (a, b) = f.endpoints();
        &c.a == a && &c.b == b
    }

    // ---------------------------------------------------------------- routing

    fn domain_ok(&self, a: &NodeId, b: &NodeId) -> bool {
        let (Some(na), Some(nb)) = (self.topo.node(a), self.topo.node(b)) else { return false };
        na.domain == nb.domain || (na.is_border && nb.is_border)
    }

    fn live_channels(&self) -> impl Iterator<Item = &ChannelView> {
        self.channels.values().filter(move |c| {
            c.state != ChannelState::Down && self.active(&c.a) && self.active(&c.b) && self.domain_ok(&c.a, &c.b)
        })
    }

    /// Rate graph over live channels, net of reservations. With
    /// `min_vendors`, only node pairs served by that many vendors count.
    pub fn route_graph(&self, min_vendors: usize) -> RouteGraph {
        let window = SimDuration::from_secs_f64(self.settings.rate_window_s);
        let mut agg: BTreeMap<NodePair, (f64, BTreeSet<&str>)> = BTreeMap::new();
        for c in self.live_channels() {
            let e = agg.entry(NodePair::new(&c.a, &c.b)).or_default();
            e.0 += c.mean_skr_kbps(window) * 1000.0;
            e.1.insert(&c.vendor);
        }
        let res = self.reservations.lock();
        let mut g = RouteGraph::new();
        for (pair, (bps, vendors)) in agg {
            if vendors.len() < min_vendors {
                continue;
            }
            let reserved = res.per_hop.get(&pair).copied().unwrap_or(0.0);
            g.add(&pair.lo, &pair.hi, (bps - reserved).max(0.0));
        }
        g
    }

    fn check_endpoints(&self, src: &NodeId, dst: &NodeId) -> Result<(), ControllerError> {
        for n in [src, dst] {
            let node = self.topo.node(n).ok_or_else(|| ControllerError::UnknownNode(n.clone()))?;
            if !node.kms_enabled {
                return Err(ControllerError::NotKmsNode(n.clone()));
            }
            if !self.registrations.contains_key(n) {
                return Err(ControllerError::NotRegistered(n.clone()));
            }
        }
        if src == dst {
            return Err(ControllerError::DegenerateEndpoints(src.clone()));
        }
        Ok(())
    }

    pub fn compute_route(&self, src: &NodeId, dst: &NodeId, min_bps: f64) -> Result<RoutePlan, ControllerError> {
        self.route_with(src, dst, min_bps, 1)
    }

    fn route_with(&self, src: &NodeId, dst: &NodeId, min_bps: f64, min_vendors: usize) -> Result<RoutePlan, ControllerError> {
        self.check_endpoints(src, dst)?;
        let g = self.route_graph(min_vendors);
        match g.select(src, dst, min_bps) {
            Selection::NoPath => Err(ControllerError::NoRoute { src: src.clone(), dst: dst.clone() }),
            Selection::QosInfeasible { best_bps } => Err(ControllerError::QosInfeasible { requested_bps: min_bps, best_bps }),
            Selection::Found { nodes, bottleneck_bps } => Ok(self.bind(&g, nodes, bottleneck_bps)),
        }
    }

    fn bind(&self, g: &RouteGraph, nodes: Vec<NodeId>, bottleneck_bps: f64) -> RoutePlan {
        let live: Vec<&ChannelView> = self.live_channels().collect();
        let hops = nodes
            .windows(2)
            .map(|w| {
                let pair = NodePair::new(&w[0], &w[1]);
                let chans: Vec<&&ChannelView> = live.iter().filter(|c| NodePair::new(&c.a, &c.b) == pair).collect();
                let vendors: BTreeSet<String> = chans.iter().map(|c| c.vendor.clone()).collect();
                HopBinding {
                    from: w[0].clone(),
                    to: w[1].clone(),
                    channels: chans.iter().map(|c| c.channel_id.clone()).collect(),
                    vendors: vendors.into_iter().collect(),
                    rate_bps: g.rate(&w[0], &w[1]).unwrap_or(0.0),
                }
            })
            .collect();
        let mut domains: Vec<String> = Vec::new();
        for n in &nodes {
            let d = &self.topo.nodes[n].domain;
            if domains.last() != Some(d) {
                domains.push(d.clone());
            }
        }
        RoutePlan { nodes, hops, domains, bottleneck_bps, epoch: self.config.epoch }
    }

    /// True when every hop still has a channel that is not DOWN.
    pub fn plan_valid(&self, plan: &RoutePlan) -> bool {
        plan.hops.iter().all(|h| {
            h.channels.iter().any(|id| self.channels.get(id).is_some_and(|c| c.state != ChannelState::Down))
        })
    }

    // ---------------------------------------------------------------- provisioning

    /// Plans an end-to-end delivery and orders the source agent to run it.
    pub fn provision(
        &mut self,
        src: &NodeId,
        dst: &NodeId,
        size_bytes: usize,
        policy: ProvisionPolicy,
        now: SimTime,
    ) -> Result<JobId, ControllerError> {
        let (route, components) = match policy {
            ProvisionPolicy::Plain => {
                let r = self.compute_route(src, dst, 0.0)?;
                let n = r.hops.len();
                (r, vec![vec![None; n]])
            }
            ProvisionPolicy::IndependentSources => {
                let r = self.route_with(src, dst, 0.0, 2)?;
                let first = r.hops.iter().map(|h| Some(h.vendors[0].clone())).collect();
                let second = r.hops.iter().map(|h| Some(h.vendors[1].clone())).collect();
                (r, vec![first, second])
            }
        };
        if !self.plan_valid(&route) {
            return Err(ControllerError::NoRoute { src: src.clone(), dst: dst.clone() });
        }
        self.next_job += 1;
        let job_id = JobId::new(format!("job-{:06}", self.next_job));
        let order = RelayOrder {
            job_id: job_id.clone(),
            route: route.clone(),
            size_bytes,
            hop_vendors: components.clone(),
        };
        self.jobs.insert(
            job_id.clone(),
            JobRecord {
                job_id: job_id.clone(),
                src: src.clone(),
                dst: dst.clone(),
                size_bytes,
                policy,
                route,
                components,
                issued_at: now,
                status: RelayStatus::Parked,
                report: None,
            },
        );
        self.outbox.push_back((src.clone(), Southbound::RelayCmd(order)));
        Ok(job_id)
    }

    /// Key ids and outcome of a finished job.
    pub fn job_outcome(&self, id: &JobId) -> Option<(RelayStatus, Option<KeyId>)> {
        let j = self.jobs.get(id)?;
        Some((j.status.clone(), j.report.as_ref().and_then(|r| r.key_id)))
    }
}

impl RouteOracle for Controller {
    fn deliverable_bps(&self, a: &NodeId, b: &NodeId) -> Option<f64> {
        self.compute_route(a, b, 0.0).ok().map(|r| r.bottleneck_bps)
    }

    fn reserve(&self, a: &NodeId, b: &NodeId, bps: f64) {
        let Ok(route) = self.compute_route(a, b, 0.0) else { return };
        let hops: Vec<NodePair> = route.hops.iter().map(|h| NodePair::new(&h.from, &h.to)).collect();
        let mut r = self.reservations.lock();
        for h in &hops {
            *r.per_hop.entry(h.clone()).or_insert(0.0) += bps;
        }
        r.held.entry(NodePair::new(a, b)).or_default().push((hops, bps));
    }

    fn release(&self, a: &NodeId, b: &NodeId, bps: f64) {
        let mut r = self.reservations.lock();
        let Some(list) = r.held.get_mut(&NodePair::new(a, b)) else { return };
        let Some(pos) = list.iter().position(|(_, x)| *x == bps) else { return };
        let (hops, _) = list.remove(pos);
        for h in hops {
            if let Some(v) = r.per_hop.get_mut(&h) {
                *v = (*v - bps).max(0.0);
            }
        }
    }
}
