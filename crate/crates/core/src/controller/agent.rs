//! Per-node agent: reports to the controller and carries out its orders on
//! the node's modules, switch and key store.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::forwarding::{combine_keys, CombinedKeySpec, ComponentSource, Forwarder, JobStatus, TransportJob};
use crate::ids::{ChannelId, JobId, NodeId};
use crate::kms::Kms;
use crate::linksim::{ChannelState, LinkSim, QuantumChannel};
use crate::settings::ExhaustionPolicy;
use crate::time::{SimDuration, SimTime};
use crate::topology::{Matching, SwitchConfig, Topology};

use super::southbound::{
    AgentRegistration, ChannelEvent, RelayOrder, RelayReport, RelayStatus, Southbound, SwitchOrder, TelemetryReport,
};

/// Everything an agent may act on. The physical layer is shared because a
/// channel spans two nodes; each agent only touches what its node owns.
pub struct Plant<'a> {
    pub topo: &'a Topology,
    pub linksim: &'a mut LinkSim,
    pub fabric: &'a mut SwitchConfig,
    pub kms: &'a Kms,
    pub forwarder: &'a Forwarder,
}

#[derive(Debug)]
struct Parked {
    job: TransportJob,
    started_at: SimTime,
    attempts: u32,
}

/// Keys seen by a source agent during a combined delivery. Only recorded
/// when tracing is switched on.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub job_id: JobId,
    pub components: Vec<Vec<u8>>,
    pub output: Vec<u8>,
}

#[derive(Debug)]
pub struct Agent {
    node: NodeId,
    registration: AgentRegistration,
    rng: ChaCha20Rng,
    last_heartbeat: Option<SimTime>,
    parked: BTreeMap<JobId, Parked>,
    trace: Option<Vec<TraceEntry>>,
}

fn channel_event(ch: &QuantumChannel, now: SimTime) -> Southbound {
    Southbound::ChannelEvent(ChannelEvent {
        channel_id: Some(ch.channel_id.clone()),
        state: ch.state,
        a: ch.nodes[0].clone(),
        b: ch.nodes.last().expect("channel has nodes").clone(),
        vendor: ch.vendor.clone(),
        emitter: ch.emitter.clone(),
        receiver: ch.receiver.clone(),
        nominal_skr_kbps: ch.nominal_skr_kbps,
        t: now,
        reason: ch.down_reason.clone(),
    })
}

impl Agent {
    pub fn new(topo: &Topology, node: &NodeId, index: u64) -> Self {
        let n = &topo.nodes[node];
        let sw = topo.switch_at(node);
        let registration = AgentRegistration {
            node_id: node.clone(),
            modules: n.installed_modules.clone(),
            switch: sw.map(|s| s.id.clone()),
            switch_ports: sw.map(|s| s.ports.iter().map(|p| p.id.clone()).collect()).unwrap_or_default(),
            kms_enabled: n.kms_enabled,
            heartbeat_interval_s: topo.settings.controller.heartbeat_interval_s,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(topo.settings.simulation.seed);
        rng.set_stream((1 << 32) + index);
        Self { node: node.clone(), registration, rng, last_heartbeat: None, parked: BTreeMap::new(), trace: None }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn registration(&self) -> Southbound {
        Southbound::Register(self.registration.clone())
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn traced(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn parked(&self) -> impl Iterator<Item = (&JobId, u32)> {
        self.parked.iter().map(|(k, p)| (k, p.attempts))
    }

    fn owns(&self, ch: &QuantumChannel) -> bool {
        ch.nodes[0] == self.node
    }

    /// Periodic work: heartbeat, sync completion, key generation and
    /// telemetry for channels this node emits on.
    pub fn tick(&mut self, plant: &mut Plant<'_>, dt: SimDuration, now: SimTime) -> Vec<Southbound> {
        let mut out = Vec::new();
        let interval = SimDuration::from_secs_f64(self.registration.heartbeat_interval_s);
        if self.last_heartbeat.is_none_or(|t| now.saturating_sub(t) >= interval) {
            self.last_heartbeat = Some(now);
            out.push(Southbound::Heartbeat { node_id: self.node.clone(), t: now });
        }
        let mine: Vec<ChannelId> =
            plant.linksim.live().filter(|c| self.owns(c)).map(|c| c.channel_id.clone()).collect();
        for id in mine {
            let ch = plant.linksim.get(&id).expect("listed");
            match ch.state {
                ChannelState::Syncing => {
                    if plant.linksim.promote(&id, now) {
                        out.push(channel_event(plant.linksim.get(&id).expect("listed"), now));
                    }
                }
                ChannelState::Up => {
                    let (a, b) = (ch.nodes[0].clone(), ch.nodes.last().expect("nodes").clone());
                    let adv = match plant.linksim.advance(&id, dt, now) {
                        Ok(adv) => adv,
                        Err(e) => {
                            tracing::warn!(channel = %id, error = %e, "advance failed");
                            continue;
                        }
                    };
                    for block in adv.blocks {
                        let source = crate::audit::BlockSource::Channel {
                            channel_id: block.channel_id.clone(),
                            vendor: block.vendor.clone(),
                        };
                        if let Err(e) = plant.kms.ingest(&a, &b, block.key_id, block.bits, source, now) {
                            tracing::error!(channel = %id, error = %e, "block rejected");
                        }
                    }
                    if let Some(h) = adv.health {
                        out.push(Southbound::Telemetry(TelemetryReport {
                            node_id: self.node.clone(),
                            channel_id: id.clone(),
                            skr_kbps: h.current_skr_kbps,
                            qber_pct: h.current_qber_pct,
                            window_start: h.window_start,
                            window_end: h.window_end,
                            buffered_bytes: plant.kms.buffered(&a, &b, crate::kms::KeyFilter::Any),
                        }));
                    }
                    let ch = plant.linksim.get(&id).expect("listed");
                    if ch.state == ChannelState::Down {
                        out.push(channel_event(ch, now));
                    }
                }
                ChannelState::Down => {}
            }
        }
        out
    }

    pub fn handle(&mut self, msg: Southbound, plant: &mut Plant<'_>, now: SimTime) -> Vec<Southbound> {
        match msg {
            Southbound::SwitchCmd(order) => self.switch_order(order, plant, now),
            Southbound::RelayCmd(order) => self.relay(order, plant, now).into_iter().collect(),
            other => {
                tracing::warn!(node = %self.node, msg = other.msg_type(), "agent ignores message");
                Vec::new()
            }
        }
    }

    fn switch_order(&mut self, order: SwitchOrder, plant: &mut Plant<'_>, now: SimTime) -> Vec<Southbound> {
        let mut out = Vec::new();
        for id in &order.teardown {
            if plant.linksim.teardown(id, "switch reconfigured").is_ok() {
                out.push(channel_event(plant.linksim.get(id).expect("exists"), now));
            }
        }
        if let (Some(sw), Some(pairs)) = (&order.switch, &order.matching) {
            match Matching::new(sw, pairs.iter().cloned()) {
                Ok(m) => {
                    plant.fabric.matchings.insert(sw.clone(), m);
                    plant.fabric.epoch = order.epoch;
                }
                Err(e) => tracing::error!(switch = %sw, error = %e, "matching refused by agent"),
            }
        }
        for cand in &order.establish {
            match plant.linksim.establish_channel(plant.topo, cand, plant.fabric.epoch, now) {
                Ok(id) => out.push(channel_event(plant.linksim.get(&id).expect("created"), now)),
                Err(e) => {
                    let (a, b) = cand.endpoints();
                    out.push(Southbound::ChannelEvent(ChannelEvent {
                        channel_id: None,
                        state: ChannelState::Down,
                        a: a.clone(),
                        b: b.clone(),
                        vendor: cand.vendor.clone(),
                        emitter: cand.emitter.clone(),
                        receiver: cand.receiver.clone(),
                        nominal_skr_kbps: 0.0,
                        t: now,
                        reason: Some(e.to_string()),
                    }))
                }
            }
        }
        out
    }

    fn fresh_key(&mut self, n: usize) -> Vec<u8> {
        let mut k = vec![0u8; n];
        self.rng.fill_bytes(&mut k);
        k
    }

    fn route_alive(linksim: &LinkSim, job: &TransportJob) -> bool {
        job.route.hops.iter().all(|h| {
            h.channels.iter().any(|id| linksim.get(id).is_some_and(|c| c.state != ChannelState::Down))
        })
    }

    fn report(job: &TransportJob, status: RelayStatus, started: SimTime, finished: SimTime) -> RelayReport {
        RelayReport {
            job_id: job.job_id.clone(),
            status,
            key_id: job.delivered_key,
            latency_s: (finished - started).as_secs_f64(),
            hops_done: job.hop_cursor,
            link_key_bytes: job.hop_cursor * job.payload_len,
            component_jobs: Vec::new(),
            failure: job.failure.clone(),
        }
    }

    fn relay(&mut self, order: RelayOrder, plant: &mut Plant<'_>, now: SimTime) -> Option<Southbound> {
        if order.hop_vendors.len() > 1 {
            return Some(Southbound::RelayResult(self.relay_combined(order, plant, now)));
        }
        let payload = self.fresh_key(order.size_bytes);
        let vendors = order.hop_vendors.into_iter().next().unwrap_or_default();
        let mut job = TransportJob::new(order.job_id.clone(), payload, order.route, now).with_vendors(vendors);
        let park = plant.forwarder.settings().on_exhaustion == ExhaustionPolicy::Park;
        let linksim = &*plant.linksim;
        let out = plant.forwarder.relay_key(&mut job, &|j| Self::route_alive(linksim, j), park, now);
        if out.status == JobStatus::InFlight {
            let report = Self::report(&job, RelayStatus::Parked, now, out.finished_at);
            self.parked.insert(order.job_id, Parked { job, started_at: now, attempts: 0 });
            return Some(Southbound::RelayResult(report));
        }
        let status = if out.status == JobStatus::Delivered { RelayStatus::Delivered } else { RelayStatus::Failed };
        Some(Southbound::RelayResult(Self::report(&job, status, now, out.finished_at)))
    }

    fn relay_combined(&mut self, order: RelayOrder, plant: &mut Plant<'_>, now: SimTime) -> RelayReport {
        let src = order.route.nodes[0].clone();
        let dst = order.route.nodes.last().expect("route has nodes").clone();
        let mut parts = Vec::new();
        let mut sources = Vec::new();
        let mut ids = Vec::new();
        let mut finished = now;
        let mut hops_done = 0;
        let mut failure = None;
        for (i, vendors) in order.hop_vendors.iter().enumerate() {
            let job_id = JobId::new(format!("{}.{}", order.job_id, i + 1));
            ids.push(job_id.clone());
            let label = vendors.iter().map(|v| v.as_deref().unwrap_or("*")).collect::<Vec<_>>().join("/");
            sources.push(ComponentSource { a: src.clone(), b: dst.clone(), vendor: label });
            let payload = self.fresh_key(order.size_bytes);
            let mut job = TransportJob::new(job_id, payload, order.route.clone(), now)
                .with_vendors(vendors.clone())
                .without_deposit();
            let linksim = &*plant.linksim;
            let out = plant.forwarder.relay_key(&mut job, &|j| Self::route_alive(linksim, j), false, now);
            hops_done += job.hop_cursor;
            finished = finished.max(out.finished_at);
            match out.delivered {
                Some(bits) => parts.push(bits),
                None => {
                    failure = job.failure.clone();
                    break;
                }
            }
        }
        let mut report = RelayReport {
            job_id: order.job_id.clone(),
            status: RelayStatus::Failed,
            key_id: None,
            latency_s: 0.0,
            hops_done,
            link_key_bytes: hops_done * order.size_bytes,
            component_jobs: ids,
            failure,
        };
        if report.failure.is_none() {
            let spec = CombinedKeySpec { component_sources: sources, output_size_bytes: order.size_bytes, independent: true };
            match combine_keys(&spec, &parts) {
                Ok(key) => {
                    // Combination happens at both endpoints in parallel.
                    finished = finished + plant.forwarder.combine_delay();
                    if let Some(t) = &mut self.trace {
                        t.push(TraceEntry { job_id: order.job_id.clone(), components: parts.clone(), output: key.clone() });
                    }
                    match plant.kms.deposit(&src, &dst, &order.job_id, key, finished) {
                        Ok(id) => {
                            report.status = RelayStatus::Delivered;
                            report.key_id = Some(id);
                        }
                        Err(e) => {
                            report.failure = Some(crate::forwarding::JobFailure { reason: e.to_string(), resumable: false })
                        }
                    }
                }
                Err(e) => report.failure = Some(crate::forwarding::JobFailure { reason: e.to_string(), resumable: false }),
            }
        }
        for p in &mut parts {
            p.fill(0);
        }
        report.latency_s = (finished - now).as_secs_f64();
        report
    }

    /// Retries a parked job. `None` while it stays parked.
    pub fn retry(&mut self, job_id: &JobId, plant: &mut Plant<'_>, now: SimTime) -> Option<Southbound> {
        let deadline = SimDuration::from_secs_f64(plant.forwarder.settings().retry_deadline_s);
        let mut p = self.parked.remove(job_id)?;
        p.attempts += 1;
        if now.saturating_sub(p.started_at) >= deadline {
            plant.forwarder.fail(&mut p.job, "retry deadline exceeded", false, now);
            return Some(Southbound::RelayResult(Self::report(&p.job, RelayStatus::Failed, p.started_at, now)));
        }
        let linksim = &*plant.linksim;
        let out = plant.forwarder.relay_key(&mut p.job, &|j| Self::route_alive(linksim, j), true, now);
        let status = match out.status {
            JobStatus::InFlight | JobStatus::Pending => {
                self.parked.insert(job_id.clone(), p);
                return None;
            }
            JobStatus::Delivered => RelayStatus::Delivered,
            JobStatus::Failed => RelayStatus::Failed,
        };
        Some(Southbound::RelayResult(Self::report(&p.job, status, p.started_at, out.finished_at)))
    }

    /// Fails parked jobs whose route lost a hop.
    pub fn revalidate(&mut self, plant: &mut Plant<'_>, now: SimTime) -> Vec<Southbound> {
        let broken: Vec<JobId> = self
            .parked
            .iter()
            .filter(|(_, p)| !Self::route_alive(plant.linksim, &p.job))
            .map(|(k, _)| k.clone())
            .collect();
        broken
            .into_iter()
            .map(|id| {
                let mut p = self.parked.remove(&id).expect("listed");
                plant.forwarder.fail(&mut p.job, "route invalidated", false, now);
                Southbound::RelayResult(Self::report(&p.job, RelayStatus::Failed, p.started_at, now))
            })
            .collect()
    }
}
