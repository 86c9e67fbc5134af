//! Enumeration of emitter/receiver pairings reachable over all-optical paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::*;

/// Identity of a candidate channel. Two candidates are the same connection
/// only if they share modules, fiber route and wavelength.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub emitter: ModuleId,
    pub receiver: ModuleId,
    pub links: Vec<LinkId>,
    pub wavelength: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossConnectUse {
    pub switch: SwitchId,
    pub a: PortId,
    pub b: PortId,
}

impl CrossConnectUse {
    fn new(switch: &SwitchId, x: &PortId, y: &PortId) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Self { switch: switch.clone(), a: a.clone(), b: b.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCandidate {
    pub emitter: ModuleId,
    pub receiver: ModuleId,
    pub vendor: String,
    pub technology: Technology,
    pub band: Band,
    pub wavelength: String,
    pub links: Vec<LinkId>,
    /// Emitter node first, receiver node last.
    pub nodes: Vec<NodeId>,
    pub loss_db: f64,
    pub cross_connects: Vec<CrossConnectUse>,
    /// Switch epoch the candidate was computed under; `None` when it came
    /// from the any-configuration enumeration.
    pub epoch: Option<u64>,
}

impl ChannelCandidate {
    pub fn key(&self) -> CandidateKey {
        CandidateKey {
            emitter: self.emitter.clone(),
            receiver: self.receiver.clone(),
            links: self.links.clone(),
            wavelength: self.wavelength.clone(),
        }
    }

    pub fn endpoints(&self) -> (&NodeId, &NodeId) {
        (self.nodes.first().expect("path has nodes"), self.nodes.last().expect("path has nodes"))
    }

    /// Directed fiber segments as (link, transmitting node).
    pub fn segments(&self) -> impl Iterator<Item = (LinkId, &NodeId)> {
        self.links.iter().copied().zip(self.nodes.iter())
    }
}

type Segment = (LinkId, NodeId, String);

struct Walk<'a> {
    topo: &'a Topology,
    states: &'a SwitchStates,
    emitter: &'a QkdModuleSpec,
    wavelength: &'a str,
    out: Vec<ChannelCandidate>,
}

impl<'a> Walk<'a> {
    fn allowed(&self, sw: &SwitchId, x: &PortId, y: &PortId) -> bool {
        match self.states {
            SwitchStates::Any => true,
            SwitchStates::Given(cfg) => cfg.matchings.get(sw).is_some_and(|m| m.connects(x, y)),
        }
    }

    fn pairable(&self, r: &QkdModuleSpec, loss: f64) -> bool {
        let e = self.emitter;
        r.role == Role::Receiver
            && r.vendor == e.vendor
            && r.technology == e.technology
            && r.band == e.band
            && r.channels.iter().any(|c| c == self.wavelength)
            && loss <= e.max_tolerated_loss_db.min(r.max_tolerated_loss_db) + 1e-9
    }

    fn emit(&mut self, r: &QkdModuleSpec, links: &[LinkId], nodes: &[NodeId], loss: f64, xcs: &[CrossConnectUse]) {
        let e = self.emitter;
        let mut cross_connects = xcs.to_vec();
        cross_connects.sort();
        self.out.push(ChannelCandidate {
            emitter: e.id.clone(),
            receiver: r.id.clone(),
            vendor: e.vendor.clone(),
            technology: e.technology,
            band: e.band,
            wavelength: self.wavelength.to_owned(),
            links: links.to_vec(),
            nodes: nodes.to_vec(),
            loss_db: loss,
            cross_connects,
            epoch: match self.states {
                SwitchStates::Any => None,
                SwitchStates::Given(c) => Some(c.epoch),
            },
        });
    }

    fn walk(&mut self, link: LinkId, links: &mut Vec<LinkId>, nodes: &mut Vec<NodeId>, loss: f64, xcs: &mut Vec<CrossConnectUse>) {
        let topo = self.topo;
        let here = nodes.last().expect("walk starts at the emitter");
        let far = topo.links[&link].other_end(here).expect("link touches node").clone();
        if nodes.contains(&far) {
            return;
        }
        links.push(link);
        nodes.push(far.clone());

        // A demultiplexer drops the wavelength to any fixed receiver tuned to it.
        let fixed: Vec<&QkdModuleSpec> = topo
            .modules
            .values()
            .filter(|m| {
                m.role == Role::Receiver
                    && m.node == far
                    && m.fixed_link() == Some(link)
                    && m.channels.iter().any(|c| c == self.wavelength)
            })
            .collect();
        if !fixed.is_empty() {
            for r in fixed {
                if self.pairable(r, loss) {
                    self.emit(r, links, nodes, loss, xcs);
                }
            }
        } else if let Some(sw) = topo.switch_at(&far) {
            if let (Some(inport), true) = (sw.port_for_link(link), sw.passes(self.wavelength)) {
                for port in &sw.ports {
                    if port.id == inport.id || !self.allowed(&sw.id, &inport.id, &port.id) {
                        continue;
                    }
                    xcs.push(CrossConnectUse::new(&sw.id, &inport.id, &port.id));
                    match &port.binding {
                        PortBinding::Module(m) => {
                            let r = &topo.modules[m];
                            if self.pairable(r, loss) {
                                self.emit(r, links, nodes, loss, xcs);
                            }
                        }
                        PortBinding::Link(next) => {
                            let next_loss = loss
                                + topo.settings.network.switch_insertion_loss_db
                                + topo.links[next].loss(self.emitter.band);
                            if next_loss <= self.emitter.max_tolerated_loss_db + 1e-9 {
                                self.walk(*next, links, nodes, next_loss, xcs);
                            }
                        }
                    }
                    xcs.pop();
                }
            }
        }
        links.pop();
        nodes.pop();
    }
}

/// Directed wavelength use of fixed, single-wavelength emitters. These are
/// lit regardless of switch state, so nothing else may reuse the slot.
fn static_occupancy(topo: &Topology) -> BTreeMap<Segment, ModuleId> {
    topo.modules
        .values()
        .filter(|m| m.role == Role::Emitter && m.channels.len() == 1)
        .filter_map(|m| m.fixed_link().map(|l| ((l, m.node.clone(), m.channels[0].clone()), m.id.clone())))
        .collect()
}

pub(super) fn enumerate(topo: &Topology, states: &SwitchStates) -> Vec<ChannelCandidate> {
    let mut all = Vec::new();
    for e in topo.modules.values().filter(|m| m.role == Role::Emitter) {
        for w in &e.channels {
            let mut walk = Walk { topo, states, emitter: e, wavelength: w, out: Vec::new() };
            let mut nodes = vec![e.node.clone()];
            let mut links = Vec::new();
            let mut xcs = Vec::new();
            match &e.attachment {
                Attachment::Link(l) => {
                    let loss = topo.links[l].loss(e.band);
                    if loss <= e.max_tolerated_loss_db + 1e-9 {
                        walk.walk(*l, &mut links, &mut nodes, loss, &mut xcs);
                    }
                }
                Attachment::Switch(sid, pid) => {
                    let sw = &topo.switches[sid];
                    if sw.passes(w) {
                        for port in &sw.ports {
                            let PortBinding::Link(l) = port.binding else { continue };
                            if !walk.allowed(sid, pid, &port.id) {
                                continue;
                            }
                            let loss = topo.links[&l].loss(e.band);
                            if loss > e.max_tolerated_loss_db + 1e-9 {
                                continue;
                            }
                            xcs.push(CrossConnectUse::new(sid, pid, &port.id));
                            walk.walk(l, &mut links, &mut nodes, loss, &mut xcs);
                            xcs.pop();
                        }
                    }
                }
            }
            all.extend(walk.out);
        }
    }

    let fixed = static_occupancy(topo);
    all.retain(|c| {
        c.segments().all(|(l, from)| {
            fixed.get(&(l, from.clone(), c.wavelength.clone())).is_none_or(|owner| owner == &c.emitter)
        })
    });
    all.sort_by_key(|a| a.key());
    all.dedup_by(|a, b| a.key() == b.key());

    if let SwitchStates::Given(_) = states {
        // Under one concrete configuration the surviving channels must be able
        // to run together, so keep a collision-free subset in key order.
        let mut used: BTreeMap<Segment, ModuleId> = BTreeMap::new();
        all.retain(|c| {
            let segs: Vec<Segment> = c.segments().map(|(l, n)| (l, n.clone(), c.wavelength.clone())).collect();
            if segs.iter().any(|s| used.get(s).is_some_and(|o| o != &c.emitter)) {
                return false;
            }
            for s in segs {
                used.insert(s, c.emitter.clone());
            }
            true
        });
    }
    all
}
