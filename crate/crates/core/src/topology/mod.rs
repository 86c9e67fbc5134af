//! Static description of the optical network and structural queries on it.

mod config;
mod feasibility;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{LinkId, ModuleId, NodeId, PortId, SwitchId};
use crate::settings::Settings;

pub use config::{load_topology, load_topology_file, ConfigDocument, MADQCI_TOML, PAIR_TOML};
pub use feasibility::{CandidateKey, ChannelCandidate, CrossConnectUse};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("no nodes")]
    NoNodes,
    #[error("duplicate {kind} id {id:?}")]
    Duplicate { kind: &'static str, id: String },
    #[error("{owner} references unknown {kind} {id:?}")]
    UnknownReference { owner: String, kind: &'static str, id: String },
    #[error("invalid {field}: {message}")]
    Invariant { field: String, message: String },
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("links do not form a connected path at position {0}")]
    Disconnected(usize),
    #[error("path revisits a node at position {0}")]
    NotSimple(usize),
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("switch {switch}: port {port} used more than once")]
    PortReused { switch: SwitchId, port: PortId },
    #[error("switch {switch}: unknown port {port}")]
    UnknownPort { switch: SwitchId, port: PortId },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl TopologyError {
    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invariant { field: field.into(), message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    O,
    C,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::O => "O",
            Band::C => "C",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Technology {
    CV,
    DV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Emitter,
    Receiver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub domain: String,
    pub is_border: bool,
    pub kms_enabled: bool,
    /// Remote pseudo-sites host modules outside the mapped fiber plant.
    pub remote: bool,
    /// Application names accepted in `Node:app` endpoint ids. Empty accepts any.
    pub apps: Vec<String>,
    pub has_optical_switch: bool,
    pub installed_modules: Vec<ModuleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberLink {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub length_km: f64,
    pub loss_c_db: f64,
    pub loss_o_db: f64,
    pub fiber_pairs: u32,
    pub classical_channels: u32,
}

impl FiberLink {
    pub fn loss(&self, band: Band) -> f64 {
        match band {
            Band::C => self.loss_c_db,
            Band::O => self.loss_o_db,
        }
    }

    pub fn other_end(&self, node: &NodeId) -> Option<&NodeId> {
        if node == &self.a {
            Some(&self.b)
        } else if node == &self.b {
            Some(&self.a)
        } else {
            None
        }
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.a == node || &self.b == node
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateAnchor {
    pub loss_db: f64,
    pub skr_kbps: f64,
    /// Source row label, kept for traceability in reports.
    #[serde(default)]
    pub row: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    pub name: String,
    pub anchors: Vec<RateAnchor>,
}

/// Where a module's fiber goes: straight onto a link, or into the local switch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attachment {
    Link(LinkId),
    Switch(SwitchId, PortId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkdModuleSpec {
    pub id: ModuleId,
    pub node: NodeId,
    pub vendor: String,
    pub technology: Technology,
    pub role: Role,
    pub band: Band,
    /// Wavelength tokens: `C-37` style DWDM labels, `O`, or a generic `C`.
    pub channels: Vec<String>,
    pub wavelength_tunable: bool,
    pub max_tolerated_loss_db: f64,
    pub profile: String,
    pub channel_profiles: BTreeMap<String, String>,
    pub nominal_qber_pct: Option<f64>,
    pub attachment: Attachment,
}

impl QkdModuleSpec {
    pub fn profile_for(&self, wavelength: &str) -> &str {
        self.channel_profiles.get(wavelength).map(String::as_str).unwrap_or(&self.profile)
    }

    pub fn fixed_link(&self) -> Option<LinkId> {
        match self.attachment {
            Attachment::Link(l) => Some(l),
            Attachment::Switch(..) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortBinding {
    Link(LinkId),
    Module(ModuleId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub id: PortId,
    pub binding: PortBinding,
}

/// A partial matching over a switch's ports, stored with each pair ordered.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Matching(BTreeSet<(PortId, PortId)>);

impl Matching {
    pub fn new<I: IntoIterator<Item = (PortId, PortId)>>(switch: &SwitchId, pairs: I) -> Result<Self, TopologyError> {
        let mut seen = BTreeSet::new();
        let mut out = BTreeSet::new();
        for (a, b) in pairs {
            for p in [&a, &b] {
                if !seen.insert(p.clone()) {
                    return Err(TopologyError::PortReused { switch: switch.clone(), port: p.clone() });
                }
            }
            out.insert(if a <= b { (a, b) } else { (b, a) });
        }
        Ok(Self(out))
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(PortId, PortId)> {
        self.0.iter()
    }

    pub fn peer(&self, port: &PortId) -> Option<&PortId> {
        self.0.iter().find_map(|(a, b)| {
            if a == port {
                Some(b)
            } else if b == port {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn connects(&self, x: &PortId, y: &PortId) -> bool {
        let key = if x <= y { (x.clone(), y.clone()) } else { (y.clone(), x.clone()) };
        self.0.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalSwitch {
    pub id: SwitchId,
    pub node: NodeId,
    /// Wavelengths the switch fabric passes. Others are blocked.
    pub passband: Vec<String>,
    pub ports: Vec<Port>,
    /// Cross-connects as loaded from the file.
    pub cross_connects: Matching,
}

impl OpticalSwitch {
    pub fn port(&self, id: &PortId) -> Option<&Port> {
        self.ports.iter().find(|p| &p.id == id)
    }

    pub fn port_for_link(&self, link: LinkId) -> Option<&Port> {
        self.ports.iter().find(|p| p.binding == PortBinding::Link(link))
    }

    pub fn passes(&self, wavelength: &str) -> bool {
        self.passband.iter().any(|w| w == wavelength)
    }
}

/// Cross-connect state for every switch, versioned by an epoch that moves on
/// each applied change.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub epoch: u64,
    pub matchings: BTreeMap<SwitchId, Matching>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SwitchStates {
    /// Every valid cross-connect is considered available.
    Any,
    Given(SwitchConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub settings: Settings,
    pub nodes: BTreeMap<NodeId, Node>,
    pub links: BTreeMap<LinkId, FiberLink>,
    pub switches: BTreeMap<SwitchId, OpticalSwitch>,
    pub modules: BTreeMap<ModuleId, QkdModuleSpec>,
    pub profiles: BTreeMap<String, RateProfile>,
}

impl Topology {
    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn link(&self, id: LinkId) -> Result<&FiberLink, TopologyError> {
        self.links.get(&id).ok_or(TopologyError::UnknownLink(id))
    }

    pub fn module(&self, id: &ModuleId) -> Option<&QkdModuleSpec> {
        self.modules.get(id)
    }

    pub fn switch_at(&self, node: &NodeId) -> Option<&OpticalSwitch> {
        self.switches.values().find(|s| &s.node == node)
    }

    /// Sites on the mapped fiber plant, excluding remote pseudo-nodes.
    pub fn sites(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(|n| !n.remote)
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.nodes.values().map(|n| n.domain.as_str()).collect()
    }

    pub fn is_inter_domain(&self, link: &FiberLink) -> bool {
        self.nodes[&link.a].domain != self.nodes[&link.b].domain
    }

    pub fn links_at<'a>(&'a self, node: &'a NodeId) -> impl Iterator<Item = &'a FiberLink> + 'a {
        self.links.values().filter(move |l| l.touches(node))
    }

    /// Neighbouring nodes over any fiber link.
    pub fn neighbours(&self, node: &NodeId) -> BTreeSet<NodeId> {
        self.links_at(node).filter_map(|l| l.other_end(node).cloned()).collect()
    }

    pub fn profile(&self, name: &str) -> Option<&RateProfile> {
        self.profiles.get(name)
    }

    /// Cross-connects as written in the description file, at epoch 0.
    pub fn initial_switch_config(&self) -> SwitchConfig {
        SwitchConfig {
            epoch: 0,
            matchings: self.switches.values().map(|s| (s.id.clone(), s.cross_connects.clone())).collect(),
        }
    }

    /// Checks a desired matching against the ports of `switch`.
    pub fn check_matching(&self, switch: &SwitchId, matching: &Matching) -> Result<(), TopologyError> {
        let sw = self.switches.get(switch).ok_or_else(|| TopologyError::UnknownSwitch(switch.clone()))?;
        for (a, b) in matching.pairs() {
            for p in [a, b] {
                if sw.port(p).is_none() {
                    return Err(TopologyError::UnknownPort { switch: switch.clone(), port: p.clone() });
                }
            }
        }
        Ok(())
    }

    /// Total loss of a link sequence in `band`, including the insertion loss
    /// of every switch at an intermediate junction.
    pub fn path_loss(&self, links: &[LinkId], band: Band) -> Result<f64, TopologyError> {
        let nodes = self.path_nodes(links)?;
        let mut loss = 0.0;
        for l in links {
            loss += self.link(*l)?.loss(band);
        }
        if nodes.len() > 2 {
            let ins = self.settings.network.switch_insertion_loss_db;
            loss += nodes[1..nodes.len() - 1].iter().filter(|n| self.switch_at(n).is_some()).count() as f64 * ins;
        }
        Ok(loss)
    }

    /// Node sequence visited by a link sequence. Empty input gives an empty
    /// sequence. For a single link the order is (a, b).
    pub fn path_nodes(&self, links: &[LinkId]) -> Result<Vec<NodeId>, TopologyError> {
        let Some(first) = links.first() else { return Ok(Vec::new()) };
        let first = self.link(*first)?;
        let mut start = first.a.clone();
        if let Some(second) = links.get(1) {
            let second = self.link(*second)?;
            if second.touches(&first.a) && !second.touches(&first.b) {
                start = first.b.clone();
            }
        }
        let mut nodes = vec![start];
        for (i, l) in links.iter().enumerate() {
            let link = self.link(*l)?;
            let here = nodes.last().expect("non-empty");
            let next = link.other_end(here).ok_or(TopologyError::Disconnected(i))?.clone();
            if nodes.contains(&next) {
                return Err(TopologyError::NotSimple(i));
            }
            nodes.push(next);
        }
        Ok(nodes)
    }

    /// Same topology without `link`, its fixed modules, and its switch ports.
    pub fn without_link(&self, link: LinkId) -> Topology {
        let mut t = self.clone();
        t.links.remove(&link);
        let dropped: BTreeSet<ModuleId> =
            t.modules.values().filter(|m| m.fixed_link() == Some(link)).map(|m| m.id.clone()).collect();
        t.remove_modules(&dropped);
        for sw in t.switches.values_mut() {
            let gone: BTreeSet<PortId> =
                sw.ports.iter().filter(|p| p.binding == PortBinding::Link(link)).map(|p| p.id.clone()).collect();
            sw.ports.retain(|p| !gone.contains(&p.id));
            sw.cross_connects.0.retain(|(a, b)| !gone.contains(a) && !gone.contains(b));
        }
        t
    }

    /// Same topology keeping only modules from the listed vendors.
    pub fn retain_vendors(&self, vendors: &[&str]) -> Topology {
        let mut t = self.clone();
        let dropped: BTreeSet<ModuleId> = t
            .modules
            .values()
            .filter(|m| !vendors.contains(&m.vendor.as_str()))
            .map(|m| m.id.clone())
            .collect();
        t.remove_modules(&dropped);
        t
    }

    fn remove_modules(&mut self, dropped: &BTreeSet<ModuleId>) {
        self.modules.retain(|id, _| !dropped.contains(id));
        for n in self.nodes.values_mut() {
            n.installed_modules.retain(|m| !dropped.contains(m));
        }
        for sw in self.switches.values_mut() {
            let gone: BTreeSet<PortId> = sw
                .ports
                .iter()
                .filter(|p| matches!(&p.binding, PortBinding::Module(m) if dropped.contains(m)))
                .map(|p| p.id.clone())
                .collect();
            sw.ports.retain(|p| !gone.contains(&p.id));
            sw.cross_connects.0.retain(|(a, b)| !gone.contains(a) && !gone.contains(b));
        }
    }

    pub fn enumerate_feasible_channels(&self, states: &SwitchStates) -> Vec<ChannelCandidate> {
        feasibility::enumerate(self, states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = r#"
[[nodes]]
id = "A"
domain = "X"
[[nodes]]
id = "B"
domain = "X"
[[nodes]]
id = "C"
domain = "X"
[[links]]
id = 1
a = "A"
b = "B"
loss_c_db = 2.0
[[links]]
id = 2
a = "B"
b = "C"
loss_c_db = 3.5
loss_o_db = 6.0
[[switches]]
id = "swB"
node = "B"
ports = [{ id = "p1", link = 1 }, { id = "p2", link = 2 }]
"#;

    #[test]
    fn path_loss_adds_junction_switch() {
        let t = load_topology(CHAIN).unwrap();
        assert_eq!(t.path_loss(&[], Band::C).unwrap(), 0.0);
        assert_eq!(t.path_loss(&[LinkId(1)], Band::C).unwrap(), 2.0);
        assert_eq!(t.path_loss(&[LinkId(1), LinkId(2)], Band::C).unwrap(), 6.5);
        assert_eq!(t.path_loss(&[LinkId(2), LinkId(1)], Band::C).unwrap(), 6.5);
        assert_eq!(t.path_loss(&[LinkId(1), LinkId(2)], Band::O).unwrap(), 3.0 + 6.0 + 1.0);
        assert_eq!(t.path_loss(&[LinkId(9)], Band::C), Err(TopologyError::UnknownLink(LinkId(9))));
    }

    #[test]
    fn default_o_band_is_half_again() {
        let t = load_topology(CHAIN).unwrap();
        assert_eq!(t.links[&LinkId(1)].loss_o_db, 3.0);
    }

    #[test]
    fn disconnected_sequence_is_rejected() {
        let t = load_topology(CHAIN).unwrap();
        assert_eq!(t.path_loss(&[LinkId(1), LinkId(1)], Band::C), Err(TopologyError::NotSimple(1)));
    }

    #[test]
    fn matching_rejects_port_reuse() {
        let sw = SwitchId::from("s");
        let r = Matching::new(&sw, [("a".into(), "b".into()), ("b".into(), "c".into())]);
        assert!(matches!(r, Err(TopologyError::PortReused { .. })));
        let m = Matching::new(&sw, [("b".into(), "a".into())]).unwrap();
        assert!(m.connects(&"a".into(), &"b".into()));
        assert_eq!(m.peer(&"a".into()), Some(&PortId::from("b")));
    }
}
