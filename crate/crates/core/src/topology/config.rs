//! Network description file: parsing and invariant checks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::*;
use crate::settings::{ControllerSettings, ForwardingSettings, KmsSettings, NetworkSettings, SimulationSettings};

/// Raw form of the description file, before any cross-checking.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub kms: KmsSettings,
    #[serde(default)]
    pub forwarding: ForwardingSettings,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    links: Vec<RawLink>,
    #[serde(default)]
    profiles: Vec<RateProfile>,
    #[serde(default)]
    modules: Vec<RawModule>,
    #[serde(default)]
    switches: Vec<RawSwitch>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    domain: String,
    #[serde(default)]
    border: bool,
    #[serde(default = "yes")]
    kms: bool,
    #[serde(default)]
    remote: bool,
    #[serde(default)]
    apps: Vec<String>,
}

fn yes() -> bool {
    true
}

fn one() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    id: u16,
    a: String,
    b: String,
    #[serde(default)]
    length_km: f64,
    loss_c_db: f64,
    loss_o_db: Option<f64>,
    #[serde(default = "one")]
    fiber_pairs: u32,
    #[serde(default)]
    classical_channels: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    id: String,
    node: String,
    vendor: String,
    technology: Technology,
    role: Role,
    band: Band,
    channel: Option<String>,
    channels: Option<Vec<String>>,
    tunable: Option<bool>,
    max_loss_db: f64,
    profile: String,
    #[serde(default)]
    channel_profiles: BTreeMap<String, String>,
    qber_pct: Option<f64>,
    link: Option<u16>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    id: String,
    node: String,
    #[serde(default)]
    passband: Vec<String>,
    ports: Vec<RawPort>,
    #[serde(default)]
    cross_connects: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPort {
    id: String,
    link: Option<u16>,
    module: Option<String>,
}

/// The metropolitan deployment shipped with the repository.
pub const MADQCI_TOML: &str = include_str!("../../../../configs/madqci.toml");
/// Two sites joined by one module pair.
pub const PAIR_TOML: &str = include_str!("../../../../configs/pair.toml");

pub fn load_topology_file(path: impl AsRef<Path>) -> Result<Topology, TopologyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| TopologyError::Io { path: path.display().to_string(), message: e.to_string() })?;
    load_topology(&text)
}

pub fn load_topology(text: &str) -> Result<Topology, TopologyError> {
    let doc: ConfigDocument = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        TopologyError::Parse { line, column, message: e.message().to_owned() }
    })?;
    build(doc)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn dup(kind: &'static str, id: impl ToString) -> TopologyError {
    TopologyError::Duplicate { kind, id: id.to_string() }
}

fn unknown(owner: impl Into<String>, kind: &'static str, id: impl ToString) -> TopologyError {
    TopologyError::UnknownReference { owner: owner.into(), kind, id: id.to_string() }
}

fn valid_token(band: Band, w: &str) -> bool {
    match band {
        Band::O => w == "O",
        Band::C => w == "C" || w.strip_prefix("C-").is_some_and(|n| n.parse::<u32>().is_ok()),
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn build(doc: ConfigDocument) -> Result<Topology, TopologyError> {
    let settings = Settings {
        network: doc.network,
        simulation: doc.simulation,
        kms: doc.kms,
        forwarding: doc.forwarding,
        controller: doc.controller,
    };
    check_settings(&settings)?;
    let net = &settings.network;

    if doc.nodes.is_empty() {
        return Err(TopologyError::NoNodes);
    }
    let mut nodes = BTreeMap::new();
    for n in doc.nodes {
        if n.id.is_empty() || n.id.contains(':') {
            return Err(TopologyError::invariant("nodes.id", format!("{:?} must be non-empty without ':'", n.id)));
        }
        let id = NodeId::new(&n.id);
        let node = Node {
            id: id.clone(),
            domain: n.domain,
            is_border: n.border,
            kms_enabled: n.kms,
            remote: n.remote,
            apps: n.apps,
            has_optical_switch: false,
            installed_modules: Vec::new(),
        };
        if !node.kms_enabled && !node.apps.is_empty() {
            return Err(TopologyError::invariant(
                format!("nodes.{}.apps", n.id),
                "relay nodes without KMS cannot host applications",
            ));
        }
        if nodes.insert(id, node).is_some() {
            return Err(dup("node", n.id));
        }
    }

    let in_bounds = |x: f64| x.is_finite() && x >= net.min_loss_db && x <= net.max_loss_db;
    let mut links = BTreeMap::new();
    for l in doc.links {
        let owner = format!("link {}", l.id);
        for end in [&l.a, &l.b] {
            if !nodes.contains_key(end.as_str()) {
                return Err(unknown(&owner, "node", end));
            }
        }
        if l.a == l.b {
            return Err(TopologyError::invariant(format!("links.{}.b", l.id), "link endpoints must differ"));
        }
        if !(l.length_km >= 0.0) {
            return Err(TopologyError::invariant(format!("links.{}.length_km", l.id), "must be >= 0"));
        }
        if !in_bounds(l.loss_c_db) {
            return Err(TopologyError::invariant(
                format!("links.{}.loss_c_db", l.id),
                format!("{} outside [{}, {}] dB", l.loss_c_db, net.min_loss_db, net.max_loss_db),
            ));
        }
        let loss_o = l.loss_o_db.unwrap_or_else(|| round2(l.loss_c_db * net.o_band_factor));
        if !in_bounds(loss_o) {
            return Err(TopologyError::invariant(
                format!("links.{}.loss_o_db", l.id),
                format!("{loss_o} outside [{}, {}] dB", net.min_loss_db, net.max_loss_db),
            ));
        }
        if loss_o < l.loss_c_db {
            return Err(TopologyError::invariant(
                format!("links.{}.loss_o_db", l.id),
                format!("O-band loss {loss_o} is below C-band loss {}", l.loss_c_db),
            ));
        }
        if l.fiber_pairs < 1 {
            return Err(TopologyError::invariant(format!("links.{}.fiber_pairs", l.id), "must be >= 1"));
        }
        let link = FiberLink {
            id: LinkId(l.id),
            a: NodeId::new(l.a),
            b: NodeId::new(l.b),
            length_km: l.length_km,
            loss_c_db: l.loss_c_db,
            loss_o_db: loss_o,
            fiber_pairs: l.fiber_pairs,
            classical_channels: l.classical_channels,
        };
        if links.insert(link.id, link).is_some() {
            return Err(dup("link", l.id));
        }
    }

    let mut profiles = BTreeMap::new();
    for p in doc.profiles {
        check_profile(&p)?;
        let name = p.name.clone();
        if profiles.insert(name.clone(), p).is_some() {
            return Err(dup("profile", name));
        }
    }

    let mut modules = BTreeMap::new();
    for m in doc.modules {
        let owner = format!("module {}", m.id);
        let field = |f: &str| format!("modules.{}.{f}", m.id);
        let node_id = NodeId::new(&m.node);
        if !nodes.contains_key(&node_id) {
            return Err(unknown(&owner, "node", &m.node));
        }
        let channels = match (m.channel, m.channels) {
            (Some(c), None) => vec![c],
            (None, Some(cs)) if !cs.is_empty() => cs,
            _ => return Err(TopologyError::invariant(field("channels"), "give exactly one of channel or channels")),
        };
        let mut seen = BTreeSet::new();
        for c in &channels {
            if !valid_token(m.band, c) {
                return Err(TopologyError::invariant(
                    field("channels"),
                    format!("{c:?} is not a {} band wavelength", m.band),
                ));
            }
            if !seen.insert(c) {
                return Err(dup("wavelength", c));
            }
        }
        let tunable = m.tunable.unwrap_or(channels.len() > 1);
        if !tunable && channels.len() > 1 {
            return Err(TopologyError::invariant(field("tunable"), "fixed-wavelength module lists several channels"));
        }
        if !in_bounds(m.max_loss_db) {
            return Err(TopologyError::invariant(field("max_loss_db"), format!("{} out of bounds", m.max_loss_db)));
        }
        for (w, p) in std::iter::once((None, &m.profile)).chain(m.channel_profiles.iter().map(|(w, p)| (Some(w), p))) {
            let prof = profiles.get(p).ok_or_else(|| unknown(&owner, "profile", p))?;
            if let Some(w) = w {
                if !channels.contains(w) {
                    return Err(TopologyError::invariant(
                        field("channel_profiles"),
                        format!("{w:?} is not one of the module's channels"),
                    ));
                }
            }
            let last = prof.anchors.last().expect("checked non-empty");
            if last.loss_db > m.max_loss_db {
                return Err(TopologyError::invariant(
                    format!("profiles.{p}.anchors"),
                    format!("anchor at {} dB exceeds max_loss_db {} of {}", last.loss_db, m.max_loss_db, m.id),
                ));
            }
        }
        if let Some(q) = m.qber_pct {
            if m.technology != Technology::DV {
                return Err(TopologyError::invariant(field("qber_pct"), "only DV modules report QBER"));
            }
            if !(0.0..=25.0).contains(&q) {
                return Err(TopologyError::invariant(field("qber_pct"), format!("{q} outside [0, 25]")));
            }
        }
        let attachment = match m.link {
            Some(l) => {
                let link = links.get(&LinkId(l)).ok_or_else(|| unknown(&owner, "link", l))?;
                if !link.touches(&node_id) {
                    return Err(TopologyError::invariant(field("link"), format!("link {l} does not reach {}", m.node)));
                }
                Attachment::Link(LinkId(l))
            }
            // Resolved once the switches are read.
            None => Attachment::Switch(SwitchId::new(""), PortId::new("")),
        };
        let spec = QkdModuleSpec {
            id: ModuleId::new(&m.id),
            node: node_id,
            vendor: m.vendor,
            technology: m.technology,
            role: m.role,
            band: m.band,
            channels,
            wavelength_tunable: tunable,
            max_tolerated_loss_db: m.max_loss_db,
            profile: m.profile,
            channel_profiles: m.channel_profiles,
            nominal_qber_pct: m.qber_pct,
            attachment,
        };
        if modules.insert(spec.id.clone(), spec).is_some() {
            return Err(dup("module", m.id));
        }
    }

    let mut switches = BTreeMap::new();
    for s in doc.switches {
        let owner = format!("switch {}", s.id);
        let sid = SwitchId::new(&s.id);
        let node_id = NodeId::new(&s.node);
        let node = nodes.get_mut(&node_id).ok_or_else(|| unknown(&owner, "node", &s.node))?;
        if node.has_optical_switch {
            return Err(TopologyError::invariant(format!("switches.{}.node", s.id), "node already hosts a switch"));
        }
        node.has_optical_switch = true;
        for w in &s.passband {
            if !valid_token(Band::C, w) && !valid_token(Band::O, w) {
                return Err(TopologyError::invariant(format!("switches.{}.passband", s.id), format!("bad token {w:?}")));
            }
        }
        let mut ports = Vec::new();
        for p in s.ports {
            let pid = PortId::new(&p.id);
            if ports.iter().any(|q: &Port| q.id == pid) {
                return Err(dup("port", format!("{}/{}", s.id, p.id)));
            }
            let binding = match (p.link, p.module) {
                (Some(l), None) => {
                    let link = links.get(&LinkId(l)).ok_or_else(|| unknown(&owner, "link", l))?;
                    if !link.touches(&node_id) {
                        return Err(TopologyError::invariant(
                            format!("switches.{}.ports.{}", s.id, p.id),
                            format!("link {l} does not reach {}", s.node),
                        ));
                    }
                    if ports.iter().any(|q: &Port| q.binding == PortBinding::Link(LinkId(l))) {
                        return Err(dup("link port", format!("{}/{l}", s.id)));
                    }
                    PortBinding::Link(LinkId(l))
                }
                (None, Some(m)) => {
                    let spec = modules.get_mut(m.as_str()).ok_or_else(|| unknown(&owner, "module", &m))?;
                    if spec.node != node_id {
                        return Err(TopologyError::invariant(
                            format!("switches.{}.ports.{}", s.id, p.id),
                            format!("module {m} is not installed at {}", s.node),
                        ));
                    }
                    match &spec.attachment {
                        Attachment::Switch(existing, _) if existing.as_str().is_empty() => {
                            spec.attachment = Attachment::Switch(sid.clone(), pid.clone());
                        }
                        _ => {
                            return Err(TopologyError::invariant(
                                format!("modules.{m}"),
                                "module is already attached to a link or port",
                            ))
                        }
                    }
                    PortBinding::Module(ModuleId::new(m))
                }
                _ => {
                    return Err(TopologyError::invariant(
                        format!("switches.{}.ports.{}", s.id, p.id),
                        "a port binds exactly one of link or module",
                    ))
                }
            };
            ports.push(Port { id: pid, binding });
        }
        let cross_connects =
            Matching::new(&sid, s.cross_connects.into_iter().map(|(a, b)| (PortId::new(a), PortId::new(b))))?;
        let sw = OpticalSwitch { id: sid.clone(), node: node_id, passband: s.passband, ports, cross_connects };
        for (a, b) in sw.cross_connects.pairs() {
            for p in [a, b] {
                if sw.port(p).is_none() {
                    return Err(TopologyError::UnknownPort { switch: sid.clone(), port: p.clone() });
                }
            }
        }
        if switches.insert(sid, sw).is_some() {
            return Err(dup("switch", s.id));
        }
    }

    for m in modules.values() {
        if matches!(&m.attachment, Attachment::Switch(s, _) if s.as_str().is_empty()) {
            return Err(TopologyError::invariant(
                format!("modules.{}.link", m.id),
                "module needs a link or a switch port",
            ));
        }
        nodes.get_mut(&m.node).expect("checked").installed_modules.push(m.id.clone());
    }

    for l in links.values() {
        let (na, nb) = (&nodes[&l.a], &nodes[&l.b]);
        if na.domain != nb.domain && !(na.is_border && nb.is_border) {
            return Err(TopologyError::invariant(
                format!("links.{}", l.id),
                "inter-domain links must join two border nodes",
            ));
        }
    }
    for n in nodes.values() {
        if n.is_border
            && !links.values().any(|l| l.touches(&n.id) && nodes[l.other_end(&n.id).unwrap()].domain != n.domain)
        {
            return Err(TopologyError::invariant(
                format!("nodes.{}.border", n.id),
                "border node terminates no inter-domain link",
            ));
        }
    }

    Ok(Topology { settings, nodes, links, switches, modules, profiles })
}

fn check_profile(p: &RateProfile) -> Result<(), TopologyError> {
    let field = format!("profiles.{}.anchors", p.name);
    if p.anchors.is_empty() {
        return Err(TopologyError::invariant(field, "at least one anchor is required"));
    }
    for (i, a) in p.anchors.iter().enumerate() {
        if !(a.loss_db >= 0.0) || !a.loss_db.is_finite() {
            return Err(TopologyError::invariant(&field, format!("anchor {i}: loss must be >= 0")));
        }
        if !(a.skr_kbps > 0.0) || !a.skr_kbps.is_finite() {
            return Err(TopologyError::invariant(&field, format!("anchor {i}: rate must be > 0")));
        }
        if i > 0 {
            let prev = &p.anchors[i - 1];
            if a.loss_db <= prev.loss_db {
                return Err(TopologyError::invariant(&field, format!("anchor {i}: loss must strictly increase")));
            }
            if a.skr_kbps > prev.skr_kbps {
                return Err(TopologyError::invariant(&field, format!("anchor {i}: rate must not increase")));
            }
        }
    }
    Ok(())
}

fn check_settings(s: &Settings) -> Result<(), TopologyError> {
    let net = &s.network;
    if !(net.min_loss_db >= 0.0 && net.max_loss_db >= net.min_loss_db) {
        return Err(TopologyError::invariant("network.max_loss_db", "bounds must satisfy 0 <= min <= max"));
    }
    if !(net.switch_insertion_loss_db >= 0.0) {
        return Err(TopologyError::invariant("network.switch_insertion_loss_db", "must be >= 0"));
    }
    if !(net.o_band_factor >= 1.0) {
        return Err(TopologyError::invariant("network.o_band_factor", "must be >= 1"));
    }
    let sim = &s.simulation;
    if !(sim.jitter_sigma >= 0.0) {
        return Err(TopologyError::invariant("simulation.jitter_sigma", "must be >= 0"));
    }
    if !(sim.sync_delay_s >= 0.0) {
        return Err(TopologyError::invariant("simulation.sync_delay_s", "must be >= 0"));
    }
    if !(sim.tick_s > 0.0) {
        return Err(TopologyError::invariant("simulation.tick_s", "must be > 0"));
    }
    if sim.block_size == 0 {
        return Err(TopologyError::invariant("simulation.block_size", "must be >= 1"));
    }
    let kms = &s.kms;
    if kms.min_key_size_bytes == 0 || kms.min_key_size_bytes > kms.max_key_size_bytes {
        return Err(TopologyError::invariant("kms.min_key_size_bytes", "must be in [1, max_key_size_bytes]"));
    }
    if !(kms.admission_fraction > 0.0 && kms.admission_fraction <= 1.0) {
        return Err(TopologyError::invariant("kms.admission_fraction", "must be in (0, 1]"));
    }
    if kms.max_key_per_request == 0 {
        return Err(TopologyError::invariant("kms.max_key_per_request", "must be >= 1"));
    }
    if !(kms.ttl_s > 0.0) {
        return Err(TopologyError::invariant("kms.ttl_s", "must be > 0"));
    }
    let c = &s.controller;
    if !(c.heartbeat_interval_s > 0.0) || c.missed_heartbeats == 0 || !(c.rate_window_s > 0.0) {
        return Err(TopologyError::invariant("controller", "intervals must be positive"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_node_list() {
        assert_eq!(load_topology("").unwrap_err(), TopologyError::NoNodes);
    }

    #[test]
    fn parse_error_has_position() {
        let err = load_topology("[[nodes]]\nid = \"A\"\ndomain = 3\n").unwrap_err();
        match err {
            TopologyError::Parse { line, column, .. } => assert_eq!((line, column), (3, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_link_endpoint() {
        let err = load_topology(
            "[[nodes]]\nid = \"A\"\ndomain = \"X\"\n[[links]]\nid = 1\na = \"A\"\nb = \"Z\"\nloss_c_db = 1.0\n",
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::UnknownReference { owner: "link 1".into(), kind: "node", id: "Z".into() });
    }

    #[test]
    fn o_band_below_c_band() {
        let err = load_topology(
            "[[nodes]]\nid = \"A\"\ndomain = \"X\"\n[[nodes]]\nid = \"B\"\ndomain = \"X\"\n\
             [[links]]\nid = 1\na = \"A\"\nb = \"B\"\nloss_c_db = 5.0\nloss_o_db = 4.0\n",
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::Invariant { ref field, .. } if field == "links.1.loss_o_db"), "{err}");
    }

    #[test]
    fn profile_must_decrease() {
        let p = RateProfile {
            name: "p".into(),
            anchors: vec![
                RateAnchor { loss_db: 1.0, skr_kbps: 1.0, row: None },
                RateAnchor { loss_db: 2.0, skr_kbps: 2.0, row: None },
            ],
        };
        assert!(check_profile(&p).is_err());
    }
}
