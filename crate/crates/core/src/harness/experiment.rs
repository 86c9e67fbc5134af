//! Experiment files: one workload, a seed and an optional network config,
//! run in embedded mode to a metric store plus human summary lines.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::{check_single_use, AuditLog};
use crate::ids::NodeId;
use crate::network::Network;
use crate::topology::{load_topology, load_topology_file, Topology, MADQCI_TOML, PAIR_TOML};

use super::cloud::{run_cloud_load, CloudParams};
use super::metrics::{MetricRecord, MetricStore};
use super::opot::{run_opot, OpotParams};
use super::usecases::{run_independent, run_kaas, run_stream, IndependentParams, KaasParams, StreamParams};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    Opot(OpotParams),
    CloudLoad(CloudParams),
    EhealthStream(StreamParams),
    IndependentSources(IndependentParams),
    Kaas(KaasParams),
}

impl Workload {
    pub fn kind(&self) -> &'static str {
        match self {
            Workload::Opot(_) => "opot",
            Workload::CloudLoad(_) => "cloud_load",
            Workload::EhealthStream(_) => "ehealth_stream",
            Workload::IndependentSources(_) => "independent_sources",
            Workload::Kaas(_) => "kaas",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    pub seed: u64,
    /// Network description. Defaults to the metro deployment, or to the
    /// two-site pair for cloud load.
    pub config: Option<PathBuf>,
    /// Endpoints the OPoT flow crosses; when both are set a route between
    /// them must exist and its length sets the keys per packet.
    #[serde(default)]
    pub route: Option<(NodeId, NodeId)>,
    pub workload: Workload,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string().trim().to_owned()))?;
        if spec.id.trim().is_empty() {
            return field("id", "must not be empty");
        }
        Ok(spec)
    }

    /// Reads a spec; a relative `config` path is taken from the spec's folder.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Spec(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        if let (Some(c), Some(dir)) = (&spec.config, path.parent()) {
            if c.is_relative() && !c.exists() {
                spec.config = Some(dir.join(c));
            }
        }
        Ok(spec)
    }

    pub fn topology(&self) -> Result<Topology, ExperimentError> {
        let mut t = match &self.config {
            Some(p) => load_topology_file(p),
            None if matches!(self.workload, Workload::CloudLoad(_)) => load_topology(PAIR_TOML),
            None => load_topology(MADQCI_TOML),
        }
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
        t.settings.simulation.seed = self.seed;
        Ok(t)
    }
}

fn field<T>(field: &str, message: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Field { field: field.into(), message: message.into() })
}

fn kms_node(topo: &Topology, name: &str, id: &str) -> Result<(), ExperimentError> {
    let node = id.split(':').next().unwrap_or(id);
    match topo.node(&NodeId::from(node)) {
        None => field(name, format!("unknown node {node:?}")),
        Some(n) if !n.kms_enabled => field(name, format!("node {node:?} has no key manager")),
        Some(_) => Ok(()),
    }
}

fn positive(name: &str, v: f64) -> Result<(), ExperimentError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        field(name, format!("must be positive, got {v}"))
    }
}

fn validate(spec: &ExperimentSpec, topo: &Topology) -> Result<(), ExperimentError> {
    if let Some((a, b)) = &spec.route {
        kms_node(topo, "route[0]", a.as_str())?;
        kms_node(topo, "route[1]", b.as_str())?;
    }
    match &spec.workload {
        Workload::Opot(p) => {
            positive("workload.packet_rate_hz", p.packet_rate_hz)?;
            if let Some(f) = p.key_supply {
                positive("workload.key_supply", f)?;
            }
        }
        Workload::CloudLoad(p) => {
            kms_node(topo, "workload.master", p.master.as_str())?;
            kms_node(topo, "workload.slave", p.slave.as_str())?;
            positive("workload.duration_s", p.duration_s)?;
            positive("workload.supply_interval_s", p.supply_interval_s)?;
            if p.key_size_bytes == 0 {
                return field("workload.key_size_bytes", "must be at least 1");
            }
        }
        Workload::EhealthStream(p) => {
            kms_node(topo, "workload.master", p.master.as_str())?;
            kms_node(topo, "workload.slave", p.slave.as_str())?;
            positive("workload.target_mbps", p.target_mbps)?;
            positive("workload.rekey_bytes", p.rekey_bytes)?;
            positive("workload.step_s", p.step_s)?;
        }
        Workload::IndependentSources(p) => {
            kms_node(topo, "workload.src", p.src.as_str())?;
            kms_node(topo, "workload.dst", p.dst.as_str())?;
            if p.src == p.dst {
                return field("workload.dst", "must differ from src");
            }
        }
        Workload::Kaas(p) => {
            if p.nodes.is_empty() {
                return field("workload.nodes", "needs at least one node");
            }
            for (i, n) in p.nodes.iter().enumerate() {
                kms_node(topo, &format!("workload.nodes[{i}]"), n.as_str())?;
            }
            kms_node(topo, "workload.peer", p.peer.as_str())?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub id: String,
    pub kind: &'static str,
    pub store: MetricStore,
    /// One line per headline metric, `name: value`.
    pub summary: Vec<String>,
    /// JSON lines of the audit trail, when the workload touched a network.
    pub audit_jsonl: Option<String>,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let topo = spec.topology()?;
    validate(spec, &topo)?;
    let id = spec.id.as_str();
    let mut records: Vec<MetricRecord> = Vec::new();
    let mut summary = Vec::new();
    let audit = Arc::new(AuditLog::new());
    let mut touched_network = true;
    match &spec.workload {
        Workload::Opot(p) => {
            let mut p = p.clone();
            if let Some((a, b)) = &spec.route {
                let mut net = Network::new(topo, audit.clone());
                net.run_for(net.topology().settings.simulation.sync_delay_s + 1.0);
                let r = net.compute_route(a, b, 0.0).map_err(|e| ExperimentError::Run(e.to_string()))?;
                p.transit_nodes = r.nodes.len() as u64;
                summary.push(format!("route: {}", r.nodes.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(">")));
            } else {
                touched_network = false;
            }
            let r = run_opot(&p, spec.seed);
            records.extend(r.records(id));
            summary.push(format!("untagged_mean_ms: {:.4}", r.mean_untagged()));
            summary.push(format!("tagged_mean_ms: {:.4}", r.mean_tagged()));
            summary.push(format!("ratio: {:.4}", r.ratio()));
            summary.push(format!("spikes: {}", r.spikes));
        }
        Workload::CloudLoad(p) => {
            let kms = crate::kms::Kms::new(&topo, audit.clone());
            let s = run_cloud_load(&kms, p, spec.seed).map_err(|e| ExperimentError::Run(e.to_string()))?;
            let report = check_single_use(&audit.records());
            let t = s.duration_s;
            records.push(MetricRecord::new(id, t, "issued", s.issued as f64, "requests"));
            records.push(MetricRecord::new(id, t, "served", s.served as f64, "requests"));
            records.push(MetricRecord::new(id, t, "rejected", s.rejected_total() as f64, "requests"));
            records.push(MetricRecord::new(id, t, "throughput", s.throughput_rps, "req/s"));
            summary.push(format!("issued: {}", s.issued));
            summary.push(format!("served: {}", s.served));
            summary.push(format!("rejected: {}", s.rejected_total()));
            summary.push(format!("in_flight: {}", s.in_flight));
            summary.push(format!("throughput_rps: {:.3}", s.throughput_rps));
            summary.push(format!("conservation: {}", pass(s.conserved())));
            summary.push(format!(
                "unique-key audit: {}",
                pass(report.is_clean() && s.duplicate_key_ids == 0 && s.mismatched == 0)
            ));
        }
        Workload::EhealthStream(p) => {
            let mut net = Network::new(topo, audit.clone());
            let s = run_stream(&mut net, p, id, &mut records);
            summary.push(format!("achieved_mbps: {:.3}", s.achieved_mbps));
            summary.push(format!("keys_used: {}", s.keys_used));
            summary.push(format!("stalled_steps: {}/{}", s.stalled_steps, s.steps));
        }
        Workload::IndependentSources(p) => {
            let mut net = Network::new(topo, audit.clone());
            let s = run_independent(&mut net, p, id, &mut records);
            summary.push(format!("plain_mean_ms: {:.4} ({} delivered)", s.mean_plain_ms, s.plain_delivered));
            summary.push(format!("combined_mean_ms: {:.4} ({} delivered)", s.mean_combined_ms, s.combined_delivered));
            summary.push(format!("failed: {}", s.failed));
        }
        Workload::Kaas(p) => {
            let mut net = Network::new(topo, audit.clone());
            let s = run_kaas(&mut net, p, id, &mut records);
            summary.push(format!("authorized: {}", s.authorized));
            summary.push(format!("refused: {}", s.refused));
            summary.push(format!("sessions: {}", s.sessions));
            summary.push(format!("chunks: {}", s.chunks));
            for (e, n) in &s.errors {
                summary.push(format!("error[{e}]: {n}"));
            }
        }
    }
    // Records of one run come out time-ordered except OPoT's two series,
    // which interleave by packet; a stable sort keeps ties in emission order.
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut store = MetricStore::new();
    for r in records {
        store.push(r).map_err(|e| ExperimentError::Run(e.to_string()))?;
    }
    Ok(ExperimentOutcome {
        id: id.to_owned(),
        kind: spec.workload.kind(),
        store,
        summary,
        audit_jsonl: touched_network.then(|| audit.to_jsonl()),
    })
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

