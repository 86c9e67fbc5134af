use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use qkdnet_core::audit::AuditLog;
use qkdnet_core::controller::{SwitchCommand, SwitchResult};
use qkdnet_core::harness::{run_experiment, ExperimentError, ExperimentSpec, Format};
use qkdnet_core::ids::{NodeId, PortId, SwitchId};
use qkdnet_core::network::Network;
use qkdnet_core::scenario::{run_scenario, Scenario};
use qkdnet_core::time::SimTime;
use qkdnet_core::topology::{load_topology_file, SwitchStates, Topology};
use qkdnet_service::{start, ClockMode, ServiceConfig};
use serde_json::{json, Value};

use crate::client::Northbound;
use crate::{Failure, Mode};

fn load(config: &Path) -> Result<Topology, Failure> {
    load_topology_file(config).map_err(|e| Failure::config(format!("{}: {e}", config.display())))
}

fn emit(v: &Value) {
    use std::io::Write;
    // A closed pipe on stdout is the reader's choice, not a failure.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

// ------------------------------------------------------------------ validate

pub fn validate(config: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let t = load(config)?;
    let any = t.enumerate_feasible_channels(&SwitchStates::Any);
    let initial = t.enumerate_feasible_channels(&SwitchStates::Given(t.initial_switch_config()));
    let mut by_vendor: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &any {
        *by_vendor.entry(c.vendor.as_str()).or_default() += 1;
    }
    let borders: Vec<&str> = t.nodes.values().filter(|n| n.is_border).map(|n| n.id.as_str()).collect();
    println!("config: {}", config.display());
    println!("network: {}", t.settings.network.name);
    println!(
        "nodes: {} ({} sites), domains: {}, links: {}, switches: {}, modules: {}",
        t.nodes.len(),
        t.sites().count(),
        t.domains().len(),
        t.links.len(),
        t.switches.len(),
        t.modules.len()
    );
    println!("border nodes: {}", if borders.is_empty() { "none".into() } else { borders.join(", ") });
    println!("{} feasible channels", any.len());
    for (v, n) in &by_vendor {
        println!("  {v}: {n}");
    }
    println!("{} channels under the initial switch state", initial.len());
    println!("invariants: ok");
    tracing::info!(elapsed_ms = started.elapsed().as_millis() as u64, "validated");
    Ok(())
}

// ------------------------------------------------------------------ run

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "simulated")]
    pub mode: Mode,
    /// Overrides the seed in the config. Ignored with a warning in live-clock mode.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "QKDNET_HTTP_ADDR", default_value = "127.0.0.1:8080")]
    pub http: SocketAddr,
    #[arg(long, env = "QKDNET_SESSION_ADDR", default_value = "127.0.0.1:8081")]
    pub session: SocketAddr,
    /// Simulated seconds per wall second in live-clock mode.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Timed command list replayed before serving (simulated mode only).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Append-only audit log, written as JSON lines.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Write the end-of-run status snapshot here.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Exit after the scenario instead of serving.
    #[arg(long)]
    pub no_serve: bool,
}

fn make_audit(path: Option<&Path>) -> Result<Arc<AuditLog>, Failure> {
    match path {
        Some(p) => AuditLog::with_file(p)
            .map(Arc::new)
            .map_err(|e| Failure::runtime(format!("cannot open audit log {}: {e}", p.display()))),
        None => Ok(Arc::new(AuditLog::new())),
    }
}

pub fn run(a: RunArgs) -> Result<(), Failure> {
    let mut t = load(&a.config)?;
    match (a.mode, a.seed) {
        (Mode::Simulated, Some(s)) => t.settings.simulation.seed = s,
        (Mode::LiveClock, Some(_)) => tracing::warn!("--seed is ignored in live-clock mode"),
        _ => {}
    }
    if a.mode == Mode::LiveClock && (a.scenario.is_some() || a.no_serve) {
        return Err(Failure::usage("--scenario and --no-serve need simulated mode"));
    }
    if !(a.speed > 0.0 && a.speed.is_finite()) {
        return Err(Failure::usage("--speed must be positive"));
    }
    let scenario = a.scenario.as_deref().map(Scenario::load).transpose().map_err(Failure::config)?;
    let audit = make_audit(a.audit.as_deref())?;
    let mut net = Network::new(t, audit.clone());
    if let Some(s) = &scenario {
        for o in run_scenario(&mut net, s) {
            println!("{}", serde_json::to_string(&o).expect("outcomes serialize"));
        }
    }
    if let Some(p) = &a.snapshot {
        let text = serde_json::to_string_pretty(&net.snapshot()).expect("snapshot serializes");
        std::fs::write(p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
    }
    if a.no_serve {
        return audit.flush().map_err(Failure::runtime);
    }

    let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    let cfg = ServiceConfig {
        http_addr: a.http,
        session_addr: a.session,
        mode: if a.mode == Mode::LiveClock { ClockMode::LiveClock } else { ClockMode::Simulated },
        speed: a.speed,
        ..Default::default()
    };
    rt.block_on(async move {
        let svc = start(net, cfg).await.map_err(Failure::runtime)?;
        println!("{}", json!({ "http": svc.http_addr.to_string(), "session": svc.session_addr.to_string() }));
        shutdown_signal().await;
        tracing::info!("shutting down");
        svc.shutdown().await.map_err(Failure::runtime)
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

// ------------------------------------------------------------------ experiment

#[derive(Args)]
pub struct ExperimentArgs {
    pub spec: PathBuf,
    /// Directory for metric exports.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn experiment(a: ExperimentArgs) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::load(&a.spec).map_err(Failure::config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = run_experiment(&spec).map_err(|e| match e {
        ExperimentError::Run(_) => Failure::runtime(e),
        _ => Failure::config(e),
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    let write = |name: String, text: &str| -> Result<PathBuf, Failure> {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
        Ok(p)
    };
    let mut written = Vec::new();
    for (ext, f) in [("csv", Format::Csv), ("jsonl", Format::Jsonl)] {
        let text = out.store.export(&out.id, f).unwrap_or_default();
        written.push(write(format!("{}.{ext}", out.id), &text)?);
    }
    if let Some(audit) = &out.audit_jsonl {
        written.push(write(format!("{}.audit.jsonl", out.id), audit)?);
    }
    println!("experiment: {} ({})", out.id, out.kind);
    for line in &out.summary {
        println!("{line}");
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ clients

/// Where a client command gets its network from: a running service, or a
/// network built in-process from a config file.
#[derive(Args)]
pub struct Target {
    #[arg(long, env = "QKDNET_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Build the network in-process instead of asking a server.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Simulated seconds to run the in-process network first.
    #[arg(long, default_value_t = 61.0)]
    pub at: f64,
}

impl Target {
    fn embedded(&self) -> Result<Option<Network>, Failure> {
        let Some(c) = &self.config else { return Ok(None) };
        if !(self.at >= 0.0 && self.at.is_finite()) {
            return Err(Failure::usage("--at must be a non-negative number of seconds"));
        }
        let mut net = Network::new(load(c)?, Arc::new(AuditLog::new()));
        net.run_until(SimTime::from_secs_f64(self.at));
        Ok(Some(net))
    }
}

#[derive(Args)]
pub struct RouteArgs {
    pub src: String,
    pub dst: String,
    #[arg(long, default_value_t = 0.0)]
    pub min_bps: f64,
    #[command(flatten)]
    pub target: Target,
}

pub fn route(a: RouteArgs) -> Result<(), Failure> {
    let plan = match a.target.embedded()? {
        Some(net) => {
            let r = net.compute_route(&NodeId::new(&a.src), &NodeId::new(&a.dst), a.min_bps).map_err(Failure::runtime)?;
            serde_json::to_value(r).expect("routes serialize")
        }
        None => Northbound::new(&a.target.server)
            .post("/routes", &json!({ "src": a.src, "dst": a.dst, "qos": { "min_bps": a.min_bps } }))?,
    };
    emit(&plan);
    Ok(())
}

#[derive(Args)]
pub struct SwitchArgs {
    pub switch: String,
    /// Cross-connects as PORT:PORT, e.g. tx:l3 rx:l2. None clears the switch.
    pub cross_connects: Vec<String>,
    #[command(flatten)]
    pub target: Target,
}

fn parse_pairs(items: &[String]) -> Result<Vec<(String, String)>, Failure> {
    items
        .iter()
        .map(|s| match s.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_owned(), b.to_owned())),
            _ => Err(Failure::usage(format!("cross-connect {s:?} is not PORT:PORT"))),
        })
        .collect()
}

pub fn switch(a: SwitchArgs) -> Result<(), Failure> {
    let pairs = parse_pairs(&a.cross_connects)?;
    let entry = match a.target.embedded()? {
        Some(mut net) => {
            if !net.topology().switches.contains_key(a.switch.as_str()) {
                return Err(Failure::runtime(format!("unknown switch {}", a.switch)));
            }
            let e = net.apply_switch(SwitchCommand {
                switch_id: SwitchId::new(&a.switch),
                cross_connects: pairs.into_iter().map(|(x, y)| (PortId::new(x), PortId::new(y))).collect(),
                issued_at: SimTime(0),
            });
            if e.result == SwitchResult::Rejected {
                emit(&serde_json::to_value(&e).expect("entries serialize"));
                return Err(Failure::runtime(format!("rejected: {}", e.reason.unwrap_or_default())));
            }
            serde_json::to_value(e).expect("entries serialize")
        }
        None => Northbound::new(&a.target.server)
            .post(&format!("/switch/{}/config", a.switch), &json!({ "cross_connects": pairs }))?,
    };
    emit(&entry);
    Ok(())
}

#[derive(Args)]
pub struct StatusArgs {
    #[command(flatten)]
    pub target: Target,
}

pub fn status(a: StatusArgs) -> Result<(), Failure> {
    let snap = match a.target.embedded()? {
        Some(net) => serde_json::to_value(net.snapshot()).expect("snapshots serialize"),
        None => Northbound::new(&a.target.server).get("/status")?,
    };
    emit(&snap);
    Ok(())
}
