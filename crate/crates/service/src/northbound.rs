//! Operator-facing HTTP API. Bodies are described in docs/northbound.schema.json.

use std::collections::BTreeMap;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use qkdnet_core::controller::{JournalEntry, RoutePlan, SwitchCommand, SwitchResult};
use qkdnet_core::harness::Format;
use qkdnet_core::ids::{LinkId, NodeId, PortId, SwitchId};
use qkdnet_core::network::{ChannelSummary, DeliveryReceipt, PairSummary, Snapshot};
use qkdnet_core::scenario::parse_policy;
use qkdnet_core::time::SimTime;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ApiError;
use crate::state::{AppState, ClockMode, NETWORK_SERIES};

pub fn routes() -> Router<AppState> {
    Router::new()
        .route("/topology", get(topology))
        .route("/channels", get(channels))
        .route("/status", get(status))
        .route("/journal", get(journal))
        .route("/switch/{id}/config", post(switch_config))
        .route("/routes", post(routes_post))
        .route("/keys/provision", post(provision))
        .route("/metrics", get(metrics))
        .route("/entropy", get(entropy))
        .route("/clock/advance", post(advance))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct NodeView {
    pub id: NodeId,
    pub domain: String,
    pub border: bool,
    pub kms_enabled: bool,
    pub remote: bool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct LinkView {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub loss_c_db: f64,
    pub loss_o_db: f64,
    pub inter_domain: bool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SwitchView {
    pub id: SwitchId,
    pub node: NodeId,
    pub ports: Vec<PortId>,
    pub cross_connects: Vec<(PortId, PortId)>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TopologyView {
    pub name: String,
    pub domains: Vec<String>,
    pub nodes: Vec<NodeView>,
    pub links: Vec<LinkView>,
    pub switches: Vec<SwitchView>,
    pub epoch: u64,
}

async fn topology(State(s): State<AppState>) -> Json<TopologyView> {
    let g = s.inner.lock();
    let t = g.net.topology();
    let cfg = g.net.controller().switch_config();
    Json(TopologyView {
        name: t.settings.network.name.clone(),
        domains: t.domains().into_iter().map(str::to_owned).collect(),
        nodes: t
            .nodes
            .values()
            .map(|n| NodeView {
                id: n.id.clone(),
                domain: n.domain.clone(),
                border: n.is_border,
                kms_enabled: n.kms_enabled,
                remote: n.remote,
            })
            .collect(),
        links: t
            .links
            .values()
            .map(|l| LinkView {
                id: l.id,
                a: l.a.clone(),
                b: l.b.clone(),
                loss_c_db: l.loss_c_db,
                loss_o_db: l.loss_o_db,
                inter_domain: t.is_inter_domain(l),
            })
            .collect(),
        switches: t
            .switches
            .values()
            .map(|sw| SwitchView {
                id: sw.id.clone(),
                node: sw.node.clone(),
                ports: sw.ports.iter().map(|p| p.id.clone()).collect(),
                cross_connects: cfg.matchings.get(&sw.id).map(|m| m.pairs().cloned().collect()).unwrap_or_default(),
            })
            .collect(),
        epoch: cfg.epoch,
    })
}

#[derive(Serialize, Debug, Clone)]
pub struct ChannelsView {
    pub t_s: f64,
    pub epoch: u64,
    pub channels: Vec<ChannelSummary>,
    pub pairs: Vec<PairSummary>,
}

async fn channels(State(s): State<AppState>) -> Json<ChannelsView> {
    let snap = s.inner.lock().net.snapshot();
    Json(ChannelsView { t_s: snap.t_s, epoch: snap.epoch, channels: snap.channels, pairs: snap.pairs })
}

#[derive(Serialize)]
struct StatusView {
    mode: ClockMode,
    #[serde(flatten)]
    snapshot: Snapshot,
}

async fn status(State(s): State<AppState>) -> Response {
    let snapshot = s.inner.lock().net.snapshot();
    Json(StatusView { mode: s.mode, snapshot }).into_response()
}

async fn journal(State(s): State<AppState>) -> Json<Vec<JournalEntry>> {
    Json(s.inner.lock().net.controller().journal().to_vec())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchBody {
    pub cross_connects: Vec<(PortId, PortId)>,
}

async fn switch_config(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<SwitchBody>,
) -> Result<Response, ApiError> {
    let mut g = s.inner.lock();
    if !g.net.topology().switches.contains_key(id.as_str()) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_switch", format!("unknown switch {id}")));
    }
    let e = g.net.apply_switch(SwitchCommand {
        switch_id: SwitchId::from(id),
        cross_connects: body.cross_connects,
        issued_at: SimTime(0),
    });
    let code = if e.result == SwitchResult::Applied { StatusCode::OK } else { StatusCode::CONFLICT };
    Ok((code, Json(e)).into_response())
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RouteQos {
    pub min_bps: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteBody {
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(default)]
    pub qos: RouteQos,
}

async fn routes_post(State(s): State<AppState>, Json(b): Json<RouteBody>) -> Result<Json<RoutePlan>, ApiError> {
    let g = s.inner.lock();
    Ok(Json(g.net.compute_route(&b.src, &b.dst, b.qos.min_bps)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionBody {
    pub src: NodeId,
    pub dst: NodeId,
    pub size_bytes: usize,
    #[serde(default)]
    pub policy: Option<String>,
}

async fn provision(State(s): State<AppState>, Json(b): Json<ProvisionBody>) -> Result<Json<DeliveryReceipt>, ApiError> {
    let policy = parse_policy(b.policy.as_deref().unwrap_or("plain")).map_err(ApiError::bad_request)?;
    if b.size_bytes == 0 {
        return Err(ApiError::bad_request("size_bytes must be positive"));
    }
    let mut g = s.inner.lock();
    for n in [&b.src, &b.dst] {
        if g.net.topology().node(n).is_none() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_node", format!("unknown node {n}")));
        }
    }
    Ok(Json(g.net.provision(&b.src, &b.dst, b.size_bytes, policy)?))
}

#[derive(Deserialize, Default)]
#[serde(default)]
pub struct MetricsQuery {
    pub experiment: Option<String>,
    pub format: Option<String>,
}

async fn metrics(State(s): State<AppState>, Query(q): Query<MetricsQuery>) -> Result<Response, ApiError> {
    let g = s.inner.lock();
    let Some(exp) = q.experiment else {
        let snap = g.net.snapshot();
        let counts: BTreeMap<String, usize> =
            g.metrics.experiments().map(|e| (e.to_owned(), g.metrics.records(e).map_or(0, |r| r.len()))).collect();
        return Ok(Json(json!({
            "t_s": snap.t_s,
            "experiments": counts,
            "default_experiment": NETWORK_SERIES,
            "jobs_delivered": snap.jobs_delivered,
            "jobs_failed": snap.jobs_failed,
            "jobs_parked": snap.jobs_parked,
            "control_frames": snap.control_frames,
            "control_bytes": snap.control_bytes,
            "entropy_served_bytes": s.entropy.served_bytes(),
        }))
        .into_response());
    };
    let (format, mime) = match q.format.as_deref().unwrap_or("jsonl") {
        "csv" => (Format::Csv, "text/csv"),
        "jsonl" => (Format::Jsonl, "application/x-ndjson"),
        other => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    };
    let text = g
        .metrics
        .export(&exp, format)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "unknown_experiment", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, mime)], text).into_response())
}

#[derive(Deserialize)]
pub struct EntropyQuery {
    pub bytes: usize,
}

async fn entropy(State(s): State<AppState>, Query(q): Query<EntropyQuery>) -> Result<Response, ApiError> {
    let out = s.entropy.request(q.bytes, s.now()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!({
        "bytes": out.bytes.len(),
        "data": base64::engine::general_purpose::STANDARD.encode(&out.bytes),
        "ready_at_s": out.ready_at.as_secs_f64(),
    }))
    .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceBody {
    pub seconds: f64,
}

async fn advance(State(s): State<AppState>, Json(b): Json<AdvanceBody>) -> Result<Response, ApiError> {
    if s.mode != ClockMode::Simulated {
        return Err(ApiError::new(StatusCode::CONFLICT, "live_clock", "the clock follows wall time in this mode"));
    }
    if !(b.seconds.is_finite() && b.seconds >= 0.0) {
        return Err(ApiError::bad_request("seconds must be a non-negative number"));
    }
    let t = s.now() + qkdnet_core::time::SimDuration::from_secs_f64(b.seconds);
    s.advance_to(t);
    Ok(Json(json!({ "t_s": s.now().as_secs_f64() })).into_response())
}
