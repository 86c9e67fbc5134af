//! Request-style key delivery over REST. Sizes on the wire are in bits.
//!
//! The caller is named by the `X-SAE-ID` header. That is an identity claim,
//! not authentication; a real deployment would bind it to a client
//! certificate.

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use qkdnet_core::ids::SaeId;
use qkdnet_core::kms::{KmsError, ServedKey};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::kms_status;
use crate::state::AppState;

pub const SAE_HEADER: &str = "x-sae-id";

pub fn routes() -> Router<AppState> {
    Router::new()
        .route("/api/v1/keys/{slave}/status", get(status))
        .route("/api/v1/keys/{slave}/enc_keys", get(enc_keys_get).post(enc_keys_post))
        .route("/api/v1/keys/{master}/dec_keys", get(dec_keys_get).post(dec_keys_post))
}

/// Error body in the standard's shape.
pub struct EtsiError(StatusCode, String, Vec<serde_json::Value>);

impl IntoResponse for EtsiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "message": self.1 });
        if !self.2.is_empty() {
            body["details"] = serde_json::Value::Array(self.2);
        }
        (self.0, Json(body)).into_response()
    }
}

impl From<KmsError> for EtsiError {
    fn from(e: KmsError) -> Self {
        let details = match &e {
            KmsError::KeyIdErrors(f) => f.iter().map(|f| json!({ "key_ID": f.key_id, "reason": f.reason })).collect(),
            _ => Vec::new(),
        };
        Self(kms_status(&e), e.to_string(), details)
    }
}

fn caller(h: &HeaderMap) -> Result<SaeId, EtsiError> {
    h.get(SAE_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .map(SaeId::from)
        .ok_or_else(|| EtsiError(StatusCode::UNAUTHORIZED, "missing X-SAE-ID header".into(), Vec::new()))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[allow(non_snake_case)]
pub struct KeyJson {
    pub key_ID: String,
    pub key: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct KeyContainer {
    pub keys: Vec<KeyJson>,
}

fn container(keys: Vec<ServedKey>) -> Json<KeyContainer> {
    let b64 = base64::engine::general_purpose::STANDARD;
    Json(KeyContainer {
        keys: keys.into_iter().map(|k| KeyJson { key_ID: k.key_id.to_string(), key: b64.encode(&k.bits) }).collect(),
    })
}

async fn status(
    State(s): State<AppState>,
    Path(slave): Path<String>,
    h: HeaderMap,
) -> Result<Json<qkdnet_core::kms::StatusRecord>, EtsiError> {
    let master = caller(&h)?;
    let g = s.inner.lock();
    Ok(Json(g.net.kms().etsi14_status(&master, &SaeId::from(slave), g.net.now())?))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EncRequest {
    pub number: Option<usize>,
    /// Key size in bits.
    pub size: Option<usize>,
}

fn enc_keys(s: &AppState, slave: String, h: &HeaderMap, req: EncRequest) -> Result<Json<KeyContainer>, EtsiError> {
    let master = caller(h)?;
    let g = s.inner.lock();
    let kms = g.net.kms();
    let bits = req.size.unwrap_or(kms.settings().default_key_size_bytes * 8);
    if !bits.is_multiple_of(8) {
        return Err(EtsiError(StatusCode::BAD_REQUEST, format!("size {bits} is not a whole number of bytes"), Vec::new()));
    }
    let keys = kms.etsi14_get_enc_keys(&master, &SaeId::from(slave), req.number.unwrap_or(1), bits / 8, g.net.now())?;
    Ok(container(keys))
}

async fn enc_keys_get(
    State(s): State<AppState>,
    Path(slave): Path<String>,
    h: HeaderMap,
    Query(q): Query<EncRequest>,
) -> Result<Json<KeyContainer>, EtsiError> {
    enc_keys(&s, slave, &h, q)
}

async fn enc_keys_post(
    State(s): State<AppState>,
    Path(slave): Path<String>,
    h: HeaderMap,
    body: Option<Json<EncRequest>>,
) -> Result<Json<KeyContainer>, EtsiError> {
    enc_keys(&s, slave, &h, body.map(|b| b.0).unwrap_or_default())
}

#[derive(Deserialize)]
#[allow(non_snake_case)]
pub struct KeyIdJson {
    pub key_ID: String,
}

#[derive(Deserialize)]
#[allow(non_snake_case)]
pub struct DecRequest {
    pub key_IDs: Vec<KeyIdJson>,
}

fn dec_keys(s: &AppState, master: String, h: &HeaderMap, ids: Vec<String>) -> Result<Json<KeyContainer>, EtsiError> {
    let slave = caller(h)?;
    if ids.is_empty() {
        return Err(EtsiError(StatusCode::BAD_REQUEST, "no key_ID given".into(), Vec::new()));
    }
    let g = s.inner.lock();
    Ok(container(g.net.kms().etsi14_get_keys_with_ids(&slave, &SaeId::from(master), &ids, g.net.now())?))
}

#[derive(Deserialize)]
#[allow(non_snake_case)]
pub struct DecQuery {
    pub key_ID: String,
}

async fn dec_keys_get(
    State(s): State<AppState>,
    Path(master): Path<String>,
    h: HeaderMap,
    Query(q): Query<DecQuery>,
) -> Result<Json<KeyContainer>, EtsiError> {
    dec_keys(&s, master, &h, vec![q.key_ID])
}

async fn dec_keys_post(
    State(s): State<AppState>,
    Path(master): Path<String>,
    h: HeaderMap,
    Json(body): Json<DecRequest>,
) -> Result<Json<KeyContainer>, EtsiError> {
    dec_keys(&s, master, &h, body.key_IDs.into_iter().map(|k| k.key_ID).collect())
}
