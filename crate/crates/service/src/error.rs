use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use qkdnet_core::controller::ControllerError;
use qkdnet_core::kms::KmsError;
use qkdnet_core::network::ProvisionError;
use serde_json::json;

/// Northbound error body: a stable code plus a human-readable message.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<ControllerError> for ApiError {
    fn from(e: ControllerError) -> Self {
        let (status, code) = match &e {
            ControllerError::UnknownNode(_) => (StatusCode::NOT_FOUND, "unknown_node"),
            ControllerError::QosInfeasible { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "qos_infeasible"),
            ControllerError::NoRoute { .. } => (StatusCode::CONFLICT, "no_route"),
            _ => (StatusCode::CONFLICT, "controller"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<ProvisionError> for ApiError {
    fn from(e: ProvisionError) -> Self {
        match e {
            ProvisionError::DegenerateEndpoints(_) => Self::bad_request(e.to_string()),
            ProvisionError::Route(c) => c.into(),
            ProvisionError::Relay { .. } => Self::new(StatusCode::SERVICE_UNAVAILABLE, "relay_failed", e.to_string()),
        }
    }
}

/// Status for key-manager errors, shared by both application interfaces.
pub fn kms_status(e: &KmsError) -> StatusCode {
    match e {
        KmsError::UnknownNode(_) | KmsError::UnknownApp(_) | KmsError::UnknownKsid => StatusCode::NOT_FOUND,
        KmsError::InsufficientKey { .. } | KmsError::KeyExhausted | KmsError::IntegrityFault(_) => {
            StatusCode::SERVICE_UNAVAILABLE
        }
        KmsError::RateLimited => StatusCode::TOO_MANY_REQUESTS,
        KmsError::NotSessionParty => StatusCode::UNAUTHORIZED,
        KmsError::Unreachable(_) | KmsError::QosUnsatisfiable { .. } | KmsError::SessionClosed => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    }
}
