//! The stack as a mesh of HTTP services.
//!
//! Every sub-unit runs a service that accepts its own raw rows, predicts, and
//! forwards only the resulting sub-prediction to the meta service. The meta
//! service keeps the latest sub-prediction per (part, unit) and answers each
//! arrival with a refreshed meta prediction. Each service exposes exactly one
//! route, `POST /predict`; everything else is 404.
//!
//! [`replay`] streams a dataset through a running mesh and records what
//! crossed unit boundaries.

mod config;
mod meta;
mod mesh;
mod replay;
mod subunit;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use metastack::stacking::PipelineError;
use metastack::transport::TransportError;

pub use config::{MeshConfig, RetryPolicy, ServiceConfig};
pub use meta::{meta_router, AssemblyBuffer, MetaState, PartEntry};
pub use mesh::{serve, spawn_configured, spawn_mesh, Mesh};
pub use replay::{decode_unit_response, replay, OutcomeRow, ReplayOptions, ReplayOutcome};
pub use subunit::{encode_unit_response, subunit_router, SubUnitState};

pub const CONTENT_TYPE: &str = "application/json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),
}

/// A rejected request: status and a one-line reason.
pub(crate) struct Reject(StatusCode, String);

impl Reject {
    pub(crate) fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }

    pub(crate) fn unprocessable(msg: impl Into<String>) -> Self {
        Self(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
    }
}

impl IntoResponse for Reject {
    fn into_response(self) -> Response {
        log::debug!("rejected with {}: {}", self.0, self.1);
        (self.0, self.1).into_response()
    }
}

pub(crate) async fn not_found() -> StatusCode {
    StatusCode::NOT_FOUND
}
