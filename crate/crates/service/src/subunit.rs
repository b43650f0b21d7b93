use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use metastack::stacking::{PipelineError, UnitModelArtifact};
use metastack::transport::{decode, encode, BoundaryMessage, FieldValue, MessageKind, TransportError};

use crate::{not_found, Reject, RetryPolicy, CONTENT_TYPE};

pub struct SubUnitState {
    pub artifact: UnitModelArtifact,
    /// Base URL of the meta service; `None` predicts without forwarding.
    pub downstream: Option<String>,
    pub retry: RetryPolicy,
    client: reqwest::Client,
}

impl SubUnitState {
    pub fn new(artifact: UnitModelArtifact, downstream: Option<String>, retry: RetryPolicy) -> Self {
        Self { artifact, downstream, retry, client: reqwest::Client::new() }
    }

    /// Posts the sub-prediction to the meta service with bounded retries.
    /// Returns the meta service's reply, or `None` once retries run out.
    async fn forward(&self, message: &[u8]) -> Option<BoundaryMessage> {
        let url = format!("{}/predict", self.downstream.as_ref()?);
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                tokio::time::sleep(self.retry.delay(attempt - 1)).await;
            }
            let sent = self
                .client
                .post(&url)
                .header(header::CONTENT_TYPE, CONTENT_TYPE)
                .body(message.to_vec())
                .send()
                .await;
            match sent {
                Ok(resp) if resp.status().is_success() => match resp.bytes().await.map(|b| decode(&b)) {
                    Ok(Ok(reply)) => return Some(reply),
                    Ok(Err(e)) => log::warn!("unreadable meta reply: {e}"),
                    Err(e) => log::warn!("meta reply failed: {e}"),
                },
                // The meta service refused the message; retrying will not help.
                Ok(resp) if resp.status().is_client_error() => {
                    log::warn!("meta service rejected a sub-prediction with {}", resp.status());
                    return None;
                }
                Ok(resp) => log::warn!("meta service answered {} (attempt {})", resp.status(), attempt + 1),
                Err(e) => log::warn!("meta service unreachable (attempt {}): {e}", attempt + 1),
            }
        }
        log::warn!("dropping a sub-prediction of unit {} after {} attempts", self.artifact.unit_id, self.retry.attempts);
        None
    }
}

/// Router of one sub-unit service.
pub fn subunit_router(state: Arc<SubUnitState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .fallback(not_found)
        .method_not_allowed_fallback(not_found)
        .with_state(state)
}

/// Response body of a sub-unit: `{"meta_response":…,"sub_prediction":…}`
/// with both messages in their canonical encoding.
pub fn encode_unit_response(sub: &BoundaryMessage, meta: Option<&BoundaryMessage>) -> Result<Vec<u8>, TransportError> {
    let mut out = b"{\"meta_response\":".to_vec();
    match meta {
        Some(m) => out.extend(encode(m)?),
        None => out.extend(b"null"),
    }
    out.extend(b",\"sub_prediction\":");
    out.extend(encode(sub)?);
    out.push(b'}');
    Ok(out)
}

fn parse_row(body: &[u8], unit_id: &str) -> Result<(String, BTreeMap<String, f64>), Reject> {
    let msg = decode(body).map_err(|e| Reject::bad_request(e.to_string()))?;
    if msg.kind() != MessageKind::RawRow {
        return Err(Reject::bad_request(format!("expected raw_row, got {}", msg.kind().as_str())));
    }
    let part_id = msg.part_id().ok_or_else(|| Reject::bad_request("missing part_id"))?.to_string();
    if let Some(target) = msg.unit_id() {
        if target != unit_id {
            return Err(Reject::unprocessable(format!("row addressed to unit {target}, this is {unit_id}")));
        }
    }
    let mut features = BTreeMap::new();
    for (name, value) in msg.payload() {
        if name == "part_id" || name == "unit_id" {
            continue;
        }
        match value {
            FieldValue::Number(v) => {
                features.insert(name.clone(), *v);
            }
            FieldValue::Text(_) => return Err(Reject::bad_request(format!("feature {name} is not a number"))),
        }
    }
    Ok((part_id, features))
}

async fn predict(State(state): State<Arc<SubUnitState>>, body: Bytes) -> Result<Response, Reject> {
    let (part_id, features) = parse_row(&body, &state.artifact.unit_id)?;
    let sub = state.artifact.predict_features(&part_id, &features).map_err(|e| match e {
        PipelineError::UnknownFeature(_) => Reject::unprocessable(e.to_string()),
        other => Reject(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    let sub_msg = sub.to_message();
    let encoded = encode(&sub_msg).map_err(|e| Reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (status, meta) = match &state.downstream {
        None => (StatusCode::OK, None),
        Some(_) => match state.forward(&encoded).await {
            Some(reply) => (StatusCode::OK, Some(reply)),
            None => (StatusCode::BAD_GATEWAY, None),
        },
    };
    let body = encode_unit_response(&sub_msg, meta.as_ref())
        .map_err(|e| Reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((status, [(header::CONTENT_TYPE, CONTENT_TYPE)], body).into_response())
}
