use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use metastack::stacking::{MetaModelArtifact, MetaPrediction, SubPrediction};
use metastack::transport::{decode, encode, MessageKind, Transcript};

use crate::{not_found, Reject, CONTENT_TYPE};

/// What the meta service knows about one part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartEntry {
    /// Latest sub-prediction per unit.
    pub subs: BTreeMap<String, SubPrediction>,
    pub last: Option<MetaPrediction>,
}

/// Sub-predictions received so far, per part. Updates to one part are
/// serialized; different parts proceed independently.
#[derive(Debug, Default)]
pub struct AssemblyBuffer {
    parts: Mutex<HashMap<String, Arc<Mutex<PartEntry>>>>,
}

impl AssemblyBuffer {
    /// Stores `sub` (replacing an earlier one from the same unit) and runs
    /// `predict` on the part's current sub-predictions while holding the
    /// part's lock.
    pub fn upsert<E>(
        &self,
        sub: SubPrediction,
        predict: impl FnOnce(&[SubPrediction]) -> Result<MetaPrediction, E>,
    ) -> Result<MetaPrediction, E> {
        let entry = {
            let mut parts = self.parts.lock().expect("assembly buffer poisoned");
            Arc::clone(parts.entry(sub.part_id.clone()).or_default())
        };
        let mut entry = entry.lock().expect("part entry poisoned");
        entry.subs.insert(sub.unit_id.clone(), sub);
        let current: Vec<SubPrediction> = entry.subs.values().cloned().collect();
        let prediction = predict(&current)?;
        entry.last = Some(prediction.clone());
        Ok(prediction)
    }

    pub fn get(&self, part_id: &str) -> Option<PartEntry> {
        let parts = self.parts.lock().expect("assembly buffer poisoned");
        parts.get(part_id).map(|e| e.lock().expect("part entry poisoned").clone())
    }

    pub fn len(&self) -> usize {
        self.parts.lock().expect("assembly buffer poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MetaState {
    pub artifact: MetaModelArtifact,
    pub buffer: AssemblyBuffer,
    /// Every message received or sent by the meta service.
    pub transcript: Transcript,
}

impl MetaState {
    pub fn new(artifact: MetaModelArtifact) -> Self {
        Self { artifact, buffer: AssemblyBuffer::default(), transcript: Transcript::new() }
    }
}

/// Router of the meta service.
pub fn meta_router(state: Arc<MetaState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .fallback(not_found)
        .method_not_allowed_fallback(not_found)
        .with_state(state)
}

async fn predict(State(state): State<Arc<MetaState>>, body: Bytes) -> Result<Response, Reject> {
    let msg = decode(&body).map_err(|e| Reject::bad_request(e.to_string()))?;
    if msg.kind() != MessageKind::SubPrediction {
        return Err(Reject::bad_request(format!("expected sub_prediction, got {}", msg.kind().as_str())));
    }
    let sub = SubPrediction::from_message(&msg).map_err(|e| Reject::bad_request(e.to_string()))?;
    if !state.artifact.expected_units.contains(&sub.unit_id) {
        return Err(Reject::unprocessable(format!("unknown unit {}", sub.unit_id)));
    }
    if !state.artifact.classes.contains(&sub.label) {
        return Err(Reject::unprocessable(format!("unknown label {}", sub.label)));
    }
    state.transcript.record(msg);
    let artifact = &state.artifact;
    let prediction = state
        .buffer
        .upsert(sub, |subs| artifact.predict_subs(&subs[0].part_id, subs))
        .map_err(|e| Reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let reply = prediction.to_message();
    let body = encode(&reply).map_err(|e| Reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    state.transcript.record(reply);
    Ok(([(header::CONTENT_TYPE, CONTENT_TYPE)], body).into_response())
}
