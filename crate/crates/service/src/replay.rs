use std::collections::BTreeMap;
use std::time::Duration;

use axum::http::header;
use metastack::tabular::{Dataset, UnitPartition};
use metastack::transport::{decode, BoundaryMessage, MessageKind, TransportError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{ServiceError, CONTENT_TYPE};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Parts per second; `None` streams as fast as the mesh answers.
    pub rate: Option<f64>,
    /// Shuffles the order in which a part's units are called.
    pub shuffle_seed: Option<u64>,
}

/// Final state of one replayed part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub part_id: String,
    pub actual: String,
    /// Deployed units the part passed through.
    pub units_visited: usize,
    /// Of those, units whose call returned a meta prediction.
    pub units_answered: usize,
    /// Meta prediction returned for the last delivered sub-prediction.
    pub prediction: Option<String>,
    pub probability: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayOutcome {
    pub rows: Vec<OutcomeRow>,
    /// Boundary traffic seen by the driver: each forwarded sub-prediction
    /// followed by the meta service's reply to it.
    pub transcript: Vec<BoundaryMessage>,
}

impl ReplayOutcome {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.failed).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("part_id,actual,units_visited,units_answered,prediction,probability,failed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.part_id,
                r.actual,
                r.units_visited,
                r.units_answered,
                r.prediction.as_deref().unwrap_or(""),
                r.probability.map(|p| p.to_string()).unwrap_or_default(),
                r.failed
            ));
        }
        out
    }
}

/// Splits a sub-unit response into its sub-prediction and meta reply.
pub fn decode_unit_response(bytes: &[u8]) -> Result<(BoundaryMessage, Option<BoundaryMessage>), TransportError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let field = |name: &'static str| -> Result<Option<BoundaryMessage>, TransportError> {
        match value.get(name) {
            None => Err(TransportError::MissingField(name)),
            Some(serde_json::Value::Null) => Ok(None),
            Some(v) => {
                let raw = serde_json::to_vec(v).map_err(|e| TransportError::Malformed(e.to_string()))?;
                decode(&raw).map(Some)
            }
        }
    };
    let sub = field("sub_prediction")?.ok_or(TransportError::MissingField("sub_prediction"))?;
    if sub.kind() != MessageKind::SubPrediction {
        return Err(TransportError::Malformed("sub_prediction field holds another kind".into()));
    }
    Ok((sub, field("meta_response")?))
}

/// Streams `items` through the mesh: every part's observed cells go, unit by
/// unit, to the owning sub-unit service. A part whose calls fail is marked
/// failed and the replay moves on.
pub async fn replay(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    unit_urls: &BTreeMap<String, String>,
    items: &[usize],
    options: &ReplayOptions,
) -> Result<ReplayOutcome, ServiceError> {
    let client = reqwest::Client::new();
    let mut rng = options.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let pause = options.rate.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r));
    let mut outcome = ReplayOutcome::default();

    for (n, &i) in items.iter().enumerate() {
        if let (Some(p), true) = (pause, n > 0) {
            tokio::time::sleep(p).await;
        }
        let part_id = &dataset.items()[i];
        let mut visits: Vec<&UnitPartition> =
            partitions.iter().filter(|p| p.coverage[i] && unit_urls.contains_key(&p.unit_id)).collect();
        if let Some(rng) = rng.as_mut() {
            visits.shuffle(rng);
        }
        let mut row = OutcomeRow {
            part_id: part_id.clone(),
            actual: dataset.classes()[dataset.labels()[i]].clone(),
            units_visited: visits.len(),
            units_answered: 0,
            prediction: None,
            probability: None,
            failed: false,
        };
        for p in visits {
            let fields: Vec<(String, f64)> = p
                .column_indices
                .iter()
                .filter(|&&j| dataset.is_observed(i, j))
                .map(|&j| (dataset.columns()[j].to_string(), dataset.row(i)[j]))
                .collect();
            let body = metastack::transport::encode(&BoundaryMessage::raw_row(part_id, &p.unit_id, fields))?;
            let url = format!("{}/predict", unit_urls[&p.unit_id]);
            let reply = async {
                let resp = client.post(&url).header(header::CONTENT_TYPE, CONTENT_TYPE).body(body).send().await?;
                let status = resp.status();
                let bytes = resp.bytes().await?;
                Ok::<_, ServiceError>((status, bytes))
            }
            .await;
            let (status, bytes) = match reply {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("part {part_id}: unit {} unreachable: {e}", p.unit_id);
                    row.failed = true;
                    continue;
                }
            };
            let decoded = if status.is_success() || status.as_u16() == 502 {
                decode_unit_response(&bytes).map_err(|e| e.to_string())
            } else {
                Err(format!("status {status}: {}", String::from_utf8_lossy(&bytes)))
            };
            match decoded {
                Ok((sub, meta)) => {
                    outcome.transcript.push(sub);
                    match meta {
                        Some(m) => {
                            row.units_answered += 1;
                            row.prediction = m.text("prediction").map(str::to_string);
                            row.probability = m.number("probability");
                            outcome.transcript.push(m);
                        }
                        None => {
                            log::warn!("part {part_id}: no meta reply for unit {}", p.unit_id);
                            row.failed = true;
                        }
                    }
                }
                Err(e) => {
                    log::warn!("part {part_id}: unit {} failed: {e}", p.unit_id);
                    row.failed = true;
                }
            }
        }
        outcome.rows.push(row);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode_unit_response;

    #[test]
    fn unit_response_round_trip() {
        let sub = BoundaryMessage::sub_prediction("#001", "L0", "No scrap", 0.9724);
        let meta = BoundaryMessage::meta_prediction("#001", "No scrap", 0.1 + 0.2);
        let bytes = encode_unit_response(&sub, Some(&meta)).unwrap();
        assert_eq!(decode_unit_response(&bytes).unwrap(), (sub.clone(), Some(meta)));
        let bytes = encode_unit_response(&sub, None).unwrap();
        assert!(bytes.starts_with(b"{\"meta_response\":null,"));
        assert_eq!(decode_unit_response(&bytes).unwrap(), (sub, None));
        assert!(decode_unit_response(b"{}").is_err());
    }
}
