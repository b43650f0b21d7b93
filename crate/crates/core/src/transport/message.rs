use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::TransportError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Sub-unit to meta unit: item id, unit id, label, certainty.
    SubPrediction,
    /// Meta unit to its consumer: item id, label, certainty.
    MetaPrediction,
    /// Sub-unit to a shared pool: the unit's raw cells for one item.
    RawRow,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::SubPrediction => "sub_prediction",
            MessageKind::MetaPrediction => "meta_prediction",
            MessageKind::RawRow => "raw_row",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TransportError> {
        match s {
            "sub_prediction" => Ok(MessageKind::SubPrediction),
            "meta_prediction" => Ok(MessageKind::MetaPrediction),
            "raw_row" => Ok(MessageKind::RawRow),
            other => Err(TransportError::UnknownKind(other.to_string())),
        }
    }

    /// Sender and receiver roles of this kind of message.
    pub fn direction(self) -> (&'static str, &'static str) {
        match self {
            MessageKind::SubPrediction => ("sub-unit", "meta unit"),
            MessageKind::MetaPrediction => ("meta unit", "consumer"),
            MessageKind::RawRow => ("sub-unit", "shared pool"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Text(String),
    Number(f64),
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::Text(s.to_string())
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        FieldValue::Text(s)
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Number(v)
    }
}

/// One message crossing a unit boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMessage {
    kind: MessageKind,
    payload: BTreeMap<String, FieldValue>,
}

#[derive(Serialize)]
struct WireOut<'a> {
    kind: &'a str,
    payload: &'a BTreeMap<String, FieldValue>,
}

#[derive(Deserialize)]
struct WireIn {
    kind: String,
    payload: BTreeMap<String, FieldValue>,
}

impl BoundaryMessage {
    pub fn new(kind: MessageKind, payload: BTreeMap<String, FieldValue>) -> Self {
        Self { kind, payload }
    }

    pub fn sub_prediction(part_id: &str, unit_id: &str, prediction: &str, probability: f64) -> Self {
        let mut payload = BTreeMap::new();
        payload.insert("part_id".into(), part_id.into());
        payload.insert("unit_id".into(), unit_id.into());
        payload.insert("prediction".into(), prediction.into());
        payload.insert("probability".into(), probability.into());
        Self::new(MessageKind::SubPrediction, payload)
    }

    pub fn meta_prediction(part_id: &str, prediction: &str, probability: f64) -> Self {
        let mut payload = BTreeMap::new();
        payload.insert("part_id".into(), part_id.into());
        payload.insert("prediction".into(), prediction.into());
        payload.insert("probability".into(), probability.into());
        Self::new(MessageKind::MetaPrediction, payload)
    }

    /// A unit's raw cells for one item, keyed by column name.
    pub fn raw_row(part_id: &str, unit_id: &str, fields: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut payload: BTreeMap<String, FieldValue> =
            fields.into_iter().map(|(k, v)| (k, FieldValue::Number(v))).collect();
        payload.insert("part_id".into(), part_id.into());
        payload.insert("unit_id".into(), unit_id.into());
        Self::new(MessageKind::RawRow, payload)
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn payload(&self) -> &BTreeMap<String, FieldValue> {
        &self.payload
    }

    pub fn payload_mut(&mut self) -> &mut BTreeMap<String, FieldValue> {
        &mut self.payload
    }

    pub fn text(&self, field: &str) -> Option<&str> {
        match self.payload.get(field) {
            Some(FieldValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn number(&self, field: &str) -> Option<f64> {
        match self.payload.get(field) {
            Some(FieldValue::Number(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn part_id(&self) -> Option<&str> {
        self.text("part_id")
    }

    /// The sending sub-unit, if the message names one.
    pub fn unit_id(&self) -> Option<&str> {
        self.text("unit_id")
    }

    /// Length of the canonical encoding.
    pub fn byte_size(&self) -> Result<usize, TransportError> {
        Ok(encode(self)?.len())
    }
}

/// Canonical encoding: a JSON object with sorted keys, no whitespace and
/// shortest round-trip numbers.
pub fn encode(message: &BoundaryMessage) -> Result<Vec<u8>, TransportError> {
    if message.payload.is_empty() {
        return Err(TransportError::EmptyPayload);
    }
    for (k, v) in &message.payload {
        if let FieldValue::Number(x) = v {
            if !x.is_finite() {
                return Err(TransportError::NonFinite(k.clone()));
            }
        }
    }
    let wire = WireOut { kind: message.kind.as_str(), payload: &message.payload };
    serde_json::to_vec(&wire).map_err(|e| TransportError::Malformed(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<BoundaryMessage, TransportError> {
    let wire: WireIn = serde_json::from_slice(bytes).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let kind = MessageKind::parse(&wire.kind)?;
    if wire.payload.is_empty() {
        return Err(TransportError::EmptyPayload);
    }
    Ok(BoundaryMessage { kind, payload: wire.payload })
}

/// Append-only message log shared by concurrent senders.
#[derive(Debug, Default)]
pub struct Transcript {
    messages: Mutex<Vec<BoundaryMessage>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, message: BoundaryMessage) {
        self.messages.lock().expect("transcript lock").push(message);
    }

    pub fn len(&self) -> usize {
        self.messages.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<BoundaryMessage> {
        self.messages.lock().expect("transcript lock").clone()
    }

    pub fn into_messages(self) -> Vec<BoundaryMessage> {
        self.messages.into_inner().expect("transcript lock")
    }
}

/// Writes one canonical message per line.
pub fn write_transcript<W: Write>(messages: &[BoundaryMessage], mut writer: W) -> Result<(), TransportError> {
    for m in messages {
        writer.write_all(&encode(m)?)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_transcript<R: BufRead>(reader: R) -> Result<Vec<BoundaryMessage>, TransportError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(decode(line.as_bytes())?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_sub_prediction() {
        let m = BoundaryMessage::sub_prediction("#001", "L0", "no scrap", 0.9724);
        let bytes = encode(&m).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r##"{"kind":"sub_prediction","payload":{"part_id":"#001","prediction":"no scrap","probability":0.9724,"unit_id":"L0"}}"##
        );
        assert_eq!(decode(&bytes).unwrap(), m);
        assert_eq!(m.byte_size().unwrap(), bytes.len());
    }

    #[test]
    fn errors() {
        let empty = BoundaryMessage::new(MessageKind::RawRow, BTreeMap::new());
        assert!(matches!(encode(&empty), Err(TransportError::EmptyPayload)));
        assert!(matches!(decode(br#"{"kind":"raw_row","payload":{}}"#), Err(TransportError::EmptyPayload)));
        assert!(matches!(
            decode(br#"{"kind":"gossip","payload":{"a":1}}"#),
            Err(TransportError::UnknownKind(_))
        ));
        let nan = BoundaryMessage::meta_prediction("x", "scrap", f64::NAN);
        assert!(matches!(encode(&nan), Err(TransportError::NonFinite(_))));
        assert!(matches!(decode(b"not json"), Err(TransportError::Malformed(_))));
    }

    #[test]
    fn transcript_round_trip() {
        let msgs = vec![
            BoundaryMessage::sub_prediction("1", "L0", "scrap", 0.5),
            BoundaryMessage::raw_row("1", "L0", [("L0_S0_F0".to_string(), -0.042)]),
        ];
        let mut buf = Vec::new();
        write_transcript(&msgs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_transcript(&buf[..]).unwrap(), msgs);
    }

    fn arb_message() -> impl Strategy<Value = BoundaryMessage> {
        let value = prop_oneof![
            "[a-zA-Z0-9 #_\"\\\\]{0,12}".prop_map(FieldValue::Text),
            (-1e12f64..1e12).prop_map(FieldValue::Number),
            any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(FieldValue::Number),
        ];
        let kind = prop_oneof![
            Just(MessageKind::SubPrediction),
            Just(MessageKind::MetaPrediction),
            Just(MessageKind::RawRow)
        ];
        (kind, prop::collection::btree_map("[a-z_0-9]{1,10}", value, 1..6))
            .prop_map(|(k, p)| BoundaryMessage::new(k, p))
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_message()) {
            let bytes = encode(&m).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), m);
        }

        #[test]
        fn encoding_is_injective(a in arb_message(), b in arb_message()) {
            if a != b {
                prop_assert_ne!(encode(&a).unwrap(), encode(&b).unwrap());
            }
        }
    }
}
