//! The unit boundary: canonical messages, transcripts, the confidentiality
//! audit and data-volume accounting.

mod audit;
mod message;
mod volume;

pub use audit::{audit_confidentiality, AuditRule, AuditVerdict, RawIndex, Violation};
pub use message::{
    decode, encode, read_transcript, write_transcript, BoundaryMessage, FieldValue, MessageKind, Transcript,
};
pub use volume::{account_volume, measure_traffic, KindTraffic, TrafficSummary, VolumeAccount, VolumeReport};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("message has an empty payload")]
    EmptyPayload,
    #[error("field {0:?} holds a non-finite number")]
    NonFinite(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
