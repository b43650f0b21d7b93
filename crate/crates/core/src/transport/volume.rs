use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{BoundaryMessage, MessageKind, TransportError};

/// Analytic data volume per scenario for `k` units with `nᵢ` features each,
/// `m` outputs per sub-model and volume `s` per feature. All quantities are
/// exact rationals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeAccount {
    pub k: u64,
    pub m: u64,
    pub n_i: Vec<u64>,
    pub s: Ratio<u64>,
}

impl VolumeAccount {
    pub fn total_features(&self) -> u64 {
        self.n_i.iter().sum()
    }

    /// Isolated analysis: nothing crosses a boundary.
    pub fn scenario1(&self) -> Ratio<u64> {
        Ratio::from_integer(0)
    }

    /// Predictions only: `k·m·s`.
    pub fn scenario2(&self) -> Ratio<u64> {
        self.s * (self.k * self.m)
    }

    /// Shared pool: `Σnᵢ·s`.
    pub fn scenario3(&self) -> Ratio<u64> {
        self.s * self.total_features()
    }

    /// `(Σnᵢ − k·m)·s`, negative when predictions outweigh features.
    pub fn savings(&self) -> Ratio<i128> {
        let s = Ratio::new(*self.s.numer() as i128, *self.s.denom() as i128);
        s * (self.total_features() as i128 - (self.k * self.m) as i128)
    }

    /// `k·m / Σnᵢ`.
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.k * self.m, self.total_features())
    }

    pub fn ratio_f64(&self) -> f64 {
        *self.ratio().numer() as f64 / *self.ratio().denom() as f64
    }

    /// Ratio as a percentage with two decimals, e.g. `0.81%`.
    pub fn ratio_percent(&self) -> String {
        format!("{:.2}%", 100.0 * self.ratio_f64())
    }
}

/// Printable form of a [`VolumeAccount`], with exact fractions as strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub k: u64,
    pub m: u64,
    pub n_i: Vec<u64>,
    pub s: String,
    pub scenario1: String,
    pub scenario2: String,
    pub scenario3: String,
    pub savings: String,
    pub ratio: String,
    pub ratio_percent: String,
}

impl From<&VolumeAccount> for VolumeReport {
    fn from(v: &VolumeAccount) -> Self {
        Self {
            k: v.k,
            m: v.m,
            n_i: v.n_i.clone(),
            s: v.s.to_string(),
            scenario1: v.scenario1().to_string(),
            scenario2: v.scenario2().to_string(),
            scenario3: v.scenario3().to_string(),
            savings: v.savings().to_string(),
            ratio: v.ratio().to_string(),
            ratio_percent: v.ratio_percent(),
        }
    }
}

/// Builds a [`VolumeAccount`]; warns when `m` exceeds the smallest `nᵢ`.
pub fn account_volume(k: u64, m: u64, n_i: &[u64], s: Ratio<u64>) -> VolumeAccount {
    assert!(k > 0 && m > 0 && !n_i.is_empty() && n_i.iter().all(|&n| n > 0), "volume inputs must be positive");
    if n_i.iter().any(|&n| m > n) {
        log::warn!("m = {m} exceeds the feature count of some unit; sending predictions costs more than raw data there");
    }
    VolumeAccount { k, m, n_i: n_i.to_vec(), s }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTraffic {
    pub messages: u64,
    pub bytes: u64,
    /// Payload fields other than the item and unit identifiers.
    pub value_fields: u64,
}

/// Measured traffic of a transcript.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSummary {
    pub messages: u64,
    pub bytes: u64,
    pub value_fields: u64,
    pub by_kind: BTreeMap<MessageKind, KindTraffic>,
}

impl TrafficSummary {
    pub fn kind(&self, kind: MessageKind) -> KindTraffic {
        self.by_kind.get(&kind).cloned().unwrap_or_default()
    }
}

pub fn measure_traffic(transcript: &[BoundaryMessage]) -> Result<TrafficSummary, TransportError> {
    let mut out = TrafficSummary::default();
    for m in transcript {
        let bytes = m.byte_size()? as u64;
        let fields = m.payload().keys().filter(|k| *k != "part_id" && *k != "unit_id").count() as u64;
        let entry = out.by_kind.entry(m.kind()).or_default();
        entry.messages += 1;
        entry.bytes += bytes;
        entry.value_fields += fields;
        out.messages += 1;
        out.bytes += bytes;
        out.value_fields += fields;
    }
    Ok(out)
}
