use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// A raw measurement name: line (unit), station and feature number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub unit: u32,
    pub station: u32,
    pub number: u32,
}

impl FeatureId {
    pub fn new(unit: u32, station: u32, number: u32) -> Self {
        Self { unit, station, number }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}_S{}_F{}", self.unit, self.station, self.number)
    }
}

impl FromStr for FeatureId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_raw(s) {
            Some((id, 'F')) => Ok(id),
            _ => Err(DataError::InvalidColumnName(s.to_string())),
        }
    }
}

/// Parses `L{u}_S{s}_{F|D}{n}`.
fn parse_raw(s: &str) -> Option<(FeatureId, char)> {
    let mut parts = s.split('_');
    let unit = parse_prefixed(parts.next()?, 'L')?;
    let station = parse_prefixed(parts.next()?, 'S')?;
    let last = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    let tag = last.chars().next()?;
    if tag != 'F' && tag != 'D' {
        return None;
    }
    let number = parse_prefixed(last, tag)?;
    Some((FeatureId { unit, station, number }, tag))
}

fn parse_prefixed(part: &str, prefix: char) -> Option<u32> {
    let digits = part.strip_prefix(prefix)?;
    // Reject signs, leading zeros and empties so that rendering round-trips.
    if digits.is_empty()
        || !digits.bytes().all(|b| b.is_ascii_digit())
        || (digits.len() > 1 && digits.starts_with('0'))
    {
        return None;
    }
    digits.parse().ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DateStat {
    Min,
    Max,
    Span,
    Count,
}

impl DateStat {
    pub const ALL: [DateStat; 4] = [DateStat::Min, DateStat::Max, DateStat::Span, DateStat::Count];

    fn tag(self) -> &'static str {
        match self {
            DateStat::Min => "MIN",
            DateStat::Max => "MAX",
            DateStat::Span => "SPAN",
            DateStat::Count => "COUNT",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

/// Identity of a dataset column.
///
/// Rendered as `L0_S0_F0` (numeric), `L0_S0_D1` (raw date), `L0_DATE_MIN`
/// (per-unit date summary) or `DATE_MIN` (global date summary).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ColumnId {
    Numeric(FeatureId),
    Date(FeatureId),
    DateSummary { unit: Option<u32>, stat: DateStat },
}

impl ColumnId {
    pub fn unit(&self) -> Option<u32> {
        match self {
            ColumnId::Numeric(f) | ColumnId::Date(f) => Some(f.unit),
            ColumnId::DateSummary { unit, .. } => *unit,
        }
    }

    pub fn is_date(&self) -> bool {
        matches!(self, ColumnId::Date(_))
    }

    /// Reinterprets a raw numeric column as a date column (same triple).
    pub fn into_date(self) -> Self {
        match self {
            ColumnId::Numeric(f) => ColumnId::Date(f),
            other => other,
        }
    }
}

impl fmt::Display for ColumnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnId::Numeric(id) => write!(f, "{id}"),
            ColumnId::Date(id) => write!(f, "L{}_S{}_D{}", id.unit, id.station, id.number),
            ColumnId::DateSummary { unit: Some(u), stat } => write!(f, "L{u}_DATE_{}", stat.tag()),
            ColumnId::DateSummary { unit: None, stat } => write!(f, "DATE_{}", stat.tag()),
        }
    }
}

impl FromStr for ColumnId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || DataError::InvalidColumnName(s.to_string());
        if let Some((id, tag)) = parse_raw(s) {
            return Ok(if tag == 'F' { ColumnId::Numeric(id) } else { ColumnId::Date(id) });
        }
        if let Some(tag) = s.strip_prefix("DATE_") {
            let stat = DateStat::from_tag(tag).ok_or_else(invalid)?;
            return Ok(ColumnId::DateSummary { unit: None, stat });
        }
        let (unit, rest) = s.split_once("_DATE_").ok_or_else(invalid)?;
        let unit = parse_prefixed(unit, 'L').ok_or_else(invalid)?;
        let stat = DateStat::from_tag(rest).ok_or_else(invalid)?;
        Ok(ColumnId::DateSummary { unit: Some(unit), stat })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_bosch_names() {
        let id: FeatureId = "L3_S36_F3939".parse().unwrap();
        assert_eq!(id, FeatureId::new(3, 36, 3939));
        assert_eq!(
            "L0_S0_D1".parse::<ColumnId>().unwrap(),
            ColumnId::Date(FeatureId::new(0, 0, 1))
        );
        assert_eq!(
            "L2_DATE_SPAN".parse::<ColumnId>().unwrap(),
            ColumnId::DateSummary { unit: Some(2), stat: DateStat::Span }
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["Id", "L0_S0", "L0_S0_X1", "L01_S0_F0", "L0_S0_F0_x", "l0_s0_f0", "L-1_S0_F0"] {
            assert!(bad.parse::<ColumnId>().is_err(), "{bad}");
        }
        assert!("L0_S0_D1".parse::<FeatureId>().is_err());
    }

    fn any_column() -> impl Strategy<Value = ColumnId> {
        let fid = (0u32..100, 0u32..100, 0u32..5000).prop_map(|(u, s, n)| FeatureId::new(u, s, n));
        prop_oneof![
            fid.clone().prop_map(ColumnId::Numeric),
            fid.prop_map(ColumnId::Date),
            (proptest::option::of(0u32..10), 0usize..4)
                .prop_map(|(unit, s)| ColumnId::DateSummary { unit, stat: DateStat::ALL[s] }),
        ]
    }

    proptest! {
        #[test]
        fn rendering_round_trips(col in any_column()) {
            prop_assert_eq!(col.to_string().parse::<ColumnId>().unwrap(), col);
        }
    }
}
