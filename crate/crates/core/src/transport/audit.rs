use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{BoundaryMessage, FieldValue, MessageKind};
use crate::tabular::{ColumnId, Dataset, UnitPartition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditRule {
    /// The message is a raw row.
    RawRowKind,
    /// A field is named after a data column.
    FeatureField,
    /// A number equals a raw cell of the sending unit.
    RawValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub message: usize,
    pub field: String,
    pub rule: AuditRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub messages_scanned: usize,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

impl AuditVerdict {
    /// Indices of messages with at least one violation.
    pub fn flagged_messages(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.violations.iter().map(|v| v.message).collect();
        idx.dedup();
        idx
    }
}

/// Bit patterns of every observed raw cell, grouped by owning unit.
#[derive(Clone, Debug, Default)]
pub struct RawIndex {
    values: BTreeMap<String, HashSet<u64>>,
}

impl RawIndex {
    pub fn from_dataset(dataset: &Dataset, partitions: &[UnitPartition]) -> Self {
        let mut values = BTreeMap::new();
        for p in partitions {
            let mut set = HashSet::new();
            for i in 0..dataset.n_items() {
                for &j in &p.column_indices {
                    if dataset.is_observed(i, j) {
                        set.insert(dataset.row(i)[j].to_bits());
                    }
                }
            }
            values.insert(p.unit_id.clone(), set);
        }
        Self { values }
    }

    pub fn contains(&self, unit_id: &str, value: f64) -> bool {
        self.values.get(unit_id).is_some_and(|s| s.contains(&value.to_bits()))
    }
}

/// Flags every message that is a raw row, carries a column-named field, or
/// carries a number bit-equal to a raw cell of the unit that sent it.
pub fn audit_confidentiality(transcript: &[BoundaryMessage], index: &RawIndex) -> AuditVerdict {
    let mut violations = Vec::new();
    for (n, m) in transcript.iter().enumerate() {
        if m.kind() == MessageKind::RawRow {
            violations.push(Violation { message: n, field: "kind".into(), rule: AuditRule::RawRowKind });
        }
        for (field, value) in m.payload() {
            if field.parse::<ColumnId>().is_ok() {
                violations.push(Violation { message: n, field: field.clone(), rule: AuditRule::FeatureField });
            }
            if let (FieldValue::Number(v), Some(unit)) = (value, m.unit_id()) {
                if index.contains(unit, *v) {
                    violations.push(Violation { message: n, field: field.clone(), rule: AuditRule::RawValue });
                }
            }
        }
    }
    AuditVerdict { messages_scanned: transcript.len(), pass: violations.is_empty(), violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{partition_by_unit, FeatureId};

    fn dataset() -> Dataset {
        Dataset::new(
            vec!["#001".into()],
            vec![ColumnId::Numeric(FeatureId::new(0, 0, 0)), ColumnId::Numeric(FeatureId::new(1, 0, 1))],
            vec![Some(-0.042), Some(0.25)],
            vec![0],
            vec!["no scrap".into(), "scrap".into()],
        )
        .unwrap()
    }

    fn index() -> RawIndex {
        let ds = dataset();
        RawIndex::from_dataset(&ds, &partition_by_unit(&ds).unwrap())
    }

    #[test]
    fn predictions_pass() {
        let t = vec![
            BoundaryMessage::sub_prediction("#001", "L0", "no scrap", 0.9724),
            BoundaryMessage::meta_prediction("#001", "no scrap", 0.9),
        ];
        let v = audit_confidentiality(&t, &index());
        assert!(v.pass);
        assert_eq!(v.messages_scanned, 2);
    }

    #[test]
    fn smuggled_field_hits_two_rules() {
        let mut m = BoundaryMessage::sub_prediction("#001", "L0", "no scrap", 0.9724);
        m.payload_mut().insert("L0_S0_F0".into(), FieldValue::Number(-0.042));
        let v = audit_confidentiality(&[m], &index());
        assert!(!v.pass);
        let rules: Vec<AuditRule> = v.violations.iter().map(|x| x.rule).collect();
        assert_eq!(rules, vec![AuditRule::FeatureField, AuditRule::RawValue]);
    }

    #[test]
    fn value_match_is_per_unit() {
        // 0.25 belongs to L1, so it is not flagged when L0 sends it.
        let ok = BoundaryMessage::sub_prediction("#001", "L0", "scrap", 0.25);
        assert!(audit_confidentiality(&[ok], &index()).pass);
        let bad = BoundaryMessage::sub_prediction("#001", "L1", "scrap", 0.25);
        assert!(!audit_confidentiality(&[bad], &index()).pass);
    }

    #[test]
    fn raw_rows_are_all_flagged() {
        let t: Vec<BoundaryMessage> = (0..3)
            .map(|i| BoundaryMessage::raw_row(&i.to_string(), "L9", std::iter::empty()))
            .collect();
        let v = audit_confidentiality(&t, &RawIndex::default());
        assert_eq!(v.flagged_messages(), vec![0, 1, 2]);
    }
}
