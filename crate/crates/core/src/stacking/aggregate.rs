use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{PipelineError, SubPrediction};

/// Label code of a unit the item did not visit.
pub const ABSENT_CODE: f64 = -1.0;

/// `[code₀, certainty₀, code₁, certainty₁, …]` in expected-unit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureRow {
    pub part_id: String,
    pub values: Vec<f64>,
}

impl MetaFeatureRow {
    pub fn absent(part_id: &str, n_units: usize, marker: f64) -> Self {
        Self { part_id: part_id.to_string(), values: [ABSENT_CODE, marker].repeat(n_units) }
    }

    /// Fills the slot of unit `slot` from a prediction of class `code`.
    pub fn set(&mut self, slot: usize, code: usize, certainty: f64) {
        self.values[2 * slot] = code as f64;
        self.values[2 * slot + 1] = certainty;
    }

    pub fn is_absent(&self, slot: usize) -> bool {
        self.values[2 * slot] == ABSENT_CODE
    }
}

/// One row per entry of `part_ids`, in that order. Units are laid out in
/// `expected_units` order; a later message for the same (part, unit) pair
/// replaces an earlier one.
pub fn aggregate(
    subpredictions: &[SubPrediction],
    part_ids: &[String],
    expected_units: &[String],
    classes: &[String],
    marker: f64,
) -> Result<Vec<MetaFeatureRow>, PipelineError> {
    let slot: HashMap<&str, usize> = expected_units.iter().enumerate().map(|(k, u)| (u.as_str(), k)).collect();
    let code: HashMap<&str, usize> = classes.iter().enumerate().map(|(k, c)| (c.as_str(), k)).collect();
    let row_of: HashMap<&str, usize> = part_ids.iter().enumerate().map(|(k, p)| (p.as_str(), k)).collect();

    let mut rows: Vec<MetaFeatureRow> =
        part_ids.iter().map(|p| MetaFeatureRow::absent(p, expected_units.len(), marker)).collect();
    let mut duplicates = 0usize;
    for s in subpredictions {
        let &u = slot.get(s.unit_id.as_str()).ok_or_else(|| PipelineError::UnknownUnit(s.unit_id.clone()))?;
        let &c = code.get(s.label.as_str()).ok_or_else(|| PipelineError::UnknownLabel(s.label.clone()))?;
        let &r = row_of.get(s.part_id.as_str()).ok_or_else(|| PipelineError::UnknownPart(s.part_id.clone()))?;
        if !rows[r].is_absent(u) {
            duplicates += 1;
        }
        rows[r].set(u, c, s.certainty);
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate sub-predictions replaced earlier ones");
    }
    Ok(rows)
}
