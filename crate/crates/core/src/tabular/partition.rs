use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// The columns one unit owns, and which items passed through it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPartition {
    pub unit_id: String,
    pub unit: u32,
    pub column_indices: Vec<usize>,
    /// `coverage[i]` is true iff item `i` has any observed cell in this unit.
    pub coverage: Vec<bool>,
}

impl UnitPartition {
    pub fn width(&self) -> usize {
        self.column_indices.len()
    }

    pub fn covered_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.coverage.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i)
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

pub fn unit_name(unit: u32) -> String {
    format!("L{unit}")
}

/// One partition per distinct unit index, in ascending unit order.
///
/// Coverage is derived from observed (non-imputed) cells, so it is the same
/// before and after [`impute_marker`](super::impute_marker). Global date
/// summaries have no owning unit and are rejected.
pub fn partition_by_unit(dataset: &Dataset) -> Result<Vec<UnitPartition>, DataError> {
    let mut by_unit: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, col) in dataset.columns().iter().enumerate() {
        let unit = col
            .unit()
            .ok_or_else(|| DataError::Invalid(format!("column {col} has no owning unit")))?;
        by_unit.entry(unit).or_default().push(j);
    }
    Ok(by_unit
        .into_iter()
        .map(|(unit, column_indices)| {
            let coverage = (0..dataset.n_items())
                .map(|i| column_indices.iter().any(|&j| dataset.is_visit_evidence(i, j)))
                .collect();
            UnitPartition { unit_id: unit_name(unit), unit, column_indices, coverage }
        })
        .collect())
}
