use serde::{Deserialize, Serialize};

use super::{ColumnId, DataError, DateStat};

/// Cells filled by marker imputation, remembered so that coverage and noise
/// can still tell observed values from imputation artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub marker: f64,
    filled: Vec<bool>,
}

/// An item × column grid of optional reals with one class label per item.
///
/// Missing cells are stored as NaN; [`Dataset::get`] exposes them as `None`.
/// Values are row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    items: Vec<String>,
    columns: Vec<ColumnId>,
    values: Vec<f64>,
    labels: Vec<usize>,
    classes: Vec<String>,
    imputation: Option<Imputation>,
}

/// Cell values compare by bit pattern, so two missing cells are equal.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
            && self.columns == other.columns
            && self.labels == other.labels
            && self.classes == other.classes
            && self.imputation == other.imputation
            && self.raw_values().len() == other.raw_values().len()
            && self.raw_values().iter().zip(other.raw_values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(
        items: Vec<String>,
        columns: Vec<ColumnId>,
        values: Vec<Option<f64>>,
        labels: Vec<usize>,
        classes: Vec<String>,
    ) -> Result<Self, DataError> {
        let values = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Self::from_raw(items, columns, values, labels, classes)
    }

    /// Builds from a row-major grid where NaN marks a missing cell.
    pub fn from_raw(
        items: Vec<String>,
        columns: Vec<ColumnId>,
        values: Vec<f64>,
        labels: Vec<usize>,
        classes: Vec<String>,
    ) -> Result<Self, DataError> {
        if classes.len() < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {}", classes.len())));
        }
        if values.len() != items.len() * columns.len() {
            return Err(DataError::Invalid(format!(
                "grid has {} cells, expected {} × {}",
                values.len(),
                items.len(),
                columns.len()
            )));
        }
        if labels.len() != items.len() {
            return Err(DataError::Invalid(format!(
                "{} labels for {} items",
                labels.len(),
                items.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(DataError::Invalid(format!("label {bad} ≥ {} classes", classes.len())));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(DataError::Invalid("infinite cell value".into()));
        }
        Ok(Self { items, columns, values, labels, classes, imputation: None })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn columns(&self) -> &[ColumnId] {
        &self.columns
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn imputation(&self) -> Option<&Imputation> {
        self.imputation.as_ref()
    }

    pub fn marker(&self) -> Option<f64> {
        self.imputation.as_ref().map(|imp| imp.marker)
    }

    pub fn column_index(&self, name: &ColumnId) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, item: usize, column: usize) -> Option<f64> {
        let v = self.values[item * self.columns.len() + column];
        (!v.is_nan()).then_some(v)
    }

    /// Raw row with NaN for missing cells.
    pub fn row(&self, item: usize) -> &[f64] {
        let w = self.columns.len();
        &self.values[item * w..(item + 1) * w]
    }

    pub(crate) fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn raw_values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// True when the cell holds a value that was not put there by imputation.
    pub fn is_observed(&self, item: usize, column: usize) -> bool {
        let idx = item * self.columns.len() + column;
        !self.values[idx].is_nan() && !self.imputation.as_ref().is_some_and(|imp| imp.filled[idx])
    }

    /// Whether the cell shows that the item passed through the column's unit.
    /// A zero date count records absence rather than presence.
    pub fn is_visit_evidence(&self, item: usize, column: usize) -> bool {
        if !self.is_observed(item, column) {
            return false;
        }
        match self.columns[column] {
            ColumnId::DateSummary { stat: DateStat::Count, .. } => self.get(item, column) != Some(0.0),
            _ => true,
        }
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Number of cells filled by imputation.
    pub fn filled_count(&self) -> usize {
        self.imputation.as_ref().map_or(0, |imp| imp.filled.iter().filter(|&&f| f).count())
    }

    pub(crate) fn set_imputation(&mut self, marker: f64, filled: Vec<bool>) {
        debug_assert_eq!(filled.len(), self.values.len());
        self.imputation = Some(Imputation { marker, filled });
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        let w = self.columns.len();
        let cells = || (0..self.items.len()).flat_map(move |i| cols.iter().map(move |&c| i * w + c));
        let imputation = self.imputation.as_ref().map(|imp| Imputation {
            marker: imp.marker,
            filled: cells().map(|idx| imp.filled[idx]).collect(),
        });
        Dataset {
            items: self.items.clone(),
            columns: cols.iter().map(|&c| self.columns[c]).collect(),
            values: cells().map(|idx| self.values[idx]).collect(),
            labels: self.labels.clone(),
            classes: self.classes.clone(),
            imputation,
        }
    }

    /// Keeps the given items, in the given order.
    pub fn select_items(&self, rows: &[usize]) -> Dataset {
        let w = self.columns.len();
        let values = rows.iter().flat_map(|&r| self.values[r * w..(r + 1) * w].iter().copied()).collect();
        let imputation = self.imputation.as_ref().map(|imp| Imputation {
            marker: imp.marker,
            filled: rows.iter().flat_map(|&r| imp.filled[r * w..(r + 1) * w].iter().copied()).collect(),
        });
        Dataset {
            items: rows.iter().map(|&r| self.items[r].clone()).collect(),
            columns: self.columns.clone(),
            values,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes.clone(),
            imputation,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset, DataError> {
        if labels.len() != self.items.len() || labels.iter().any(|&l| l >= self.classes.len()) {
            return Err(DataError::Invalid("replacement labels do not fit the dataset".into()));
        }
        Ok(Dataset { labels, ..self.clone() })
    }

    /// Extracts a column-major copy of the given columns for the given items.
    pub fn column_major(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let w = self.columns.len();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &c in cols {
            out.extend(rows.iter().map(|&r| self.values[r * w + c]));
        }
        out
    }
}
