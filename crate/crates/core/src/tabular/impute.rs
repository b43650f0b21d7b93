use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Marker imputation settings. Without an explicit marker, one is derived
/// from the observed data via [`default_marker`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub marker: Option<f64>,
}

/// `floor(min − 2·(max − min))` over all observed cells, with a spread of at
/// least 1 so that constant data still gets an out-of-range marker.
pub fn default_marker(dataset: &Dataset) -> f64 {
    let (min, max) = observed_range(dataset, None).unwrap_or((0.0, 0.0));
    let spread = (2.0 * (max - min)).max(1.0);
    (min - spread).floor()
}

fn observed_range(dataset: &Dataset, column: Option<usize>) -> Option<(f64, f64)> {
    let cols: Vec<usize> = match column {
        Some(c) => vec![c],
        None => (0..dataset.n_columns()).collect(),
    };
    let mut range: Option<(f64, f64)> = None;
    for i in 0..dataset.n_items() {
        for &j in &cols {
            if dataset.is_observed(i, j) {
                let v = dataset.get(i, j).unwrap_or_default();
                range = Some(match range {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
        }
    }
    range
}

/// Replaces every missing cell with a marker value.
///
/// The marker must lie strictly outside the observed range of every column it
/// fills. Already-imputed datasets without missing cells are returned as is.
pub fn impute_marker(dataset: &Dataset, config: &ImputationConfig) -> Result<Dataset, DataError> {
    if dataset.missing_count() == 0 {
        return Ok(dataset.clone());
    }
    let marker = match (config.marker, dataset.marker()) {
        (Some(m), _) => m,
        (None, Some(existing)) => existing,
        (None, None) => default_marker(dataset),
    };
    if !marker.is_finite() {
        return Err(DataError::Invalid(format!("marker {marker} is not finite")));
    }

    let (n, w) = (dataset.n_items(), dataset.n_columns());
    for j in 0..w {
        let has_missing = (0..n).any(|i| dataset.get(i, j).is_none());
        if !has_missing {
            continue;
        }
        if let Some((min, max)) = observed_range(dataset, Some(j)) {
            if (min..=max).contains(&marker) {
                return Err(DataError::MarkerInRange {
                    marker,
                    column: dataset.columns()[j].to_string(),
                    min,
                    max,
                });
            }
        }
    }

    let mut out = dataset.clone();
    let mut filled = match dataset.imputation() {
        Some(_) => (0..n * w).map(|idx| !dataset.is_observed(idx / w.max(1), idx % w.max(1))).collect(),
        None => vec![false; n * w],
    };
    for (v, f) in out.raw_values_mut().iter_mut().zip(filled.iter_mut()) {
        if v.is_nan() {
            *v = marker;
            *f = true;
        }
    }
    out.set_imputation(marker, filled);
    Ok(out)
}
