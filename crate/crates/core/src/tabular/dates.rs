use std::collections::BTreeMap;

use super::{ColumnId, Dataset, DateStat};

/// Replaces raw date columns by four summaries per scope: earliest date,
/// latest date, their difference, and the number of populated date cells.
///
/// With `per_unit` each unit's date columns form their own scope; otherwise
/// all date columns form one global scope. Items without any populated date
/// cell in a scope get a count of 0 and missing min/max/span cells, which
/// imputation later turns into the marker (or the marker right away when the
/// dataset is already imputed). Datasets without date columns are returned
/// unchanged.
pub fn compress_dates(dataset: &Dataset, per_unit: bool) -> Dataset {
    let mut scopes: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
    let mut kept = Vec::new();
    for (j, col) in dataset.columns().iter().enumerate() {
        if col.is_date() {
            let scope = if per_unit { col.unit() } else { None };
            scopes.entry(scope).or_default().push(j);
        } else {
            kept.push(j);
        }
    }
    if scopes.is_empty() {
        return dataset.clone();
    }

    let mut columns: Vec<ColumnId> = kept.iter().map(|&j| dataset.columns()[j]).collect();
    for &unit in scopes.keys() {
        columns.extend(DateStat::ALL.map(|stat| ColumnId::DateSummary { unit, stat }));
    }

    let marker = dataset.marker();
    let width = columns.len();
    let mut values = Vec::with_capacity(dataset.n_items() * width);
    let mut filled = Vec::with_capacity(dataset.n_items() * width);
    for i in 0..dataset.n_items() {
        for &j in &kept {
            values.push(dataset.row(i)[j]);
            filled.push(!dataset.row(i)[j].is_nan() && !dataset.is_observed(i, j));
        }
        for cols in scopes.values() {
            let mut summary: Option<(f64, f64)> = None;
            let mut count = 0usize;
            for &j in cols {
                if dataset.is_observed(i, j) {
                    let v = dataset.row(i)[j];
                    count += 1;
                    summary = Some(summary.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))));
                }
            }
            match summary {
                Some((lo, hi)) => {
                    values.extend([lo, hi, hi - lo]);
                    filled.extend([false; 3]);
                }
                None => {
                    let absent = marker.unwrap_or(f64::NAN);
                    values.extend([absent; 3]);
                    filled.extend([marker.is_some(); 3]);
                }
            }
            values.push(count as f64);
            filled.push(false);
        }
    }

    let mut out = Dataset::from_raw(
        dataset.items().to_vec(),
        columns,
        values,
        dataset.labels().to_vec(),
        dataset.classes().to_vec(),
    )
    .expect("shape derived from a valid dataset");
    if let Some(m) = marker {
        out.set_imputation(m, filled);
    }
    out
}
