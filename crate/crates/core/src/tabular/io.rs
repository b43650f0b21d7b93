//! CSV ingestion and export.
//!
//! The dialect is plain comma-separated UTF-8 with a header row holding an
//! `Id` column, feature columns named after [`ColumnId`] and a `Response`
//! column with the class index. An empty cell is a missing value.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ColumnId, DataError, Dataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DateRule {
    /// `_D` columns are dates, `_F` columns numeric.
    #[default]
    ByName,
    /// Every feature column of the file is a date.
    AllColumns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaOptions {
    pub classes: Vec<String>,
    pub dates: DateRule,
    pub id_column: String,
    pub response_column: String,
}

impl Default for SchemaOptions {
    fn default() -> Self {
        Self {
            classes: vec!["no scrap".into(), "scrap".into()],
            dates: DateRule::ByName,
            id_column: "Id".into(),
            response_column: "Response".into(),
        }
    }
}

struct Table {
    items: Vec<String>,
    columns: Vec<ColumnId>,
    values: Vec<f64>,
    responses: Option<Vec<usize>>,
}

fn read_table<R: Read>(reader: R, opts: &SchemaOptions, need_response: bool) -> Result<Table, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();

    let mut id_pos = None;
    let mut response_pos = None;
    let mut feature_pos = Vec::new();
    let mut columns = Vec::new();
    for (k, name) in header.iter().enumerate() {
        if name == opts.id_column {
            id_pos = Some(k);
        } else if name == opts.response_column {
            response_pos = Some(k);
        } else {
            let col: ColumnId = name
                .parse()
                .map_err(|_| DataError::MalformedHeader(format!("unrecognized column name {name:?}")))?;
            let col = match opts.dates {
                DateRule::ByName => col,
                DateRule::AllColumns => col.into_date(),
            };
            feature_pos.push(k);
            columns.push(col);
        }
    }
    let id_pos = id_pos.ok_or_else(|| DataError::MalformedHeader(format!("no {:?} column", opts.id_column)))?;
    if need_response && response_pos.is_none() {
        return Err(DataError::MalformedHeader(format!("no {:?} column", opts.response_column)));
    }

    let mut items = Vec::new();
    let mut values = Vec::new();
    let mut responses = response_pos.map(|_| Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        items.push(record.get(id_pos).unwrap_or_default().to_string());
        for (&k, col) in feature_pos.iter().zip(&columns) {
            let cell = record.get(k).unwrap_or_default().trim();
            if cell.is_empty() {
                values.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    DataError::NonNumeric { row, column: col.to_string(), value: cell.to_string() }
                })?;
                values.push(v);
            }
        }
        if let (Some(pos), Some(out)) = (response_pos, responses.as_mut()) {
            let raw = record.get(pos).unwrap_or_default().trim();
            let label = raw
                .parse::<usize>()
                .ok()
                .filter(|&l| l < opts.classes.len())
                .ok_or_else(|| DataError::UnknownLabel { row, value: raw.to_string() })?;
            out.push(label);
        }
    }
    Ok(Table { items, columns, values, responses })
}

/// Loads one CSV file with `Id`, feature and `Response` columns.
pub fn load_csv(path: impl AsRef<Path>, opts: &SchemaOptions) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_csv_from(file, opts)
}

pub fn load_csv_from<R: Read>(reader: R, opts: &SchemaOptions) -> Result<Dataset, DataError> {
    let table = read_table(reader, opts, true)?;
    Dataset::from_raw(
        table.items,
        table.columns,
        table.values,
        table.responses.unwrap_or_default(),
        opts.classes.clone(),
    )
}

/// Loads a labelled feature file and joins the columns of a second file
/// (typically the date file, which may lack a `Response` column) by item id.
/// Items absent from the second file get missing cells there.
pub fn load_csv_with_dates(
    features: impl AsRef<Path>,
    dates: impl AsRef<Path>,
    opts: &SchemaOptions,
) -> Result<Dataset, DataError> {
    let base = load_csv(features, opts)?;
    let extra = read_table(std::fs::File::open(dates)?, opts, false)?;
    let index: HashMap<&str, usize> = extra.items.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let (w_base, w_extra) = (base.n_columns(), extra.columns.len());
    let mut values = Vec::with_capacity(base.n_items() * (w_base + w_extra));
    for (i, id) in base.items().iter().enumerate() {
        values.extend_from_slice(base.row(i));
        match index.get(id.as_str()) {
            Some(&r) => values.extend_from_slice(&extra.values[r * w_extra..(r + 1) * w_extra]),
            None => values.extend(std::iter::repeat_n(f64::NAN, w_extra)),
        }
    }
    let mut columns = base.columns().to_vec();
    columns.extend(extra.columns);
    Dataset::from_raw(base.items().to_vec(), columns, values, base.labels().to_vec(), base.classes().to_vec())
}

/// Writes a dataset in the same dialect [`load_csv`] reads.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv_to(dataset, file)
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["Id".to_string()];
    header.extend(dataset.columns().iter().map(ToString::to_string));
    header.push("Response".into());
    wtr.write_record(&header)?;
    for i in 0..dataset.n_items() {
        let mut record = Vec::with_capacity(dataset.n_columns() + 2);
        record.push(dataset.items()[i].clone());
        record.extend((0..dataset.n_columns()).map(|j| match dataset.get(i, j) {
            Some(v) if dataset.is_observed(i, j) => v.to_string(),
            _ => String::new(),
        }));
        record.push(dataset.labels()[i].to_string());
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}
