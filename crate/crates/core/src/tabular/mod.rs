//! Sparse tabular data owned by several units.
//!
//! Column names follow the `L{line}_S{station}_F{feature}` convention (dates
//! use `D` instead of `F`). The line index names the unit that owns the
//! column; [`partition_by_unit`] groups columns accordingly.

mod column;
mod dataset;
mod dates;
mod impute;
mod io;
mod partition;
mod synth;

use thiserror::Error;

pub use column::{ColumnId, DateStat, FeatureId};
pub use dataset::{Dataset, Imputation};
pub use dates::compress_dates;
pub use impute::{default_marker, impute_marker, ImputationConfig};
pub use io::{load_csv, load_csv_from, load_csv_with_dates, write_csv, write_csv_to, DateRule, SchemaOptions};
pub use partition::{partition_by_unit, unit_name, UnitPartition};
pub use synth::{generate_synthetic, generate_synthetic_with_trace, planted_score, SynthSpec, SynthTrace};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: unknown label value {value:?}")]
    UnknownLabel { row: usize, value: String },
    #[error("invalid column name {0:?}")]
    InvalidColumnName(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("marker {marker} lies inside the observed range [{min}, {max}] of column {column}")]
    MarkerInRange { marker: f64, column: String, min: f64, max: f64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
