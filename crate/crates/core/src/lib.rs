//! Stacked classification across organizational units.
//!
//! Every unit (a production line, a sensor group, a company) owns a private
//! slice of the columns of a tabular dataset and trains its own random forest
//! on it. The only thing a unit ever sends across its boundary is a
//! [`SubPrediction`](stacking::SubPrediction): an item id, a predicted label
//! and the probability of that label. A meta unit aggregates these messages
//! into fixed-width feature rows and trains a second forest on top.
//!
//! The crate is organised bottom-up:
//!
//! - [`tabular`]: datasets, CSV ingestion, unit partitions, marker imputation,
//!   date compression and a synthetic planted-pattern generator.
//! - [`forest`]: CART trees, random forests and grid search.
//! - [`metrics`]: confusion matrices, MCC and the rest of the metric suite.
//! - [`transport`]: boundary messages, the confidentiality audit and volume
//!   accounting.
//! - [`stacking`]: sub-model training, aggregation and both nested
//!   cross-validation protocols.
//! - [`baselines`]: the three comparison scenarios and the noising baseline.

pub mod baselines;
pub mod forest;
pub mod metrics;
pub mod stacking;
pub mod tabular;
pub mod transport;

mod error;

pub use error::{Error, Result};
