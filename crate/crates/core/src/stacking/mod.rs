//! Two-stage stacking across units.
//!
//! Each unit trains a forest on its own columns, using only the items that
//! passed through it. Its predictions leave the unit as [`SubPrediction`]s,
//! which [`aggregate`] turns into one [`MetaFeatureRow`] per item: a
//! `(label code, certainty)` pair per expected unit, with `(-1, marker)` for
//! units the item never visited. A meta forest is trained on those rows.
//!
//! [`nested_cv_complete`] evaluates a single model on a column set (the
//! shared-pool and isolated baselines). [`nested_cv_meta`] evaluates the
//! two-stage model: within each outer training fold, sub-models are fit on
//! half A and the meta model on the predictions those sub-models make for
//! half B, so no item trains both stages of the same evaluation path.

mod aggregate;
mod cv;
mod deploy;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, MetaFeatureRow, ABSENT_CODE};
pub use cv::{
    nested_cv_complete, nested_cv_meta, nested_cv_unit, EvaluationReport, FoldBook, FoldOutcome, FoldRecord,
    InnerCode, MetaOutcome, MetaPrediction, ModelRole,
};
pub use deploy::{fit_deployment, Deployment, MetaModelArtifact, UnitModelArtifact};

use crate::forest::{self, argmax, ForestError, ForestModel, ForestParams, Matrix, ProbabilisticClassifier};
use crate::metrics::MetricsError;
use crate::tabular::{DataError, Dataset, UnitPartition};
use crate::transport::{BoundaryMessage, MessageKind, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset has missing cells; impute markers first")]
    NotImputed,
    #[error("outer fold {fold} trains on a single class")]
    SingleClassFold { fold: usize },
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("sub-prediction for unknown part {0:?}")]
    UnknownPart(String),
    #[error("invalid cross-validation plan: {0}")]
    InvalidPlan(String),
    #[error("feature {0:?} is not owned by this unit")]
    UnknownFeature(String),
    #[error("no units to stack")]
    NoUnits,
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// The only object a unit sends across its boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPrediction {
    pub part_id: String,
    pub unit_id: String,
    pub label: String,
    /// Probability of `label`.
    pub certainty: f64,
}

impl SubPrediction {
    pub fn to_message(&self) -> BoundaryMessage {
        BoundaryMessage::sub_prediction(&self.part_id, &self.unit_id, &self.label, self.certainty)
    }

    pub fn from_message(m: &BoundaryMessage) -> Result<Self, TransportError> {
        if m.kind() != MessageKind::SubPrediction {
            return Err(TransportError::Malformed(format!("expected sub_prediction, got {}", m.kind().as_str())));
        }
        Ok(Self {
            part_id: m.part_id().ok_or(TransportError::MissingField("part_id"))?.to_string(),
            unit_id: m.unit_id().ok_or(TransportError::MissingField("unit_id"))?.to_string(),
            label: m.text("prediction").ok_or(TransportError::MissingField("prediction"))?.to_string(),
            certainty: m.number("probability").ok_or(TransportError::MissingField("probability"))?,
        })
    }
}

/// Fold counts of both nested cross-validation protocols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub meta_folds: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { outer_folds: 3, inner_folds: 2, meta_folds: 3, stratified: true, seed: 0 }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.outer_folds < 2 || self.inner_folds < 2 || self.meta_folds < 2 {
            return Err(PipelineError::InvalidPlan("every fold count must be at least 2".into()));
        }
        Ok(())
    }
}

/// Fold assignment, stratified by label or plainly shuffled.
pub fn assign_folds(y: &[u32], k: usize, seed: u64, stratified: bool) -> Vec<usize> {
    if stratified {
        forest::stratified_folds(y, k, seed)
    } else {
        forest::stratified_folds(&vec![0; y.len()], k, seed)
    }
}

/// Deterministic child seed for a tagged sub-task.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(forest::tree::splitmix64(base), |acc, &t| forest::tree::splitmix64(acc ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub(crate) fn require_imputed(dataset: &Dataset) -> Result<f64, PipelineError> {
    if dataset.missing_count() > 0 {
        return Err(PipelineError::NotImputed);
    }
    Ok(dataset.marker().unwrap_or_else(|| crate::tabular::default_marker(dataset)))
}

pub(crate) fn labels_u32(dataset: &Dataset, items: &[usize]) -> Vec<u32> {
    items.iter().map(|&i| dataset.labels()[i] as u32).collect()
}

pub(crate) fn matrix(dataset: &Dataset, items: &[usize], cols: &[usize]) -> Result<Matrix, ForestError> {
    Matrix::from_column_major(items.len(), cols.len(), dataset.column_major(items, cols))
}

/// Fits one forest per unit on that unit's covered `items`. Units with fewer
/// than `min_covered` covered items are skipped (`None`) with a warning.
pub fn train_subunits(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    items: &[usize],
    params_per_unit: &[ForestParams],
    min_covered: usize,
) -> Result<Vec<Option<ForestModel>>, PipelineError> {
    require_imputed(dataset)?;
    if params_per_unit.len() != partitions.len() {
        return Err(PipelineError::InvalidPlan(format!(
            "{} parameter sets for {} units",
            params_per_unit.len(),
            partitions.len()
        )));
    }
    partitions
        .iter()
        .zip(params_per_unit)
        .map(|(p, params)| {
            let covered: Vec<usize> = items.iter().copied().filter(|&i| p.coverage[i]).collect();
            if covered.len() < min_covered.max(1) {
                log::warn!("unit {} has {} covered items; excluded", p.unit_id, covered.len());
                return Ok(None);
            }
            let x = matrix(dataset, &covered, &p.column_indices)?;
            let y = labels_u32(dataset, &covered);
            Ok(Some(forest::train_forest(&x, &y, dataset.classes(), params)?))
        })
        .collect()
}

/// One [`SubPrediction`] per (covered unit, item), item-major.
pub fn emit_subpredictions(
    models: &[Option<ForestModel>],
    partitions: &[UnitPartition],
    dataset: &Dataset,
    items: &[usize],
) -> Result<Vec<SubPrediction>, PipelineError> {
    Ok(emit_indexed(models, partitions, dataset, items)?.into_iter().map(|(_, s)| s).collect())
}

/// [`emit_subpredictions`], with each message's dataset item index.
pub(crate) fn emit_indexed(
    models: &[Option<ForestModel>],
    partitions: &[UnitPartition],
    dataset: &Dataset,
    items: &[usize],
) -> Result<Vec<(usize, SubPrediction)>, PipelineError> {
    let per_unit: Vec<Vec<Option<(usize, f64)>>> = models
        .iter()
        .zip(partitions)
        .map(|(model, p)| -> Result<_, PipelineError> {
            let Some(model) = model else {
                return Ok(vec![None; items.len()]);
            };
            if model.feature_width() != p.width() {
                return Err(ForestError::WidthMismatch { expected: model.feature_width(), got: p.width() }.into());
            }
            let mut row = vec![0.0; p.width()];
            items
                .iter()
                .map(|&i| {
                    if !p.coverage[i] {
                        return Ok(None);
                    }
                    for (r, &j) in row.iter_mut().zip(&p.column_indices) {
                        *r = dataset.row(i)[j];
                    }
                    Ok(Some(argmax(&model.predict_proba(&row)?)))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::new();
    for (n, &i) in items.iter().enumerate() {
        for (u, p) in partitions.iter().enumerate() {
            if let Some((label, certainty)) = per_unit[u][n] {
                out.push((
                    i,
                    SubPrediction {
                        part_id: dataset.items()[i].clone(),
                        unit_id: p.unit_id.clone(),
                        label: dataset.classes()[label].clone(),
                        certainty,
                    },
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{generate_synthetic, impute_marker, partition_by_unit, ImputationConfig, SynthSpec};

    fn small() -> (Dataset, Vec<UnitPartition>) {
        let spec = SynthSpec {
            unit_feature_counts: vec![4, 4, 4, 4],
            n_items: 400,
            visit_probabilities: vec![1.0, 0.5, 0.5, 1.0],
            signal_strength: 0.9,
            class_prior: 0.3,
            seed: 7,
            dates_per_unit: 0,
        };
        let ds = impute_marker(&generate_synthetic(&spec).unwrap(), &ImputationConfig::default()).unwrap();
        let parts = partition_by_unit(&ds).unwrap();
        (ds, parts)
    }

    #[test]
    fn one_message_per_visited_unit() {
        let (ds, parts) = small();
        let items: Vec<usize> = (0..ds.n_items()).collect();
        let params = vec![ForestParams { n_estimators: 5, max_depth: 4, ..Default::default() }; 4];
        let models = train_subunits(&ds, &parts, &items, &params, 6).unwrap();
        assert_eq!(models.iter().filter(|m| m.is_some()).count(), 4);
        let subs = emit_subpredictions(&models, &parts, &ds, &items).unwrap();
        let visits: usize = parts.iter().map(UnitPartition::covered_count).sum();
        assert_eq!(subs.len(), visits);
        for s in &subs {
            assert!(s.certainty >= 0.5 && s.certainty <= 1.0);
            assert_eq!(SubPrediction::from_message(&s.to_message()).unwrap(), *s);
        }
    }

    #[test]
    fn sparse_unit_is_excluded() {
        let (ds, parts) = small();
        let params = vec![ForestParams { n_estimators: 2, ..Default::default() }; 4];
        let models = train_subunits(&ds, &parts, &[0, 1, 2], &params, 6).unwrap();
        assert!(models.iter().all(Option::is_none));
    }

    #[test]
    fn rejects_unimputed_data() {
        let spec = SynthSpec::four_lines(50, 1);
        let ds = generate_synthetic(&spec).unwrap();
        let parts = partition_by_unit(&ds).unwrap();
        let params = vec![ForestParams::default(); 4];
        assert!(matches!(train_subunits(&ds, &parts, &[0], &params, 1), Err(PipelineError::NotImputed)));
    }

    #[test]
    fn seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2]), derive_seed(5, &[2]));
    }
}
