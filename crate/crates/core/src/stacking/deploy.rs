//! Trained models packaged for serving.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::cv::MetaPrediction;
use super::{
    aggregate, assign_folds, derive_seed, emit_subpredictions, labels_u32, matrix, require_imputed, CvPlan,
    MetaFeatureRow, PipelineError, SubPrediction,
};
use crate::forest::{
    argmax, grid_search, train_forest, ForestModel, ForestParams, Grid, Matrix, ProbabilisticClassifier, SearchConfig,
};
use crate::metrics;
use crate::tabular::{Dataset, UnitPartition};

/// A sub-unit's model with the column names it reads, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitModelArtifact {
    pub unit_id: String,
    pub columns: Vec<String>,
    pub model: ForestModel,
    pub marker: f64,
}

impl UnitModelArtifact {
    /// Predicts from named feature values; absent columns get the marker.
    pub fn predict_features(&self, part_id: &str, features: &BTreeMap<String, f64>) -> Result<SubPrediction, PipelineError> {
        let index: HashMap<&str, usize> = self.columns.iter().enumerate().map(|(k, c)| (c.as_str(), k)).collect();
        let mut row = vec![self.marker; self.columns.len()];
        for (name, &value) in features {
            let &k = index.get(name.as_str()).ok_or_else(|| PipelineError::UnknownFeature(name.clone()))?;
            row[k] = value;
        }
        self.predict_row(part_id, &row)
    }

    pub fn predict_row(&self, part_id: &str, row: &[f64]) -> Result<SubPrediction, PipelineError> {
        let (label, certainty) = argmax(&self.model.predict_proba(row)?);
        Ok(SubPrediction {
            part_id: part_id.to_string(),
            unit_id: self.unit_id.clone(),
            label: self.model.classes()[label].clone(),
            certainty,
        })
    }
}

/// The meta model with the unit layout of its feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaModelArtifact {
    pub expected_units: Vec<String>,
    pub classes: Vec<String>,
    pub model: ForestModel,
    pub marker: f64,
}

impl MetaModelArtifact {
    pub fn predict_row(&self, row: &MetaFeatureRow) -> Result<MetaPrediction, PipelineError> {
        let (label, certainty) = argmax(&self.model.predict_proba(&row.values)?);
        Ok(MetaPrediction { part_id: row.part_id.clone(), label: self.classes[label].clone(), certainty })
    }

    /// Aggregates whatever sub-predictions have arrived for one part, then
    /// predicts.
    pub fn predict_subs(&self, part_id: &str, subs: &[SubPrediction]) -> Result<MetaPrediction, PipelineError> {
        let rows = aggregate(subs, &[part_id.to_string()], &self.expected_units, &self.classes, self.marker)?;
        self.predict_row(&rows[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub units: Vec<UnitModelArtifact>,
    pub meta: MetaModelArtifact,
}

impl Deployment {
    /// Runs the whole stack in process: sub-predictions for every visited
    /// unit, then one meta prediction per item.
    pub fn predict_in_process(
        &self,
        dataset: &Dataset,
        partitions: &[UnitPartition],
        items: &[usize],
    ) -> Result<(Vec<SubPrediction>, Vec<MetaPrediction>), PipelineError> {
        let models: Vec<Option<ForestModel>> = partitions
            .iter()
            .map(|p| self.units.iter().find(|u| u.unit_id == p.unit_id).map(|u| u.model.clone()))
            .collect();
        let subs = emit_subpredictions(&models, partitions, dataset, items)?;
        let ids: Vec<String> = items.iter().map(|&i| dataset.items()[i].clone()).collect();
        let rows = aggregate(&subs, &ids, &self.meta.expected_units, &self.meta.classes, self.meta.marker)?;
        let metas = rows.iter().map(|r| self.meta.predict_row(r)).collect::<Result<_, _>>()?;
        Ok((subs, metas))
    }
}

/// Fits servable models on all items: the items are split into halves A and
/// B as in one outer fold of the two-stage protocol, sub-models are tuned and
/// fit on A, the meta model on B.
pub fn fit_deployment(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
) -> Result<Deployment, PipelineError> {
    plan.validate()?;
    let marker = require_imputed(dataset)?;
    if partitions.is_empty() {
        return Err(PipelineError::NoUnits);
    }
    let all: Vec<usize> = (0..dataset.n_items()).collect();
    let halves = assign_folds(&labels_u32(dataset, &all), 2, derive_seed(plan.seed, &[0xDE]), plan.stratified);
    let (a, b): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| halves[i] == 0);

    let tune = |x: &Matrix, y: &[u32], folds: usize, tag: u64| -> Result<ForestModel, PipelineError> {
        let params = ForestParams { seed: derive_seed(plan.seed, &[tag, 0]), ..base.clone() };
        let cfg = SearchConfig { folds, seed: derive_seed(plan.seed, &[tag, 1]), metric: metrics::mcc };
        let best = grid_search(grid, x, y, dataset.classes(), &params, &cfg)?.best;
        Ok(train_forest(x, y, dataset.classes(), &best)?)
    };

    let mut units = Vec::new();
    let mut models = Vec::new();
    for p in partitions {
        let fit: Vec<usize> = a.iter().copied().filter(|&i| p.coverage[i]).collect();
        if fit.len() < 2 * plan.outer_folds {
            log::warn!("unit {} has {} covered items in half A; not deployed", p.unit_id, fit.len());
            models.push(None);
            continue;
        }
        let x = matrix(dataset, &fit, &p.column_indices)?;
        let model = tune(&x, &labels_u32(dataset, &fit), plan.inner_folds, 0x100 + u64::from(p.unit))?;
        units.push(UnitModelArtifact {
            unit_id: p.unit_id.clone(),
            columns: p.column_indices.iter().map(|&j| dataset.columns()[j].to_string()).collect(),
            model: model.clone(),
            marker,
        });
        models.push(Some(model));
    }

    let expected_units: Vec<String> = partitions.iter().map(|p| p.unit_id.clone()).collect();
    let subs = emit_subpredictions(&models, partitions, dataset, &b)?;
    let ids: Vec<String> = b.iter().map(|&i| dataset.items()[i].clone()).collect();
    let rows = aggregate(&subs, &ids, &expected_units, dataset.classes(), marker)?;
    let x = Matrix::from_rows(&rows.iter().map(|r| r.values.as_slice()).collect::<Vec<_>>())?;
    let meta = tune(&x, &labels_u32(dataset, &b), plan.meta_folds, 0x200)?;
    Ok(Deployment {
        units,
        meta: MetaModelArtifact { expected_units, classes: dataset.classes().to_vec(), model: meta, marker },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{generate_synthetic, impute_marker, partition_by_unit, ImputationConfig, SynthSpec};

    #[test]
    fn in_process_matches_per_part_calls() {
        let spec = SynthSpec::four_lines(500, 11);
        let raw = generate_synthetic(&spec).unwrap();
        let ds = impute_marker(&raw, &ImputationConfig::default()).unwrap();
        let parts = partition_by_unit(&ds).unwrap();
        let dep = fit_deployment(&ds, &parts, &Grid::single(10, 6), &CvPlan::default(), &ForestParams::default())
            .unwrap();
        assert_eq!(dep.units.len(), 4);
        let items: Vec<usize> = (0..50).collect();
        let (subs, metas) = dep.predict_in_process(&ds, &parts, &items).unwrap();
        for &i in &items {
            // Rebuild each part's calls from its observed raw cells only.
            let mut received = Vec::new();
            for (u, p) in parts.iter().enumerate() {
                if !p.coverage[i] {
                    continue;
                }
                let features: BTreeMap<String, f64> = p
                    .column_indices
                    .iter()
                    .filter_map(|&j| raw.get(i, j).map(|v| (raw.columns()[j].to_string(), v)))
                    .collect();
                received.push(dep.units[u].predict_features(&ds.items()[i], &features).unwrap());
            }
            let expected: Vec<&SubPrediction> = subs.iter().filter(|s| s.part_id == ds.items()[i]).collect();
            assert_eq!(received.iter().collect::<Vec<_>>(), expected);
            assert_eq!(dep.meta.predict_subs(&ds.items()[i], &received).unwrap(), metas[i]);
        }
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let spec = SynthSpec::four_lines(200, 2);
        let ds = impute_marker(&generate_synthetic(&spec).unwrap(), &ImputationConfig::default()).unwrap();
        let parts = partition_by_unit(&ds).unwrap();
        let dep = fit_deployment(&ds, &parts, &Grid::single(3, 3), &CvPlan::default(), &ForestParams::default())
            .unwrap();
        let bad = BTreeMap::from([("L9_S0_F0".to_string(), 1.0)]);
        assert!(matches!(dep.units[0].predict_features("x", &bad), Err(PipelineError::UnknownFeature(_))));
        let empty = dep.units[0].predict_features("x", &BTreeMap::new()).unwrap();
        assert!(empty.certainty >= 0.5);
    }
}
