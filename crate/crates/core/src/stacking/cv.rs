//! Nested cross-validation for single models and for the two-stage stack.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate, assign_folds, derive_seed, emit_indexed, emit_subpredictions, labels_u32, matrix, require_imputed, CvPlan,
    PipelineError, SubPrediction,
};
use crate::forest::{
    argmax, grid_search, train_forest, ForestModel, ForestParams, Grid, Matrix, ProbabilisticClassifier, ScoreTable,
    SearchConfig,
};
use crate::metrics::{self, ConfusionMatrix, MetricSuite};
use crate::tabular::{Dataset, UnitPartition};
use crate::transport::BoundaryMessage;

const TAG_OUTER: u64 = 0x0_0E7;
const TAG_SPLIT: u64 = 0xAB;
const TAG_COMPLETE: u64 = 1;
const TAG_META: u64 = 2;
const TAG_UNIT: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Sub(String),
    Meta,
    Complete,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelRole::Sub(unit) => write!(f, "sub-model {unit}"),
            ModelRole::Meta => f.write_str("meta model"),
            ModelRole::Complete => f.write_str("complete model"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Selected `(n_estimators, max_depth)`; `None` when no model was fit.
    pub best: Option<(usize, usize)>,
    pub mcc: f64,
    pub grid: Option<ScoreTable>,
}

/// Pooled outer-fold result of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub role: ModelRole,
    pub protocol: String,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSuite,
    pub folds: Vec<FoldOutcome>,
    pub warnings: Vec<String>,
    /// Pooled outer-test prediction and certainty, per dataset item.
    #[serde(skip)]
    pub predictions: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerCode {
    /// Fits the sub-models.
    A,
    /// Fits the meta model.
    B,
    /// Fits a single-stage model.
    Train,
    Test,
}

impl InnerCode {
    fn symbol(self) -> char {
        match self {
            InnerCode::A => 'A',
            InnerCode::B => 'B',
            InnerCode::Train => 'T',
            InnerCode::Test => '-',
        }
    }
}

/// Items used in each role within one outer fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub test: Vec<usize>,
    /// Items that fit at least one first-stage (or single-stage) model.
    pub sub_train: Vec<usize>,
    /// Items whose sub-predictions fit the meta model.
    pub meta_train: Vec<usize>,
}

/// Fold bookkeeping of one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldBook {
    pub outer: Vec<usize>,
    /// `inner[item][fold]`
    pub inner: Vec<Vec<InnerCode>>,
    pub records: Vec<FoldRecord>,
}

impl FoldBook {
    /// No item trains both stages of a fold, and no test item trains anything.
    pub fn is_leak_free(&self) -> bool {
        self.records.iter().all(|r| {
            let sub: HashSet<usize> = r.sub_train.iter().copied().collect();
            let meta: HashSet<usize> = r.meta_train.iter().copied().collect();
            sub.is_disjoint(&meta) && r.test.iter().all(|i| !sub.contains(i) && !meta.contains(i))
        })
    }

    /// One line per item: `id,outer fold,codes per outer fold`, where a code
    /// is `A`/`B` (two-stage halves), `T` (single-stage training) or `-`.
    pub fn render(&self, items: &[String]) -> String {
        let mut out = String::new();
        for (i, id) in items.iter().enumerate() {
            let codes: Vec<String> = self.inner[i].iter().map(|c| c.symbol().to_string()).collect();
            out.push_str(&format!("{id},{},{}\n", self.outer[i], codes.join(";")));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaPrediction {
    pub part_id: String,
    pub label: String,
    pub certainty: f64,
}

impl MetaPrediction {
    pub fn to_message(&self) -> BoundaryMessage {
        BoundaryMessage::meta_prediction(&self.part_id, &self.label, self.certainty)
    }
}

/// Result of [`nested_cv_meta`].
#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub meta: EvaluationReport,
    /// Outer-test reports of the A-trained sub-models, in unit order.
    pub subs: Vec<EvaluationReport>,
    pub book: FoldBook,
    /// Sub-predictions sent while scoring the outer-test folds, item-major.
    pub test_subpredictions: Vec<SubPrediction>,
    /// Meta predictions for every item, in item order.
    pub meta_predictions: Vec<MetaPrediction>,
}

fn complete_topology(plan: &CvPlan) -> String {
    format!(
        "outer {} folds ({}); grid search on outer-train with {} inner folds; best cell refit on outer-train; \
         scored on outer-test; confusion matrices pooled",
        plan.outer_folds,
        if plan.stratified { "stratified" } else { "shuffled" },
        plan.inner_folds
    )
}

fn meta_topology(plan: &CvPlan) -> String {
    format!(
        "outer {} folds ({}); outer-train split into halves A and B; sub-models grid-searched with {} inner folds \
         and fit on A; A-models predict B; meta model grid-searched with {} folds on B rows and refit on all of B; \
         outer-test scored by A-models plus meta model; confusion matrices pooled",
        plan.outer_folds,
        if plan.stratified { "stratified" } else { "shuffled" },
        plan.inner_folds,
        plan.meta_folds
    )
}

/// Majority class of `labels` (lowest index on ties) with its share.
fn majority(labels: impl Iterator<Item = usize>, n_classes: usize) -> (usize, f64) {
    let mut counts = vec![0.0; n_classes];
    let mut total = 0.0;
    for l in labels {
        counts[l] += 1.0;
        total += 1.0;
    }
    if total == 0.0 {
        return (0, 1.0 / n_classes as f64);
    }
    let (k, c) = argmax(&counts);
    (k, c / total)
}

struct Tuned {
    model: ForestModel,
    table: ScoreTable,
    warnings: Vec<String>,
}

fn tune_and_fit(
    x: &Matrix,
    y: &[u32],
    classes: &[String],
    grid: &Grid,
    base: &ForestParams,
    folds: usize,
    seed: u64,
) -> Result<Tuned, PipelineError> {
    let params = ForestParams { seed: derive_seed(seed, &[0]), ..base.clone() };
    let cfg = SearchConfig { folds, seed: derive_seed(seed, &[1]), metric: metrics::mcc };
    let result = grid_search(grid, x, y, classes, &params, &cfg)?;
    let model = train_forest(x, y, classes, &result.best)?;
    Ok(Tuned { model, table: result.table, warnings: result.warnings })
}

fn outer_assignment(dataset: &Dataset, plan: &CvPlan) -> Vec<usize> {
    let y = labels_u32(dataset, &(0..dataset.n_items()).collect::<Vec<_>>());
    assign_folds(&y, plan.outer_folds, derive_seed(plan.seed, &[TAG_OUTER]), plan.stratified)
}

fn split_outer(outer: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..outer.len()).partition(|&i| outer[i] != fold)
}

fn check_train_classes(dataset: &Dataset, train: &[usize], fold: usize) -> Result<(), PipelineError> {
    let first = train.first().map(|&i| dataset.labels()[i]);
    if train.iter().all(|&i| Some(dataset.labels()[i]) == first) {
        return Err(PipelineError::SingleClassFold { fold });
    }
    Ok(())
}

struct FoldScores {
    outcome: FoldOutcome,
    predictions: Vec<(usize, (usize, f64))>,
    warnings: Vec<String>,
    sub_train: Vec<usize>,
}

/// Trains on the `eligible` training items of one column set and scores
/// every test item; ineligible test items get the training majority class.
#[allow(clippy::too_many_arguments)]
fn single_stage_fold(
    dataset: &Dataset,
    cols: &[usize],
    eligible: Option<&[bool]>,
    train: &[usize],
    test: &[usize],
    grid: &Grid,
    base: &ForestParams,
    plan: &CvPlan,
    fold: usize,
    seed: u64,
    label: &ModelRole,
) -> Result<FoldScores, PipelineError> {
    let is_eligible = |i: usize| eligible.is_none_or(|e| e[i]);
    let fit: Vec<usize> = train.iter().copied().filter(|&i| is_eligible(i)).collect();
    let n_classes = dataset.classes().len();
    let fallback_pool = if fit.is_empty() { train } else { &fit[..] };
    let fallback = majority(fallback_pool.iter().map(|&i| dataset.labels()[i]), n_classes);
    let mut warnings = Vec::new();

    let tuned = if fit.len() >= 2 * plan.inner_folds {
        let x = matrix(dataset, &fit, cols)?;
        let tuned = tune_and_fit(&x, &labels_u32(dataset, &fit), dataset.classes(), grid, base, plan.inner_folds, seed)?;
        warnings.extend(tuned.warnings.iter().map(|w| format!("{label}, outer fold {fold}: {w}")));
        Some(tuned)
    } else {
        let msg = format!("{label}, outer fold {fold}: {} training items, no model fit", fit.len());
        log::warn!("{msg}");
        warnings.push(msg);
        None
    };

    let mut predictions = Vec::with_capacity(test.len());
    let mut row = vec![0.0; cols.len()];
    for &i in test {
        let pred = match &tuned {
            Some(t) if is_eligible(i) => {
                for (r, &j) in row.iter_mut().zip(cols) {
                    *r = dataset.row(i)[j];
                }
                argmax(&t.model.predict_proba(&row)?)
            }
            _ => fallback,
        };
        predictions.push((i, pred));
    }
    let outcome = FoldOutcome {
        fold,
        n_train: fit.len(),
        n_test: test.len(),
        best: tuned.as_ref().map(|t| (t.model.params().n_estimators, t.model.params().max_depth)),
        mcc: fold_mcc(dataset, &predictions)?,
        grid: tuned.map(|t| t.table),
    };
    Ok(FoldScores { outcome, predictions, warnings, sub_train: fit })
}

fn fold_mcc(dataset: &Dataset, predictions: &[(usize, (usize, f64))]) -> Result<f64, PipelineError> {
    let truth: Vec<usize> = predictions.iter().map(|&(i, _)| dataset.labels()[i]).collect();
    let pred: Vec<usize> = predictions.iter().map(|&(_, (p, _))| p).collect();
    Ok(metrics::mcc(&metrics::confusion(&truth, &pred, dataset.classes())?))
}

fn pooled_report(
    dataset: &Dataset,
    role: ModelRole,
    protocol: String,
    folds: Vec<(FoldOutcome, Vec<(usize, (usize, f64))>)>,
    warnings: Vec<String>,
) -> Result<EvaluationReport, PipelineError> {
    let mut predictions = vec![(0, 0.0); dataset.n_items()];
    let mut outcomes = Vec::with_capacity(folds.len());
    for (outcome, preds) in folds {
        for (i, p) in preds {
            predictions[i] = p;
        }
        outcomes.push(outcome);
    }
    let pred: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let confusion = metrics::confusion(dataset.labels(), &pred, dataset.classes())?;
    let metrics = metrics::suite(&confusion)?;
    Ok(EvaluationReport { role, protocol, confusion, metrics, folds: outcomes, warnings, predictions })
}

#[allow(clippy::too_many_arguments)]
fn nested_single_stage(
    dataset: &Dataset,
    cols: &[usize],
    eligible: Option<&[bool]>,
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
    role: ModelRole,
    tag: u64,
) -> Result<(EvaluationReport, FoldBook), PipelineError> {
    plan.validate()?;
    require_imputed(dataset)?;
    let outer = outer_assignment(dataset, plan);
    let folds: Vec<FoldScores> = (0..plan.outer_folds)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = split_outer(&outer, fold);
            check_train_classes(dataset, &train, fold)?;
            let seed = derive_seed(plan.seed, &[fold as u64, tag]);
            single_stage_fold(dataset, cols, eligible, &train, &test, grid, base, plan, fold, seed, &role)
        })
        .collect::<Result<_, _>>()?;

    let mut inner = vec![vec![InnerCode::Test; plan.outer_folds]; dataset.n_items()];
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut pooled = Vec::new();
    for (fold, scores) in folds.into_iter().enumerate() {
        for (i, codes) in inner.iter_mut().enumerate() {
            if outer[i] != fold {
                codes[fold] = InnerCode::Train;
            }
        }
        records.push(FoldRecord {
            fold,
            test: scores.predictions.iter().map(|&(i, _)| i).collect(),
            sub_train: scores.sub_train,
            meta_train: Vec::new(),
        });
        warnings.extend(scores.warnings);
        pooled.push((scores.outcome, scores.predictions));
    }
    let report = pooled_report(dataset, role, complete_topology(plan), pooled, warnings)?;
    Ok((report, FoldBook { outer, inner, records }))
}

/// Nested cross-validation of one forest on every column (the shared pool).
pub fn nested_cv_complete(
    dataset: &Dataset,
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
) -> Result<(EvaluationReport, FoldBook), PipelineError> {
    let cols: Vec<usize> = (0..dataset.n_columns()).collect();
    nested_single_stage(dataset, &cols, None, grid, plan, base, ModelRole::Complete, TAG_COMPLETE)
}

/// Nested cross-validation of one unit in isolation. The model is fit on
/// covered items only; uncovered test items get the training majority class,
/// so every item is scored.
pub fn nested_cv_unit(
    dataset: &Dataset,
    partition: &UnitPartition,
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
) -> Result<(EvaluationReport, FoldBook), PipelineError> {
    let role = ModelRole::Sub(partition.unit_id.clone());
    let tag = TAG_UNIT + u64::from(partition.unit);
    nested_single_stage(
        dataset,
        &partition.column_indices,
        Some(&partition.coverage),
        grid,
        plan,
        base,
        role,
        tag,
    )
}

struct MetaFold {
    meta: FoldScores,
    subs: Vec<FoldScores>,
    a: Vec<usize>,
    b: Vec<usize>,
    test_subs: Vec<(usize, SubPrediction)>,
}

#[allow(clippy::too_many_arguments)]
fn meta_fold(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    expected_units: &[String],
    marker: f64,
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
    outer: &[usize],
    fold: usize,
) -> Result<MetaFold, PipelineError> {
    let (train, test) = split_outer(outer, fold);
    check_train_classes(dataset, &train, fold)?;
    let n_classes = dataset.classes().len();
    let halves = assign_folds(
        &labels_u32(dataset, &train),
        2,
        derive_seed(plan.seed, &[fold as u64, TAG_SPLIT]),
        plan.stratified,
    );
    let (a, b): (Vec<usize>, Vec<usize>) = {
        let (a, b): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
            train.iter().copied().zip(halves).partition(|&(_, h)| h == 0);
        (a.into_iter().map(|p| p.0).collect(), b.into_iter().map(|p| p.0).collect())
    };

    // First stage: one tuned forest per unit on its covered A items.
    let min_covered = 2 * plan.outer_folds;
    let fitted: Vec<(Option<Tuned>, Vec<usize>, Vec<String>)> = partitions
        .par_iter()
        .map(|p| -> Result<_, PipelineError> {
            let role = ModelRole::Sub(p.unit_id.clone());
            let fit: Vec<usize> = a.iter().copied().filter(|&i| p.coverage[i]).collect();
            if fit.len() < min_covered {
                let msg = format!(
                    "{role}, outer fold {fold}: {} covered items in half A; slot absent-coded",
                    fit.len()
                );
                log::warn!("{msg}");
                return Ok((None, fit, vec![msg]));
            }
            let seed = derive_seed(plan.seed, &[fold as u64, TAG_UNIT + u64::from(p.unit), 2]);
            let x = matrix(dataset, &fit, &p.column_indices)?;
            let tuned =
                tune_and_fit(&x, &labels_u32(dataset, &fit), dataset.classes(), grid, base, plan.inner_folds, seed)?;
            let warnings = tuned.warnings.iter().map(|w| format!("{role}, outer fold {fold}: {w}")).collect();
            Ok((Some(tuned), fit, warnings))
        })
        .collect::<Result<_, _>>()?;
    let models: Vec<Option<ForestModel>> = fitted.iter().map(|(t, _, _)| t.as_ref().map(|t| t.model.clone())).collect();

    // Second stage: meta rows for B, then a tuned meta forest on them.
    let ids = |items: &[usize]| -> Vec<String> { items.iter().map(|&i| dataset.items()[i].clone()).collect() };
    let b_subs = emit_subpredictions(&models, partitions, dataset, &b)?;
    let b_rows = aggregate(&b_subs, &ids(&b), expected_units, dataset.classes(), marker)?;
    let b_x = Matrix::from_rows(&b_rows.iter().map(|r| r.values.as_slice()).collect::<Vec<_>>())?;
    let meta_seed = derive_seed(plan.seed, &[fold as u64, TAG_META]);
    let meta = tune_and_fit(&b_x, &labels_u32(dataset, &b), dataset.classes(), grid, base, plan.meta_folds, meta_seed)?;
    let meta_warnings: Vec<String> =
        meta.warnings.iter().map(|w| format!("{}, outer fold {fold}: {w}", ModelRole::Meta)).collect();

    // Scoring: A-models predict outer-test, the meta model scores the rows.
    let t_subs: Vec<SubPrediction> = emit_indexed(&models, partitions, dataset, &test)?.into_iter().map(|(_, s)| s).collect();
    let t_rows = aggregate(&t_subs, &ids(&test), expected_units, dataset.classes(), marker)?;
    let meta_preds: Vec<(usize, (usize, f64))> = test
        .iter()
        .zip(&t_rows)
        .map(|(&i, row)| Ok((i, argmax(&meta.model.predict_proba(&row.values)?))))
        .collect::<Result<_, PipelineError>>()?;
    let meta_outcome = FoldOutcome {
        fold,
        n_train: b.len(),
        n_test: test.len(),
        best: Some((meta.model.params().n_estimators, meta.model.params().max_depth)),
        mcc: fold_mcc(dataset, &meta_preds)?,
        grid: Some(meta.table),
    };

    // Sub-model reports from the same outer-test predictions.
    let mut subs = Vec::with_capacity(partitions.len());
    for (u, (tuned, fit, warnings)) in fitted.into_iter().enumerate() {
        let pool = if fit.is_empty() { &a } else { &fit };
        let fallback = majority(pool.iter().map(|&i| dataset.labels()[i]), n_classes);
        let mut preds: Vec<(usize, (usize, f64))> = test.iter().map(|&i| (i, fallback)).collect();
        for (n, row) in t_rows.iter().enumerate() {
            if !row.is_absent(u) {
                preds[n].1 = (row.values[2 * u] as usize, row.values[2 * u + 1]);
            }
        }
        let outcome = FoldOutcome {
            fold,
            n_train: fit.len(),
            n_test: test.len(),
            best: tuned.as_ref().map(|t| (t.model.params().n_estimators, t.model.params().max_depth)),
            mcc: fold_mcc(dataset, &preds)?,
            grid: tuned.map(|t| t.table),
        };
        subs.push(FoldScores { outcome, predictions: preds, warnings, sub_train: fit });
    }

    let test_subs = emit_indexed(&models, partitions, dataset, &test)?;

    Ok(MetaFold {
        meta: FoldScores { outcome: meta_outcome, predictions: meta_preds, warnings: meta_warnings, sub_train: b.clone() },
        subs,
        a,
        b,
        test_subs,
    })
}

/// Nested cross-validation of the two-stage stack, with per-unit reports of
/// the A-trained sub-models on the same outer-test folds.
pub fn nested_cv_meta(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    grid: &Grid,
    plan: &CvPlan,
    base: &ForestParams,
) -> Result<MetaOutcome, PipelineError> {
    plan.validate()?;
    let marker = require_imputed(dataset)?;
    if partitions.is_empty() {
        return Err(PipelineError::NoUnits);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = dataset.items().iter().find(|id| !seen.insert(id.as_str())) {
        return Err(PipelineError::InvalidPlan(format!("duplicate item id {dup:?}")));
    }
    let expected_units: Vec<String> = partitions.iter().map(|p| p.unit_id.clone()).collect();
    let outer = outer_assignment(dataset, plan);

    let folds: Vec<MetaFold> = (0..plan.outer_folds)
        .into_par_iter()
        .map(|fold| meta_fold(dataset, partitions, &expected_units, marker, grid, plan, base, &outer, fold))
        .collect::<Result<_, _>>()?;

    let mut inner = vec![vec![InnerCode::Test; plan.outer_folds]; dataset.n_items()];
    let mut records = Vec::new();
    let mut meta_folds = Vec::new();
    let mut meta_warnings = Vec::new();
    let mut sub_folds: Vec<Vec<(FoldOutcome, Vec<(usize, (usize, f64))>)>> = vec![Vec::new(); partitions.len()];
    let mut sub_warnings: Vec<Vec<String>> = vec![Vec::new(); partitions.len()];
    let mut test_subs = Vec::new();
    for (fold, f) in folds.into_iter().enumerate() {
        for &i in &f.a {
            inner[i][fold] = InnerCode::A;
        }
        for &i in &f.b {
            inner[i][fold] = InnerCode::B;
        }
        let mut sub_train: Vec<usize> = f.subs.iter().flat_map(|s| s.sub_train.iter().copied()).collect();
        sub_train.sort_unstable();
        sub_train.dedup();
        records.push(FoldRecord {
            fold,
            test: f.meta.predictions.iter().map(|&(i, _)| i).collect(),
            sub_train,
            meta_train: f.b,
        });
        for (u, s) in f.subs.into_iter().enumerate() {
            sub_warnings[u].extend(s.warnings);
            sub_folds[u].push((s.outcome, s.predictions));
        }
        meta_warnings.extend(f.meta.warnings);
        meta_folds.push((f.meta.outcome, f.meta.predictions));
        test_subs.extend(f.test_subs);
    }
    // Item-major order; the sort is stable, so units stay in unit order.
    test_subs.sort_by_key(|&(i, _)| i);

    let topology = meta_topology(plan);
    let meta = pooled_report(dataset, ModelRole::Meta, topology.clone(), meta_folds, meta_warnings)?;
    let subs = partitions
        .iter()
        .zip(sub_folds.into_iter().zip(sub_warnings))
        .map(|(p, (folds, warnings))| {
            pooled_report(dataset, ModelRole::Sub(p.unit_id.clone()), topology.clone(), folds, warnings)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta_predictions = meta
        .predictions
        .iter()
        .enumerate()
        .map(|(i, &(label, certainty))| MetaPrediction {
            part_id: dataset.items()[i].clone(),
            label: dataset.classes()[label].clone(),
            certainty,
        })
        .collect();

    Ok(MetaOutcome {
        meta,
        subs,
        book: FoldBook { outer, inner, records },
        test_subpredictions: test_subs.into_iter().map(|(_, s)| s).collect(),
        meta_predictions,
    })
}
