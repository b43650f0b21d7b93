//! The three comparison scenarios and the additive-noise baseline.
//!
//! Scenario 1 evaluates every unit alone, scenario 2 the two-stage stack,
//! scenario 3 one forest on the pooled columns. Each run records the
//! messages that would cross unit boundaries, audits them and accounts for
//! their volume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::forest::{ForestParams, Grid};
use crate::stacking::{
    nested_cv_complete, nested_cv_meta, nested_cv_unit, CvPlan, EvaluationReport, FoldBook, FoldRecord, InnerCode,
    ModelRole, PipelineError,
};
use crate::tabular::{Dataset, UnitPartition};
use crate::transport::{
    account_volume, audit_confidentiality, measure_traffic, AuditVerdict, BoundaryMessage, RawIndex, TrafficSummary,
    VolumeAccount, VolumeReport,
};

/// Outputs per sub-model crossing the boundary: a label and its certainty.
pub const OUTPUTS_PER_UNIT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Scenario {
    /// Each unit analyses its own data; nothing is exchanged.
    Isolated,
    /// Units exchange sub-model predictions only.
    Stacked,
    /// All raw data is pooled centrally.
    SharedPool,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Isolated, Scenario::Stacked, Scenario::SharedPool];

    pub fn number(self) -> u8 {
        match self {
            Scenario::Isolated => 1,
            Scenario::Stacked => 2,
            Scenario::SharedPool => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.number() == n)
    }

    pub fn title(self) -> &'static str {
        match self {
            Scenario::Isolated => "isolated units",
            Scenario::Stacked => "stacked predictions",
            Scenario::SharedPool => "shared data pool",
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, String> {
        Self::from_number(n).ok_or_else(|| format!("no scenario {n}"))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scenario {} ({})", self.number(), self.title())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: Grid,
    pub plan: CvPlan,
    pub base: ForestParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { grid: Grid::full(), plan: CvPlan::default(), base: ForestParams::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    /// Sub-models in unit order, then the meta or complete model.
    pub models: Vec<EvaluationReport>,
    pub volume: VolumeReport,
    pub traffic: TrafficSummary,
    pub audit: AuditVerdict,
    pub leak_free: bool,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub account: Option<VolumeAccount>,
    #[serde(skip)]
    pub book: Option<FoldBook>,
    #[serde(skip)]
    pub transcript: Vec<BoundaryMessage>,
}

impl ScenarioReport {
    pub fn model(&self, role: &ModelRole) -> Option<&EvaluationReport> {
        self.models.iter().find(|m| &m.role == role)
    }

    pub fn meta(&self) -> Option<&EvaluationReport> {
        self.model(&ModelRole::Meta)
    }

    pub fn complete(&self) -> Option<&EvaluationReport> {
        self.model(&ModelRole::Complete)
    }

    pub fn subs(&self) -> impl Iterator<Item = &EvaluationReport> {
        self.models.iter().filter(|m| matches!(m.role, ModelRole::Sub(_)))
    }

    /// The model the scenario is judged by: the meta model, the complete
    /// model, or the best sub-model in isolation.
    pub fn headline(&self) -> Option<&EvaluationReport> {
        self.meta().or_else(|| self.complete()).or_else(|| {
            self.subs().fold(None, |best: Option<&EvaluationReport>, m| match best {
                Some(b) if b.metrics.mcc >= m.metrics.mcc => Some(b),
                _ => Some(m),
            })
        })
    }
}

/// Runs one scenario. The dataset must be imputed; `partitions` come from
/// [`crate::tabular::partition_by_unit`] on it.
pub fn run_scenario(
    dataset: &Dataset,
    partitions: &[UnitPartition],
    scenario: Scenario,
    config: &ScenarioConfig,
) -> Result<ScenarioReport, PipelineError> {
    if partitions.is_empty() {
        return Err(PipelineError::NoUnits);
    }
    let ScenarioConfig { grid, plan, base } = config;
    let (models, book, transcript) = match scenario {
        Scenario::Isolated => {
            let mut models = Vec::new();
            let mut books = Vec::new();
            for p in partitions {
                let (report, book) = nested_cv_unit(dataset, p, grid, plan, base)?;
                models.push(report);
                books.push(book);
            }
            (models, merge_books(&books), Vec::new())
        }
        Scenario::Stacked => {
            let outcome = nested_cv_meta(dataset, partitions, grid, plan, base)?;
            let mut by_part: BTreeMap<&str, Vec<BoundaryMessage>> = BTreeMap::new();
            for s in &outcome.test_subpredictions {
                by_part.entry(s.part_id.as_str()).or_default().push(s.to_message());
            }
            let mut transcript = Vec::new();
            for m in &outcome.meta_predictions {
                transcript.extend(by_part.remove(m.part_id.as_str()).unwrap_or_default());
                transcript.push(m.to_message());
            }
            let mut models = outcome.subs;
            models.push(outcome.meta);
            (models, outcome.book, transcript)
        }
        Scenario::SharedPool => {
            let (report, book) = nested_cv_complete(dataset, grid, plan, base)?;
            (vec![report], book, raw_transcript(dataset, partitions))
        }
    };

    let widths: Vec<u64> = partitions.iter().map(|p| p.width() as u64).collect();
    let account = account_volume(partitions.len() as u64, OUTPUTS_PER_UNIT, &widths, Ratio::from_integer(1));
    let audit = audit_confidentiality(&transcript, &RawIndex::from_dataset(dataset, partitions));
    let warnings = models.iter().flat_map(|m| m.warnings.iter().cloned()).collect();
    Ok(ScenarioReport {
        scenario,
        models,
        volume: VolumeReport::from(&account),
        traffic: measure_traffic(&transcript)?,
        audit,
        leak_free: book.is_leak_free(),
        warnings,
        account: Some(account),
        book: Some(book),
        transcript,
    })
}

/// One raw row per (item, visited unit) holding that unit's observed cells.
fn raw_transcript(dataset: &Dataset, partitions: &[UnitPartition]) -> Vec<BoundaryMessage> {
    let mut out = Vec::new();
    for i in 0..dataset.n_items() {
        for p in partitions.iter().filter(|p| p.coverage[i]) {
            let fields: Vec<(String, f64)> = p
                .column_indices
                .iter()
                .filter(|&&j| dataset.is_observed(i, j))
                .map(|&j| (dataset.columns()[j].to_string(), dataset.row(i)[j]))
                .collect();
            if !fields.is_empty() {
                out.push(BoundaryMessage::raw_row(&dataset.items()[i], &p.unit_id, fields));
            }
        }
    }
    out
}

/// Combines per-unit books that share one outer assignment.
fn merge_books(books: &[FoldBook]) -> FoldBook {
    let first = &books[0];
    let mut inner = first.inner.clone();
    for b in &books[1..] {
        for (row, other) in inner.iter_mut().zip(&b.inner) {
            for (c, o) in row.iter_mut().zip(other) {
                if *o == InnerCode::Train {
                    *c = InnerCode::Train;
                }
            }
        }
    }
    let records = first
        .records
        .iter()
        .enumerate()
        .map(|(f, r)| {
            let sub: BTreeSet<usize> = books.iter().flat_map(|b| b.records[f].sub_train.iter().copied()).collect();
            FoldRecord { fold: r.fold, test: r.test.clone(), sub_train: sub.into_iter().collect(), meta_train: Vec::new() }
        })
        .collect();
    FoldBook { outer: first.outer.clone(), inner, records }
}

/// Sample standard deviation of each column over observed cells; 0 with
/// fewer than two observations.
pub fn column_sigma(dataset: &Dataset) -> Vec<f64> {
    (0..dataset.n_columns())
        .map(|j| {
            let vals: Vec<f64> =
                (0..dataset.n_items()).filter(|&i| dataset.is_observed(i, j)).map(|i| dataset.row(i)[j]).collect();
            if vals.len() < 2 {
                return 0.0;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        })
        .collect()
}

/// Adds `λ·σⱼ·ε` to every observed cell, with a fresh standard normal `ε`
/// per cell. Imputed and missing cells are left alone.
pub fn add_noise(dataset: &Dataset, lambda: f64, seed: u64) -> Dataset {
    add_noise_with_sigma(dataset, lambda, seed, &column_sigma(dataset))
}

fn add_noise_with_sigma(dataset: &Dataset, lambda: f64, seed: u64, sigma: &[f64]) -> Dataset {
    let mut out = dataset.clone();
    if lambda == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = dataset.n_columns();
    let observed: Vec<bool> =
        (0..dataset.n_items() * w).map(|idx| dataset.is_observed(idx / w, idx % w)).collect();
    for (idx, v) in out.raw_values_mut().iter_mut().enumerate() {
        if observed[idx] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += lambda * sigma[idx % w] * eps;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepResult {
    pub lambdas: Vec<f64>,
    pub mcc: Vec<f64>,
    /// Per-column σ the noise was scaled by.
    pub sigma: Vec<f64>,
}

impl NoiseSweepResult {
    /// Spearman correlation between λ and MCC.
    pub fn trend(&self) -> Option<f64> {
        spearman(&self.lambdas, &self.mcc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,mcc\n");
        for (l, m) in self.lambdas.iter().zip(&self.mcc) {
            out.push_str(&format!("{l:.2},{m:.6}\n"));
        }
        out
    }
}

/// λ = 0.0, 0.1, …, 1.0.
pub fn default_lambdas() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Evaluates the shared-pool protocol on noised copies of the dataset. Every
/// λ uses the same noise draws and the same cross-validation seed, so λ = 0
/// reproduces the unnoised scenario 3 exactly.
pub fn noising_sweep(
    dataset: &Dataset,
    config: &ScenarioConfig,
    lambdas: &[f64],
    seed: u64,
) -> Result<NoiseSweepResult, PipelineError> {
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(PipelineError::InvalidPlan(format!("noise level {l} must be finite and non-negative")));
    }
    let sigma = column_sigma(dataset);
    let mcc = lambdas
        .par_iter()
        .map(|&l| {
            let noised = add_noise_with_sigma(dataset, l, seed, &sigma);
            let (report, _) = nested_cv_complete(&noised, &config.grid, &config.plan, &config.base)?;
            Ok(report.metrics.mcc)
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(NoiseSweepResult { lambdas: lambdas.to_vec(), mcc, sigma })
}

/// Ranks from 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = rank;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation; `None` for mismatched lengths or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// MCC given up by exchanging predictions instead of raw data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceOfPrivacy {
    pub mcc_stacked: f64,
    pub mcc_pooled: f64,
    /// `(MCC₃ − MCC₂) / MCC₃`; undefined when `MCC₃ ≤ 0`.
    pub relative_gap: Option<f64>,
    /// `MCC₃ / MCC₂ − 1`; undefined when `MCC₂ ≤ 0`.
    pub pooled_surplus: Option<f64>,
}

impl PriceOfPrivacy {
    pub fn from_mcc(mcc_stacked: f64, mcc_pooled: f64) -> Self {
        Self {
            mcc_stacked,
            mcc_pooled,
            relative_gap: (mcc_pooled > 0.0).then(|| (mcc_pooled - mcc_stacked) / mcc_pooled),
            pooled_surplus: (mcc_stacked > 0.0).then(|| mcc_pooled / mcc_stacked - 1.0),
        }
    }

    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{:.2}%", 100.0 * v));
        format!(
            "price of privacy: {} of the pooled MCC (pooled model ahead by {})",
            pct(self.relative_gap),
            pct(self.pooled_surplus)
        )
    }
}

/// Compares the meta model of a scenario-2 report with the complete model
/// of a scenario-3 report.
pub fn price_of_privacy(stacked: &ScenarioReport, pooled: &ScenarioReport) -> Result<PriceOfPrivacy, PipelineError> {
    let meta = stacked.meta().ok_or_else(|| PipelineError::InvalidPlan("first report has no meta model".into()))?;
    let complete =
        pooled.complete().ok_or_else(|| PipelineError::InvalidPlan("second report has no complete model".into()))?;
    Ok(PriceOfPrivacy::from_mcc(meta.metrics.mcc, complete.metrics.mcc))
}
