//! Synthetic multi-unit data with a planted cross-unit pattern.
//!
//! Each item visits each unit with that unit's visit probability; unvisited
//! units leave all their cells missing. A visited unit `u` draws a latent
//! factor `z ~ N(0, 1)`; its first three features are `z` plus independent
//! Gaussian noise and the rest are pure noise. The unit score `g_u` is the
//! mean of the first three features.
//!
//! The planted label is positive iff `S + 0.49·tanh(G) ≥ τ`, where `S` sums
//! `sign(g_u)` and `G` sums `g_u` over visited units. `S` decides the label;
//! the bounded `tanh` term only orders items sharing the same `S`, which lets
//! `τ` hit any class prior. Each label is then flipped with probability
//! `(1 − signal_strength) / 2`, so `τ` targets the pre-flip rate that gives
//! the requested prior after flipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ColumnId, DataError, Dataset, FeatureId};

const FACTOR_NOISE: f64 = 0.5;
const TIE_WEIGHT: f64 = 0.49;
const SIGNAL_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub unit_feature_counts: Vec<usize>,
    pub n_items: usize,
    pub visit_probabilities: Vec<f64>,
    pub signal_strength: f64,
    pub class_prior: f64,
    pub seed: u64,
    /// Raw date columns per unit; dates carry no label signal.
    #[serde(default)]
    pub dates_per_unit: usize,
}

impl SynthSpec {
    /// The desk-scale analogue of the four-line production case.
    pub fn four_lines(n_items: usize, seed: u64) -> Self {
        Self {
            unit_feature_counts: vec![16; 4],
            n_items,
            visit_probabilities: vec![1.0, 0.3, 0.3, 0.87],
            signal_strength: 0.9,
            class_prior: 0.3,
            seed,
            dates_per_unit: 0,
        }
    }

    fn flip_probability(&self) -> f64 {
        (1.0 - self.signal_strength) / 2.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.unit_feature_counts.is_empty() || self.unit_feature_counts.contains(&0) {
            return bad("every unit needs at least one feature".into());
        }
        if self.visit_probabilities.len() != self.unit_feature_counts.len() {
            return bad(format!(
                "{} visit probabilities for {} units",
                self.visit_probabilities.len(),
                self.unit_feature_counts.len()
            ));
        }
        if let Some(p) = self.visit_probabilities.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return bad(format!("visit probability {p} outside (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad(format!("signal strength {} outside [0, 1]", self.signal_strength));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return bad(format!("class prior {} outside (0, 1)", self.class_prior));
        }
        self.planted_rate().map(|_| ())
    }

    /// Pre-flip positive rate needed to reach `class_prior` after flipping.
    /// `None` means the labels are pure coin flips (no signal).
    fn planted_rate(&self) -> Result<Option<f64>, DataError> {
        let f = self.flip_probability();
        if 1.0 - 2.0 * f <= 0.0 {
            if (self.class_prior - 0.5).abs() > 1e-12 {
                return Err(DataError::InvalidSpec(format!(
                    "with zero signal every label is a fair coin; prior {} is unreachable",
                    self.class_prior
                )));
            }
            return Ok(None);
        }
        let q = (self.class_prior - f) / (1.0 - 2.0 * f);
        if !(q > 0.0 && q < 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "prior {} is unreachable with flip probability {f}",
                self.class_prior
            )));
        }
        Ok(Some(q))
    }
}

/// Generator bookkeeping, for oracles that need the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTrace {
    /// `visits[item][unit]`
    pub visits: Vec<Vec<bool>>,
    /// `S + 0.49·tanh(G)` per item.
    pub scores: Vec<f64>,
    /// Labels before flipping.
    pub planted: Vec<usize>,
    pub threshold: f64,
}

impl SynthTrace {
    /// Number of missing cells the generator left behind.
    pub fn missing_cells(&self, spec: &SynthSpec) -> usize {
        self.visits
            .iter()
            .flat_map(|v| v.iter().zip(&spec.unit_feature_counts))
            .filter(|(&visited, _)| !visited)
            .map(|(_, &n)| n + spec.dates_per_unit)
            .sum()
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    generate_synthetic_with_trace(spec).map(|(ds, _)| ds)
}

/// The planted score of one item, recomputed from its raw feature row.
pub fn planted_score(spec: &SynthSpec, row: &[f64]) -> f64 {
    let mut sign_sum = 0.0;
    let mut score_sum = 0.0;
    let mut offset = 0;
    for &n in &spec.unit_feature_counts {
        let cells = &row[offset..offset + n];
        offset += n + spec.dates_per_unit;
        if cells.iter().all(|v| v.is_nan()) {
            continue;
        }
        let k = n.min(SIGNAL_FEATURES);
        let g = cells[..k].iter().sum::<f64>() / k as f64;
        sign_sum += if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
        score_sum += g;
    }
    sign_sum + TIE_WEIGHT * score_sum.tanh()
}

pub fn generate_synthetic_with_trace(spec: &SynthSpec) -> Result<(Dataset, SynthTrace), DataError> {
    spec.validate()?;
    let planted_rate = spec.planted_rate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut columns = Vec::new();
    for (u, &n) in spec.unit_feature_counts.iter().enumerate() {
        let u = u as u32;
        columns.extend((0..n as u32).map(|f| ColumnId::Numeric(FeatureId::new(u, f / 4, f))));
        columns.extend((0..spec.dates_per_unit as u32).map(|d| ColumnId::Date(FeatureId::new(u, d / 4, 1000 + d))));
    }
    let width = columns.len();

    let mut values = Vec::with_capacity(spec.n_items * width);
    let mut visits = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let start: f64 = rng.random_range(10.0..1700.0);
        let mut item_visits = Vec::with_capacity(spec.unit_feature_counts.len());
        for (u, (&n, &p)) in spec.unit_feature_counts.iter().zip(&spec.visit_probabilities).enumerate() {
            let visited = rng.random::<f64>() < p;
            item_visits.push(visited);
            if !visited {
                values.extend(std::iter::repeat_n(f64::NAN, n + spec.dates_per_unit));
                continue;
            }
            let z: f64 = rng.sample(StandardNormal);
            for f in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(if f < SIGNAL_FEATURES { z + FACTOR_NOISE * noise } else { noise });
            }
            for d in 0..spec.dates_per_unit {
                let step: f64 = rng.random_range(0.0..2.0);
                values.push(((start + 50.0 * u as f64 + 3.0 * d as f64 + step) * 100.0).round() / 100.0);
            }
        }
        visits.push(item_visits);
    }

    let scores: Vec<f64> = values.chunks(width.max(1)).take(spec.n_items).map(|row| planted_score(spec, row)).collect();
    let threshold = match planted_rate {
        _ if scores.is_empty() => 0.0,
        None => f64::NEG_INFINITY,
        Some(q) => {
            let positives = ((q * scores.len() as f64).round() as usize).min(scores.len());
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if positives == 0 {
                f64::INFINITY
            } else {
                sorted[positives - 1]
            }
        }
    };

    let planted: Vec<usize> = scores.iter().map(|&c| usize::from(c >= threshold)).collect();
    let flip = spec.flip_probability();
    let labels = planted
        .iter()
        .map(|&l| match planted_rate {
            None => usize::from(rng.random::<f64>() < 0.5),
            Some(_) if rng.random::<f64>() < flip => 1 - l,
            Some(_) => l,
        })
        .collect();

    let items = (0..spec.n_items).map(|i| format!("#{:03}", i + 1)).collect();
    let dataset = Dataset::from_raw(items, columns, values, labels, vec!["no scrap".into(), "scrap".into()])?;
    Ok((dataset, SynthTrace { visits, scores, planted, threshold }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion, mcc};
    use crate::tabular::{compress_dates, impute_marker, partition_by_unit, DateStat, ImputationConfig};

    fn spec(n_items: usize, probs: Vec<f64>, signal: f64, prior: f64) -> SynthSpec {
        SynthSpec {
            unit_feature_counts: vec![5; probs.len()],
            n_items,
            visit_probabilities: probs,
            signal_strength: signal,
            class_prior: prior,
            seed: 11,
            dates_per_unit: 0,
        }
    }

    #[test]
    fn noiseless_plant_is_exactly_recoverable() {
        let s = spec(2000, vec![1.0; 3], 1.0, 0.3);
        let (ds, trace) = generate_synthetic_with_trace(&s).unwrap();
        // Bayes rule: recompute the planted score from the raw row.
        let pred: Vec<usize> =
            (0..ds.n_items()).map(|i| usize::from(planted_score(&s, ds.row(i)) >= trace.threshold)).collect();
        let cm = confusion(ds.labels(), &pred, ds.classes()).unwrap();
        assert_eq!(mcc(&cm), 1.0);
    }

    #[test]
    fn zero_signal_labels_ignore_features() {
        let s = spec(4000, vec![1.0, 1.0], 0.0, 0.5);
        let (ds, trace) = generate_synthetic_with_trace(&s).unwrap();
        let cm = confusion(ds.labels(), &trace.planted, ds.classes()).unwrap();
        assert!(mcc(&cm).abs() < 0.05);
        assert!(generate_synthetic(&spec(10, vec![1.0], 0.0, 0.3)).is_err());
    }

    #[test]
    fn infeasible_prior_rejected() {
        // flip probability 0.25 caps the reachable prior range at (0.25, 0.75)
        assert!(generate_synthetic(&spec(10, vec![1.0], 0.5, 0.2)).is_err());
        assert!(generate_synthetic(&spec(10, vec![0.0], 0.9, 0.3)).is_err());
    }

    #[test]
    fn label_rate_near_prior() {
        let s = SynthSpec::four_lines(20_000, 7);
        let ds = generate_synthetic(&s).unwrap();
        let rate = ds.labels().iter().sum::<usize>() as f64 / ds.n_items() as f64;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn deterministic_in_seed() {
        let s = spec(300, vec![0.5, 0.9], 0.8, 0.4);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        let bits = |d: &Dataset| d.raw_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = generate_synthetic(&SynthSpec { seed: 12, ..s }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn coverage_matches_cell_scan() {
        let s = SynthSpec {
            unit_feature_counts: vec![5, 7],
            ..spec(500, vec![0.6, 0.4], 0.9, 0.3)
        };
        let (ds, trace) = generate_synthetic_with_trace(&s).unwrap();
        let parts = partition_by_unit(&ds).unwrap();
        assert_eq!(parts.iter().map(|p| p.width()).collect::<Vec<_>>(), vec![5, 7]);
        for (u, part) in parts.iter().enumerate() {
            for i in 0..ds.n_items() {
                let all_missing = part.column_indices.iter().all(|&j| ds.get(i, j).is_none());
                assert_eq!(part.coverage[i], !all_missing);
                assert_eq!(part.coverage[i], trace.visits[i][u]);
            }
        }
    }

    #[test]
    fn sparse_imputation_bookkeeping() {
        // 4 units visited with probability 0.19 each leave ~81% of cells missing.
        let s = spec(2000, vec![0.19; 4], 0.9, 0.3);
        let (ds, trace) = generate_synthetic_with_trace(&s).unwrap();
        let missing = trace.missing_cells(&s);
        assert_eq!(ds.missing_count(), missing);
        let rate = missing as f64 / (ds.n_items() * ds.n_columns()) as f64;
        assert!((rate - 0.81).abs() < 0.02, "missing rate {rate}");
        let imputed = impute_marker(&ds, &ImputationConfig::default()).unwrap();
        assert_eq!(imputed.missing_count(), 0);
        let marker = imputed.marker().unwrap();
        let marker_cells = imputed.raw_values().iter().filter(|&&v| v == marker).count();
        assert_eq!(marker_cells, missing);
    }

    #[test]
    fn date_summaries_match_scan() {
        let s = SynthSpec { dates_per_unit: 3, ..spec(20, vec![0.7, 0.5], 0.9, 0.3) };
        let ds = generate_synthetic(&s).unwrap();
        let out = compress_dates(&ds, true);
        assert_eq!(out.n_columns(), 10 + 8);
        for i in 0..ds.n_items() {
            for unit in 0..2u32 {
                // One-pass scan over raw date cells of this unit.
                let dates: Vec<f64> = ds
                    .columns()
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_date() && c.unit() == Some(unit))
                    .filter_map(|(j, _)| ds.get(i, j))
                    .collect();
                let col = |stat| out.column_index(&ColumnId::DateSummary { unit: Some(unit), stat }).unwrap();
                assert_eq!(out.get(i, col(DateStat::Count)), Some(dates.len() as f64));
                if dates.is_empty() {
                    assert_eq!(out.get(i, col(DateStat::Min)), None);
                } else {
                    let lo = dates.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = dates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(out.get(i, col(DateStat::Min)), Some(lo));
                    assert_eq!(out.get(i, col(DateStat::Max)), Some(hi));
                    assert_eq!(out.get(i, col(DateStat::Span)), Some(hi - lo));
                }
            }
        }
    }
}
