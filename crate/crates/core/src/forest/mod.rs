//! Random-forest classifier with probability outputs, and grid search.
//!
//! Trees are CART with Gini splits ([`tree`]). A forest draws one bootstrap
//! resample per tree and samples `features_per_split` candidate columns per
//! node. Tree `t` is seeded from `seed + t`, so training order and thread
//! count never change the model, and a smaller forest with the same seed is a
//! prefix of a bigger one.

mod grid;
mod matrix;
pub mod tree;

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{grid_search, stratified_folds, Grid, GridResult, ScoreTable, SearchConfig};
pub use matrix::Matrix;
pub use tree::{Tree, TreeNode};

use tree::{splitmix64, SortedColumns, TreeConfig};

/// Serialization format version of [`ForestModel`].
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("empty training input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("expected {expected} features, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    UnknownLabel { label: u32, n_classes: usize },
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("model serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Number of candidate features drawn per node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// ⌊√d⌋, at least 1.
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, width: usize) -> usize {
        let n = match self {
            MaxFeatures::Sqrt => (width as f64).sqrt().floor() as usize,
            MaxFeatures::All => width,
            MaxFeatures::Count(n) => n.min(width),
        };
        n.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub features_per_split: MaxFeatures,
    pub min_samples_leaf: u32,
    pub class_weights: Option<Vec<f64>>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 25,
            features_per_split: MaxFeatures::Sqrt,
            min_samples_leaf: 1,
            class_weights: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, n_classes: usize) -> Result<(), ForestError> {
        if self.n_estimators == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(ForestError::InvalidParams(
                "n_estimators, max_depth and min_samples_leaf must be positive".into(),
            ));
        }
        if let MaxFeatures::Count(0) = self.features_per_split {
            return Err(ForestError::InvalidParams("features_per_split must be positive".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_classes || w.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(ForestError::InvalidParams(format!(
                    "class_weights needs {n_classes} positive finite entries"
                )));
            }
        }
        Ok(())
    }

    /// One-line description of the sampling settings, for report headers.
    pub fn describe(&self) -> String {
        format!(
            "n_estimators={} max_depth={} features_per_split={:?} min_samples_leaf={} bootstrap={} class_weights={:?}",
            self.n_estimators,
            self.max_depth,
            self.features_per_split,
            self.min_samples_leaf,
            self.bootstrap,
            self.class_weights
        )
    }
}

/// A trained classifier that yields one probability per class.
pub trait ProbabilisticClassifier {
    fn classes(&self) -> &[String];
    fn feature_width(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ForestError>;

    /// Predicted class index and its probability.
    fn predict(&self, x: &[f64]) -> Result<(usize, f64), ForestError> {
        Ok(argmax(&self.predict_proba(x)?))
    }
}

/// Something that fits a [`ProbabilisticClassifier`] to labelled rows.
pub trait Learner {
    type Model: ProbabilisticClassifier;
    fn fit(&self, x: &Matrix, y: &[u32], classes: &[String]) -> Result<Self::Model, ForestError>;
}

impl Learner for ForestParams {
    type Model = ForestModel;
    fn fit(&self, x: &Matrix, y: &[u32], classes: &[String]) -> Result<ForestModel, ForestError> {
        train_forest(x, y, classes, self)
    }
}

/// Index of the largest entry (lowest index on ties) and its value.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in p.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    version: u32,
    params: ForestParams,
    classes: Vec<String>,
    feature_width: usize,
    trees: Vec<Tree>,
}

impl ForestModel {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn check_width(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.feature_width {
            return Err(ForestError::WidthMismatch { expected: self.feature_width, got: x.len() });
        }
        Ok(())
    }

    /// Mean leaf distribution of the first `n_trees` trees, each cut at
    /// `max_depth`. Equal to the prediction of a forest trained with those
    /// settings and the same seed.
    pub fn predict_proba_truncated(&self, x: &[f64], n_trees: usize, max_depth: usize) -> Result<Vec<f64>, ForestError> {
        self.check_width(x)?;
        let n_trees = n_trees.min(self.trees.len());
        let k = self.classes.len();
        let weights = self.params.class_weights.as_deref();
        let mut sum = vec![0.0; k];
        let mut dist = vec![0.0; k];
        for tree in &self.trees[..n_trees] {
            tree.distribution(tree.leaf_index(x, max_depth), weights, &mut dist);
            for (s, d) in sum.iter_mut().zip(&dist) {
                *s += d;
            }
        }
        for s in &mut sum {
            *s /= n_trees as f64;
        }
        Ok(sum)
    }

    /// Probabilities for every row of a matrix.
    pub fn predict_proba_rows(&self, x: &Matrix) -> Result<Vec<Vec<f64>>, ForestError> {
        if x.n_cols() != self.feature_width {
            return Err(ForestError::WidthMismatch { expected: self.feature_width, got: x.n_cols() });
        }
        (0..x.n_rows()).into_par_iter().map(|r| self.predict_proba(&x.row(r))).collect()
    }

    pub fn to_json(&self) -> Result<String, ForestError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let model: ForestModel = serde_json::from_str(text)?;
        if model.version != MODEL_VERSION {
            return Err(ForestError::Version(model.version));
        }
        Ok(model)
    }

    /// Hash of the serialized model; equal models hash equally.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.to_json().expect("models always serialize").hash(&mut h);
        h.finish()
    }
}

impl ProbabilisticClassifier for ForestModel {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn feature_width(&self) -> usize {
        self.feature_width
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, ForestError> {
        self.predict_proba_truncated(x, self.trees.len(), usize::MAX)
    }
}

fn check_inputs(x: &Matrix, y: &[u32], n_classes: usize) -> Result<(), ForestError> {
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(ForestError::EmptyInput);
    }
    if y.len() != x.n_rows() {
        return Err(ForestError::Shape(format!("{} labels for {} rows", y.len(), x.n_rows())));
    }
    if n_classes < 2 {
        return Err(ForestError::InvalidParams("at least two classes required".into()));
    }
    if let Some(&label) = y.iter().find(|&&l| l as usize >= n_classes) {
        return Err(ForestError::UnknownLabel { label, n_classes });
    }
    for c in 0..x.n_cols() {
        if let Some(row) = x.column(c).iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite { row, column: c });
        }
    }
    Ok(())
}

/// Bootstrap multiplicities of tree `t`: `n` draws with replacement.
fn bootstrap(n: usize, tree_seed: u64, enabled: bool) -> Vec<u32> {
    if !enabled {
        return vec![1; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    counts
}

pub(crate) fn train_trees(
    x: &Matrix,
    y: &[u32],
    n_classes: usize,
    params: &ForestParams,
    sorted: &SortedColumns,
) -> Result<Vec<Tree>, ForestError> {
    let max_features = params.features_per_split.resolve(x.n_cols());
    (0..params.n_estimators)
        .into_par_iter()
        .map(|t| {
            let tree_seed = splitmix64(params.seed.wrapping_add(t as u64));
            let multiplicity = bootstrap(x.n_rows(), tree_seed, params.bootstrap);
            let cfg = TreeConfig {
                max_depth: params.max_depth,
                max_features,
                min_samples_leaf: params.min_samples_leaf,
                class_weights: params.class_weights.as_deref(),
                seed: splitmix64(tree_seed ^ 0x5EED),
            };
            tree::train_tree(x, y, n_classes, &multiplicity, sorted, &cfg)
        })
        .collect()
}

/// Trains `params.n_estimators` trees, each on its own bootstrap resample.
pub fn train_forest(x: &Matrix, y: &[u32], classes: &[String], params: &ForestParams) -> Result<ForestModel, ForestError> {
    check_inputs(x, y, classes.len())?;
    params.validate(classes.len())?;
    let sorted = SortedColumns::new(x);
    let trees = train_trees(x, y, classes.len(), params, &sorted)?;
    Ok(ForestModel {
        version: MODEL_VERSION,
        params: params.clone(),
        classes: classes.to_vec(),
        feature_width: x.n_cols(),
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn classes() -> Vec<String> {
        vec!["no scrap".into(), "scrap".into()]
    }

    fn random_data(seed: u64, n: usize, d: usize) -> (Matrix, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = rows.iter().map(|r| u32::from(r[0] + 0.3 * rng.random_range(-1.0..1.0) > 0.0)).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    /// Independent tree walk over the public node view.
    fn walk(tree: &Tree, x: &[f64]) -> Vec<f64> {
        let mut idx = 0;
        loop {
            match tree.node(idx) {
                TreeNode::Split { column, threshold, left, right } => {
                    idx = if x[column] <= threshold { left } else { right };
                }
                TreeNode::Leaf { class_counts } => {
                    let total: u32 = class_counts.iter().sum();
                    return class_counts.iter().map(|&c| c as f64 / total as f64).collect();
                }
            }
        }
    }

    #[test]
    fn one_row_forest_reproduces_label() {
        let x = Matrix::from_rows(&[vec![0.5, 2.0]]).unwrap();
        let params = ForestParams { n_estimators: 1, ..Default::default() };
        let model = train_forest(&x, &[1], &classes(), &params).unwrap();
        assert_eq!(model.predict_proba(&[0.5, 2.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(model.predict(&[0.5, 2.0]).unwrap(), (1, 1.0));
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), (1, 0.4));
        // Two single-row trees with opposite pure leaves.
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let params = ForestParams { n_estimators: 60, max_depth: 1, ..Default::default() };
        let model = train_forest(&x, &[0, 1], &classes(), &params).unwrap();
        let pure: Vec<usize> = (0..model.trees().len()).filter(|&t| model.trees()[t].n_nodes() == 1).collect();
        let zero = pure.iter().find(|&&t| model.trees()[t].class_counts(0)[0] > 0).unwrap();
        let one = pure.iter().find(|&&t| model.trees()[t].class_counts(0)[1] > 0).unwrap();
        let pair = ForestModel { trees: vec![model.trees()[*zero].clone(), model.trees()[*one].clone()], ..model };
        assert_eq!(pair.predict_proba(&[0.7]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(pair.predict(&[0.7]).unwrap().0, 0);
    }

    #[test]
    fn deterministic_in_seed() {
        let (x, y) = random_data(1, 200, 5);
        let params = ForestParams { n_estimators: 20, seed: 42, ..Default::default() };
        let a = train_forest(&x, &y, &classes(), &params).unwrap();
        let b = train_forest(&x, &y, &classes(), &params).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.predict_proba_rows(&x).unwrap(), b.predict_proba_rows(&x).unwrap());
        let c = train_forest(&x, &y, &classes(), &ForestParams { seed: 43, ..params }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn proba_is_mean_of_tree_walks() {
        let (x, y) = random_data(3, 150, 4);
        let params = ForestParams { n_estimators: 15, max_depth: 6, ..Default::default() };
        let model = train_forest(&x, &y, &classes(), &params).unwrap();
        for r in 0..x.n_rows() {
            let row = x.row(r);
            let mut oracle = vec![0.0; 2];
            for tree in model.trees() {
                for (o, p) in oracle.iter_mut().zip(walk(tree, &row)) {
                    *o += p;
                }
            }
            let got = model.predict_proba(&row).unwrap();
            for k in 0..2 {
                assert!((got[k] - oracle[k] / 15.0).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (x, y) = random_data(4, 100, 3);
        let model = train_forest(&x, &y, &classes(), &ForestParams { n_estimators: 5, ..Default::default() }).unwrap();
        let back = ForestModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), model.fingerprint());
    }

    #[test]
    fn errors() {
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let model = train_forest(&x, &[0], &classes(), &ForestParams { n_estimators: 1, ..Default::default() }).unwrap();
        assert!(matches!(model.predict_proba(&[1.0, 2.0]), Err(ForestError::WidthMismatch { .. })));
        let empty = Matrix::from_rows::<Vec<f64>>(&[]).unwrap();
        assert!(matches!(train_forest(&empty, &[], &classes(), &ForestParams::default()), Err(ForestError::EmptyInput)));
        assert!(matches!(train_forest(&x, &[2], &classes(), &ForestParams::default()), Err(ForestError::UnknownLabel { .. })));
        let nan = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(matches!(train_forest(&nan, &[0], &classes(), &ForestParams::default()), Err(ForestError::NonFinite { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prefix_and_truncation_match_fresh_training(seed in 0u64..1000, n_trees in 1usize..8, depth in 1usize..6) {
            let (x, y) = random_data(seed, 120, 4);
            let big = ForestParams { n_estimators: 8, max_depth: 12, seed, ..Default::default() };
            let model = train_forest(&x, &y, &classes(), &big).unwrap();
            let small = ForestParams { n_estimators: n_trees, max_depth: depth, ..big };
            let fresh = train_forest(&x, &y, &classes(), &small).unwrap();
            for r in 0..x.n_rows() {
                let row = x.row(r);
                prop_assert_eq!(model.predict_proba_truncated(&row, n_trees, depth).unwrap(), fresh.predict_proba(&row).unwrap());
            }
        }

        #[test]
        fn deeper_never_hurts_training_accuracy(seed in 0u64..1000, depth in 1usize..8) {
            let (x, y) = random_data(seed, 80, 3);
            let base = ForestParams {
                n_estimators: 1, max_depth: depth, features_per_split: MaxFeatures::All, bootstrap: false, seed,
                ..Default::default()
            };
            let acc = |p: &ForestParams| {
                let m = train_forest(&x, &y, &classes(), p).unwrap();
                (0..x.n_rows()).filter(|&r| m.predict(&x.row(r)).unwrap().0 as u32 == y[r]).count()
            };
            let deeper = ForestParams { max_depth: depth + 1, ..base.clone() };
            prop_assert!(acc(&deeper) >= acc(&base));
        }

        #[test]
        fn accepted_splits_have_nonnegative_gain(seed in 0u64..1000) {
            let (x, y) = random_data(seed, 100, 3);
            let m = train_forest(&x, &y, &classes(), &ForestParams { n_estimators: 3, ..Default::default() }).unwrap();
            for tree in m.trees() {
                for (i, node) in tree.nodes().iter().enumerate() {
                    if let Some(s) = node.split {
                        let weighted = |idx: u32| -> (f64, f64) {
                            let c: Vec<f64> = tree.class_counts(idx as usize).iter().map(|&v| v as f64).collect();
                            (tree::gini(&c), c.iter().sum())
                        };
                        let parent: Vec<f64> = tree.class_counts(i).iter().map(|&v| v as f64).collect();
                        let (gl, nl) = weighted(s.left);
                        let (gr, nr) = weighted(s.right);
                        let gain = tree::gini(&parent) - (nl * gl + nr * gr) / (nl + nr);
                        prop_assert!(gain >= -1e-12);
                    }
                }
            }
        }

        #[test]
        fn probabilities_sum_to_one(seed in 0u64..1000) {
            let (x, y) = random_data(seed, 60, 3);
            let m = train_forest(&x, &y, &classes(), &ForestParams { n_estimators: 7, ..Default::default() }).unwrap();
            for r in 0..x.n_rows() {
                let p = m.predict_proba(&x.row(r)).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
