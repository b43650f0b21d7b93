//! Stratified k-fold grid search over (n_estimators, max_depth).
//!
//! Each fold trains a single forest at the largest estimator count and depth
//! of the grid. Smaller cells are scored from tree prefixes and depth-cut
//! walks, which give the same predictions as training those cells directly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::SortedColumns;
use super::{argmax, check_inputs, train_trees, ForestError, ForestParams, Matrix};
use crate::metrics::{self, ConfusionMatrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
}

impl Grid {
    /// {25, 50, 100, 200, 300} for both axes.
    pub fn full() -> Self {
        let axis = vec![25, 50, 100, 200, 300];
        Self { n_estimators: axis.clone(), max_depth: axis }
    }

    /// {25, 50} × {10, 25}, for desk-scale runs.
    pub fn reduced() -> Self {
        Self { n_estimators: vec![25, 50], max_depth: vec![10, 25] }
    }

    pub fn single(n_estimators: usize, max_depth: usize) -> Self {
        Self { n_estimators: vec![n_estimators], max_depth: vec![max_depth] }
    }

    /// Sorted, deduplicated copy; errors on empty axes or zero entries.
    pub fn normalized(&self) -> Result<Grid, ForestError> {
        let clean = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let g = Grid { n_estimators: clean(&self.n_estimators), max_depth: clean(&self.max_depth) };
        if g.n_estimators.is_empty() || g.max_depth.is_empty() {
            return Err(ForestError::InvalidParams("empty grid".into()));
        }
        if g.n_estimators[0] == 0 || g.max_depth[0] == 0 {
            return Err(ForestError::InvalidParams("grid values must be positive".into()));
        }
        Ok(g)
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        write!(f, "{}x{}", join(&self.n_estimators), join(&self.max_depth))
    }
}

impl std::str::FromStr for Grid {
    type Err = ForestError;

    /// `"25,50x10,25"`: estimator counts, then depths.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ForestError::InvalidParams(format!("grid {s:?} is not of the form 25,50x10,25"));
        let (est, depth) = s.split_once('x').ok_or_else(bad)?;
        let parse = |part: &str| -> Result<Vec<usize>, ForestError> {
            part.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
        };
        Grid { n_estimators: parse(est)?, max_depth: parse(depth)? }.normalized()
    }
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub folds: usize,
    pub seed: u64,
    pub metric: fn(&ConfusionMatrix) -> f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { folds: 2, seed: 0, metric: metrics::mcc }
    }
}

/// Mean fold metric per cell, indexed `[estimators][depth]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    pub per_fold: Vec<Vec<Vec<f64>>>,
}

impl ScoreTable {
    pub fn get(&self, n_estimators: usize, max_depth: usize) -> Option<f64> {
        let e = self.n_estimators.iter().position(|&v| v == n_estimators)?;
        let d = self.max_depth.iter().position(|&v| v == max_depth)?;
        Some(self.mean[e][d])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: ForestParams,
    pub table: ScoreTable,
    pub warnings: Vec<String>,
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes differ by at most one.
pub fn stratified_folds(y: &[u32], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = y.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut fold = vec![0; y.len()];
    let mut next = 0;
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] as usize == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

fn distinct(labels: impl Iterator<Item = u32>) -> usize {
    let mut seen: Vec<u32> = labels.collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Scores every grid cell by stratified k-fold cross-validation and returns
/// the best cell applied to `base`. Ties go to fewer estimators, then to the
/// smaller depth.
pub fn grid_search(
    grid: &Grid,
    x: &Matrix,
    y: &[u32],
    classes: &[String],
    base: &ForestParams,
    cfg: &SearchConfig,
) -> Result<GridResult, ForestError> {
    let grid = grid.normalized()?;
    if cfg.folds < 2 {
        return Err(ForestError::InvalidParams("grid search needs at least 2 folds".into()));
    }
    check_inputs(x, y, classes.len())?;
    base.validate(classes.len())?;

    let n_classes = classes.len();
    let (n_e, n_d) = (grid.n_estimators.len(), grid.max_depth.len());
    let assignment = stratified_folds(y, cfg.folds, cfg.seed);
    let mut per_fold = vec![vec![Vec::with_capacity(cfg.folds); n_d]; n_e];
    let mut warnings = Vec::new();

    for fold in 0..cfg.folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == fold).collect();
        let single_class =
            distinct(train.iter().map(|&i| y[i])) < 2 || distinct(test.iter().map(|&i| y[i])) < 2;
        if test.is_empty() || single_class {
            let msg = format!("fold {fold} holds a single class; its metric is set to 0");
            log::warn!("{msg}");
            warnings.push(msg);
            for row in per_fold.iter_mut() {
                for cell in row.iter_mut() {
                    cell.push(0.0);
                }
            }
            continue;
        }

        let x_train = x.select_rows(&train);
        let y_train: Vec<u32> = train.iter().map(|&i| y[i]).collect();
        let params = ForestParams {
            n_estimators: *grid.n_estimators.last().expect("non-empty"),
            max_depth: *grid.max_depth.last().expect("non-empty"),
            ..base.clone()
        };
        let sorted = SortedColumns::new(&x_train);
        let trees = train_trees(&x_train, &y_train, n_classes, &params, &sorted)?;

        let weights = base.class_weights.as_deref();
        let mut cms = vec![vec![ConfusionMatrix::zeros(classes.to_vec()); n_d]; n_e];
        let mut leaves = vec![0; n_d];
        let mut sums = vec![vec![0.0; n_classes]; n_d];
        let mut dist = vec![0.0; n_classes];
        let mut scaled = vec![0.0; n_classes];
        for &i in &test {
            let row = x.row(i);
            sums.iter_mut().for_each(|s| s.fill(0.0));
            let mut e = 0;
            for (t, tree) in trees.iter().enumerate() {
                tree.leaf_indices_at(&row, &grid.max_depth, &mut leaves);
                for (sum, &leaf) in sums.iter_mut().zip(&leaves) {
                    tree.distribution(leaf, weights, &mut dist);
                    sum.iter_mut().zip(&dist).for_each(|(s, d)| *s += d);
                }
                if t + 1 == grid.n_estimators[e] {
                    for (d, sum) in sums.iter().enumerate() {
                        for (o, s) in scaled.iter_mut().zip(sum) {
                            *o = s / (t + 1) as f64;
                        }
                        cms[e][d].add(y[i] as usize, argmax(&scaled).0);
                    }
                    e += 1;
                }
            }
        }
        for e in 0..n_e {
            for d in 0..n_d {
                per_fold[e][d].push((cfg.metric)(&cms[e][d]));
            }
        }
    }

    let mean: Vec<Vec<f64>> = per_fold
        .iter()
        .map(|row| row.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect())
        .collect();
    let mut best = (0, 0);
    for e in 0..n_e {
        for d in 0..n_d {
            if mean[e][d] > mean[best.0][best.1] {
                best = (e, d);
            }
        }
    }
    Ok(GridResult {
        best: ForestParams {
            n_estimators: grid.n_estimators[best.0],
            max_depth: grid.max_depth[best.1],
            ..base.clone()
        },
        table: ScoreTable { n_estimators: grid.n_estimators, max_depth: grid.max_depth, mean, per_fold },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{train_forest, ProbabilisticClassifier};
    use rand::Rng;

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn data(seed: u64, n: usize) -> (Matrix, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = rows.iter().map(|r| u32::from(r[0] + r[1] + 0.5 * rng.random_range(-1.0..1.0) > 0.0)).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn parses_and_renders() {
        let g: Grid = "50,25x25,10".parse().unwrap();
        assert_eq!(g, Grid::reduced());
        assert_eq!(g.to_string(), "25,50x10,25");
        assert!("25,50".parse::<Grid>().is_err());
        assert!("x".parse::<Grid>().is_err());
        assert!("0x1".parse::<Grid>().is_err());
    }

    #[test]
    fn folds_are_stratified() {
        let y: Vec<u32> = (0..103).map(|i| u32::from(i % 10 == 0)).collect();
        let f = stratified_folds(&y, 3, 1);
        for k in 0..3 {
            let size = f.iter().filter(|&&v| v == k).count();
            assert!((34..=35).contains(&size));
            let pos = (0..y.len()).filter(|&i| f[i] == k && y[i] == 1).count();
            assert!((3..=4).contains(&pos));
        }
    }

    #[test]
    fn single_cell_wins() {
        let (x, y) = data(1, 120);
        let r = grid_search(&Grid::single(5, 3), &x, &y, &classes(), &ForestParams::default(), &SearchConfig::default())
            .unwrap();
        assert_eq!((r.best.n_estimators, r.best.max_depth), (5, 3));
        assert_eq!(r.table.mean.len(), 1);
    }

    #[test]
    fn full_grid_is_five_by_five_and_ties_prefer_small() {
        let (_, y) = data(2, 60);
        // All-constant features: every cell predicts the majority, all tie at 0.
        let flat = Matrix::from_rows(&vec![vec![1.0, 1.0]; 60]).unwrap();
        let r = grid_search(&Grid::full(), &flat, &y, &classes(), &ForestParams::default(), &SearchConfig::default())
            .unwrap();
        assert_eq!(r.table.mean.len(), 5);
        assert!(r.table.mean.iter().all(|row| row.len() == 5));
        assert_eq!((r.best.n_estimators, r.best.max_depth), (25, 25));
    }

    #[test]
    fn cells_match_direct_training() {
        let (x, y) = data(3, 200);
        let grid = Grid { n_estimators: vec![3, 7], max_depth: vec![2, 5] };
        let base = ForestParams { seed: 11, ..Default::default() };
        let cfg = SearchConfig { folds: 2, seed: 4, metric: metrics::mcc };
        let r = grid_search(&grid, &x, &y, &classes(), &base, &cfg).unwrap();
        let folds = stratified_folds(&y, 2, 4);
        for (e, &n) in grid.n_estimators.iter().enumerate() {
            for (d, &depth) in grid.max_depth.iter().enumerate() {
                let mut scores = Vec::new();
                for fold in 0..2 {
                    let train: Vec<usize> = (0..200).filter(|&i| folds[i] != fold).collect();
                    let yt: Vec<u32> = train.iter().map(|&i| y[i]).collect();
                    let p = ForestParams { n_estimators: n, max_depth: depth, ..base.clone() };
                    let m = train_forest(&x.select_rows(&train), &yt, &classes(), &p).unwrap();
                    let test: Vec<usize> = (0..200).filter(|&i| folds[i] == fold).collect();
                    let truth: Vec<usize> = test.iter().map(|&i| y[i] as usize).collect();
                    let pred: Vec<usize> = test.iter().map(|&i| m.predict(&x.row(i)).unwrap().0).collect();
                    scores.push(metrics::mcc(&metrics::confusion(&truth, &pred, &classes()).unwrap()));
                }
                assert_eq!(r.table.per_fold[e][d], scores);
            }
        }
    }

    #[test]
    fn single_class_fold_scores_zero_with_warning() {
        let mut y = vec![0u32; 40];
        y[0] = 1;
        let x = Matrix::from_rows(&(0..40).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let r = grid_search(&Grid::single(3, 3), &x, &y, &classes(), &ForestParams::default(), &SearchConfig::default())
            .unwrap();
        assert!(!r.warnings.is_empty());
        assert!(r.table.per_fold[0][0].contains(&0.0));
    }
}
