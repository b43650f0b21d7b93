//! CART classification trees with Gini splits.
//!
//! Every node draws its candidate features from its own RNG, seeded from the
//! tree seed and the node's path. A node's split therefore depends only on
//! the rows that reach it, so the tree grown with `max_depth = d` is exactly
//! the tree grown with any larger depth cut at depth `d`. Grid search relies
//! on this to score every depth from a single deep tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForestError, Matrix};

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub column: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub split: Option<Split>,
    pub depth: u32,
}

/// A borrowed view of one node.
#[derive(Debug, PartialEq)]
pub enum TreeNode<'a> {
    Split { column: usize, threshold: f64, left: usize, right: usize },
    Leaf { class_counts: &'a [u32] },
}

/// A trained tree. Nodes live in a flat arena rooted at index 0; every node,
/// internal or not, keeps the class counts of the bootstrap rows reaching it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    counts: Vec<u32>,
    n_classes: usize,
}

impl Tree {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).map(|n| n.depth as usize).max().unwrap_or(0)
    }

    pub fn node(&self, idx: usize) -> TreeNode<'_> {
        match self.nodes[idx].split {
            Some(s) => TreeNode::Split {
                column: s.column as usize,
                threshold: s.threshold,
                left: s.left as usize,
                right: s.right as usize,
            },
            None => TreeNode::Leaf { class_counts: self.class_counts(idx) },
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn class_counts(&self, idx: usize) -> &[u32] {
        &self.counts[idx * self.n_classes..(idx + 1) * self.n_classes]
    }

    /// Index of the node reached by `row` when the tree is cut at `max_depth`.
    pub fn leaf_index(&self, row: &[f64], max_depth: usize) -> usize {
        let mut idx = 0;
        while let Some(s) = self.nodes[idx].split {
            if self.nodes[idx].depth as usize >= max_depth {
                break;
            }
            idx = if row[s.column as usize] <= s.threshold { s.left } else { s.right } as usize;
        }
        idx
    }

    /// Nodes reached at each of the ascending `depths`, written into `out`.
    pub fn leaf_indices_at(&self, row: &[f64], depths: &[usize], out: &mut [usize]) {
        let mut idx = 0usize;
        let mut k = 0;
        while k < depths.len() {
            let node = self.nodes[idx];
            match node.split {
                Some(s) if (node.depth as usize) < depths[k] => {
                    idx = if row[s.column as usize] <= s.threshold { s.left } else { s.right } as usize;
                }
                _ => {
                    out[k] = idx;
                    k += 1;
                }
            }
        }
    }

    /// Class distribution of a node, optionally reweighted per class.
    pub fn distribution(&self, idx: usize, class_weights: Option<&[f64]>, out: &mut [f64]) {
        let counts = self.class_counts(idx);
        let mut total = 0.0;
        for (k, (o, &c)) in out.iter_mut().zip(counts).enumerate() {
            *o = c as f64 * class_weights.map_or(1.0, |w| w[k]);
            total += *o;
        }
        if total > 0.0 {
            for o in out.iter_mut() {
                *o /= total;
            }
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn child_seed(parent: u64, right: bool) -> u64 {
    splitmix64(parent.wrapping_mul(2).wrapping_add(u64::from(right) + 1))
}

/// Training settings for one tree.
#[derive(Clone, Debug)]
pub struct TreeConfig<'a> {
    pub max_depth: usize,
    pub max_features: usize,
    pub min_samples_leaf: u32,
    pub class_weights: Option<&'a [f64]>,
    pub seed: u64,
}

/// Per-column row orders and dense value ranks (equal values share a rank).
/// Computed once per training matrix and shared by every tree of a forest.
pub struct SortedColumns {
    orders: Vec<Vec<u32>>,
    ranks: Vec<Vec<u32>>,
}

impl SortedColumns {
    pub fn new(x: &Matrix) -> Self {
        let (orders, ranks) = (0..x.n_cols())
            .map(|c| {
                let col = x.column(c);
                let mut keyed: Vec<(u64, u32)> = (0..x.n_rows() as u32).map(|r| (ordered_bits(col[r as usize]), r)).collect();
                keyed.sort_unstable();
                let order: Vec<u32> = keyed.into_iter().map(|(_, r)| r).collect();
                let mut rank = vec![0u32; x.n_rows()];
                let mut current = 0;
                for w in 1..order.len() {
                    if col[order[w] as usize] != col[order[w - 1] as usize] {
                        current += 1;
                    }
                    rank[order[w] as usize] = current;
                }
                (order, rank)
            })
            .unzip();
        Self { orders, ranks }
    }
}

/// Maps a float to an integer with the same order as `f64::total_cmp`.
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[derive(Clone, Copy)]
struct RowInfo {
    class: u32,
    mult: u32,
    weight: f64,
}

/// One column's node rows in ascending key order, ready for a threshold scan.
struct Scan<'a> {
    keys: &'a [u64],
    info: &'a [RowInfo],
    total_n: u32,
    min_leaf: u32,
}

/// Left-child class weights during a scan.
trait LeftCounts {
    fn add(&mut self, class: usize, w: f64);
    /// Squared class weight sums of the left and right child.
    fn squares(&self, parent: &[f64]) -> (f64, f64);
}

impl<const K: usize> LeftCounts for [f64; K] {
    #[inline(always)]
    fn add(&mut self, class: usize, w: f64) {
        self[class] += w;
    }

    #[inline(always)]
    fn squares(&self, parent: &[f64]) -> (f64, f64) {
        let parent: &[f64; K] = parent.try_into().expect("class count");
        let mut sq_left = 0.0;
        let mut sq_right = 0.0;
        for c in 0..K {
            sq_left += self[c] * self[c];
            let rc = parent[c] - self[c];
            sq_right += rc * rc;
        }
        (sq_left, sq_right)
    }
}

impl LeftCounts for Vec<f64> {
    fn add(&mut self, class: usize, w: f64) {
        self[class] += w;
    }

    fn squares(&self, parent: &[f64]) -> (f64, f64) {
        self.iter().zip(parent).fold((0.0, 0.0), |(sl, sr), (l, p)| (sl + l * l, sr + (p - l) * (p - l)))
    }
}

impl Scan<'_> {
    /// Best split position as `(score, i)`: the threshold lies between keys
    /// `i` and `i + 1`. Scored by `Σ_child Σ_k w_k² / w_child`, which grows
    /// as the weighted Gini impurity of the children falls.
    fn best(&self, parent: &[f64]) -> Option<(f64, usize)> {
        match parent.len() {
            2 => self.run(parent, [0.0; 2]),
            3 => self.run(parent, [0.0; 3]),
            k => self.run(parent, vec![0.0; k]),
        }
    }

    #[inline(always)]
    fn run(&self, parent: &[f64], mut left: impl LeftCounts) -> Option<(f64, usize)> {
        let total_w: f64 = parent.iter().sum();
        let mut left_w = 0.0;
        let mut left_n = 0u32;
        let mut best: Option<(f64, usize)> = None;
        for (i, pair) in self.keys.windows(2).enumerate() {
            let info = self.info[(pair[0] as u32) as usize];
            left.add(info.class as usize, info.weight);
            left_w += info.weight;
            left_n += info.mult;
            if pair[1] >> 32 == pair[0] >> 32 || left_n < self.min_leaf || self.total_n - left_n < self.min_leaf {
                continue;
            }
            let right_w = total_w - left_w;
            if left_w <= 0.0 || right_w <= 0.0 {
                continue;
            }
            let (sq_left, sq_right) = left.squares(parent);
            let score = sq_left / left_w + sq_right / right_w;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, i));
            }
        }
        best
    }
}

/// Node size from which radix sorting beats comparison sorting.
const RADIX_MIN: usize = 256;

/// Stable LSD radix sort on the rank half of each key, one byte per pass.
/// Rows with equal rank keep their relative order.
fn radix_sort_by_rank(keys: &mut Vec<u64>, buf: &mut Vec<u64>) {
    let max = keys.iter().map(|&k| k >> 32).max().unwrap_or(0);
    let mut shift = 32;
    while shift < 64 && (max >> (shift - 32)) > 0 {
        let mut counts = [0usize; 257];
        for &k in keys.iter() {
            counts[((k >> shift) & 0xFF) as usize + 1] += 1;
        }
        for d in 0..256 {
            counts[d + 1] += counts[d];
        }
        buf.resize(keys.len(), 0);
        for &k in keys.iter() {
            let d = ((k >> shift) & 0xFF) as usize;
            buf[counts[d]] = k;
            counts[d] += 1;
        }
        std::mem::swap(keys, buf);
        shift += 8;
    }
}

/// Sort key of a row within one column: rank in the high half, row below.
fn key(rank: u32, row: u32) -> u64 {
    (u64::from(rank) << 32) | u64::from(row)
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [u32],
    multiplicity: &'a [u32],
    sorted: &'a SortedColumns,
    n_classes: usize,
    cfg: &'a TreeConfig<'a>,
    node_of: Vec<u32>,
    n_sampled: usize,
    nodes: Vec<Node>,
    counts: Vec<u32>,
    /// Per row: class, bootstrap multiplicity and weighted multiplicity.
    info: Vec<RowInfo>,
    scratch: Vec<u64>,
    radix_buf: Vec<u64>,
    features: Vec<u32>,
}

struct Candidate {
    column: u32,
    threshold: f64,
    score: f64,
}

struct Pending {
    id: u32,
    start: usize,
    end: usize,
    depth: u32,
    seed: u64,
}

/// Grows one tree on the rows with non-zero multiplicity.
pub fn train_tree(
    x: &Matrix,
    y: &[u32],
    n_classes: usize,
    multiplicity: &[u32],
    sorted: &SortedColumns,
    cfg: &TreeConfig<'_>,
) -> Result<Tree, ForestError> {
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(ForestError::EmptyInput);
    }
    if y.len() != x.n_rows() || multiplicity.len() != x.n_rows() {
        return Err(ForestError::Shape(format!("{} labels for {} rows", y.len(), x.n_rows())));
    }

    let mut rows: Vec<u32> = (0..x.n_rows() as u32).filter(|&r| multiplicity[r as usize] > 0).collect();
    if rows.is_empty() {
        return Err(ForestError::EmptyInput);
    }
    let mut b = Builder {
        x,
        y,
        multiplicity,
        sorted,
        n_classes,
        cfg,
        node_of: vec![NO_NODE; x.n_rows()],
        n_sampled: rows.len(),
        nodes: Vec::new(),
        counts: Vec::new(),
        info: (0..x.n_rows())
            .map(|r| RowInfo {
                class: y[r],
                mult: multiplicity[r],
                weight: multiplicity[r] as f64 * cfg.class_weights.map_or(1.0, |w| w[y[r] as usize]),
            })
            .collect(),
        scratch: Vec::with_capacity(rows.len()),
        radix_buf: Vec::new(),
        features: Vec::with_capacity(x.n_cols()),
    };
    for &r in &rows {
        b.node_of[r as usize] = 0;
    }
    b.push_node(&rows, 0);

    let mut stack = vec![Pending { id: 0, start: 0, end: rows.len(), depth: 0, seed: splitmix64(cfg.seed) }];
    while let Some(p) = stack.pop() {
        let Some(best) = b.best_split(&rows[p.start..p.end], &p) else {
            continue;
        };
        // Partition node rows: left holds values ≤ threshold.
        let col = x.column(best.column as usize);
        let slice = &mut rows[p.start..p.end];
        let mut mid = 0;
        for i in 0..slice.len() {
            if col[slice[i] as usize] <= best.threshold {
                slice.swap(i, mid);
                mid += 1;
            }
        }
        let mid = p.start + mid;
        let left = b.push_node(&rows[p.start..mid], p.depth + 1);
        let right = b.push_node(&rows[mid..p.end], p.depth + 1);
        for &r in &rows[p.start..mid] {
            b.node_of[r as usize] = left;
        }
        for &r in &rows[mid..p.end] {
            b.node_of[r as usize] = right;
        }
        b.nodes[p.id as usize].split = Some(Split { column: best.column, threshold: best.threshold, left, right });
        stack.push(Pending { id: right, start: mid, end: p.end, depth: p.depth + 1, seed: child_seed(p.seed, true) });
        stack.push(Pending { id: left, start: p.start, end: mid, depth: p.depth + 1, seed: child_seed(p.seed, false) });
    }

    Ok(Tree { nodes: b.nodes, counts: b.counts, n_classes })
}

impl Builder<'_> {
    fn push_node(&mut self, rows: &[u32], depth: u32) -> u32 {
        let id = self.nodes.len() as u32;
        let base = self.counts.len();
        self.counts.resize(base + self.n_classes, 0);
        for &r in rows {
            self.counts[base + self.y[r as usize] as usize] += self.multiplicity[r as usize];
        }
        self.nodes.push(Node { split: None, depth });
        id
    }

    fn class_weight(&self, class: usize) -> f64 {
        self.cfg.class_weights.map_or(1.0, |w| w[class])
    }

    fn best_split(&mut self, rows: &[u32], p: &Pending) -> Option<Candidate> {
        if p.depth as usize >= self.cfg.max_depth {
            return None;
        }
        let base = p.id as usize * self.n_classes;
        let counts = &self.counts[base..base + self.n_classes];
        let n_samples: u32 = counts.iter().sum();
        if counts.iter().filter(|&&c| c > 0).count() <= 1 || n_samples < 2 * self.cfg.min_samples_leaf.max(1) {
            return None;
        }
        let parent: Vec<f64> = counts.iter().enumerate().map(|(k, &c)| c as f64 * self.class_weight(k)).collect();

        // Lazy Fisher-Yates over all columns; keep drawing past `max_features`
        // until at least one valid split has been found.
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        self.features.clear();
        self.features.extend(0..self.x.n_cols() as u32);
        let mut best: Option<Candidate> = None;
        let n_cols = self.features.len();
        for drawn in 0..n_cols {
            if drawn >= self.cfg.max_features && best.is_some() {
                break;
            }
            let pick = rng.random_range(drawn..n_cols);
            self.features.swap(drawn, pick);
            let column = self.features[drawn];
            if let Some(c) = self.scan_column(rows, p.id, column, &parent) {
                if best.as_ref().is_none_or(|b| c.score > b.score) {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Best threshold on one column.
    fn scan_column(&mut self, rows: &[u32], node: u32, column: u32, parent: &[f64]) -> Option<Candidate> {
        let col = self.x.column(column as usize);
        let rank = &self.sorted.ranks[column as usize];
        self.scratch.clear();
        // Large nodes: filter the presorted column order. Small nodes: sort.
        let m = rows.len();
        let sort_cost = m * (usize::BITS - m.leading_zeros()) as usize / 4;
        if sort_cost > self.n_sampled {
            for &r in &self.sorted.orders[column as usize] {
                if self.node_of[r as usize] == node {
                    self.scratch.push(key(rank[r as usize], r));
                }
            }
        } else {
            self.scratch.extend(rows.iter().map(|&r| key(rank[r as usize], r)));
            if m >= RADIX_MIN {
                radix_sort_by_rank(&mut self.scratch, &mut self.radix_buf);
            } else {
                self.scratch.sort_unstable();
            }
        }
        let rank_of = |k: u64| (k >> 32) as u32;
        let row_of = |k: u64| k as u32 as usize;
        if rank_of(*self.scratch.first()?) == rank_of(*self.scratch.last()?) {
            return None;
        }

        let total_n: u32 = self.scratch.iter().map(|&e| self.info[row_of(e)].mult).sum();
        let min_leaf = self.cfg.min_samples_leaf.max(1);
        let scan = Scan { keys: &self.scratch, info: &self.info, total_n, min_leaf };
        let best = scan.best(parent);
        let (score, i) = best?;
        let (lo, hi) = (col[row_of(self.scratch[i])], col[row_of(self.scratch[i + 1])]);
        let mut threshold = lo + (hi - lo) / 2.0;
        if threshold >= hi || threshold < lo {
            threshold = lo;
        }
        Some(Candidate { column, threshold, score })
    }
}

/// Gini impurity of weighted class counts.
pub fn gini(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(rows: &[Vec<f64>], y: &[u32], depth: usize, max_features: usize) -> Tree {
        let x = Matrix::from_rows(rows).unwrap();
        let sorted = SortedColumns::new(&x);
        let cfg = TreeConfig { max_depth: depth, max_features, min_samples_leaf: 1, class_weights: None, seed: 5 };
        train_tree(&x, y, 2, &vec![1; rows.len()], &sorted, &cfg).unwrap()
    }

    #[test]
    fn single_split_between_two_points() {
        let tree = fit(&[vec![0.0], vec![1.0]], &[0, 1], 1, 1);
        match tree.node(0) {
            TreeNode::Split { threshold, left, right, .. } => {
                assert!(threshold > 0.0 && threshold < 1.0);
                assert_eq!(tree.node(left), TreeNode::Leaf { class_counts: &[1, 0] });
                assert_eq!(tree.node(right), TreeNode::Leaf { class_counts: &[0, 1] });
            }
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn pure_labels_give_single_leaf() {
        let tree = fit(&[vec![0.0], vec![1.0], vec![2.0]], &[1, 1, 1], 5, 1);
        assert_eq!(tree.n_nodes(), 1);
        assert_eq!(tree.depth(), 0);
    }

    #[test]
    fn separable_on_second_feature() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<u32> = rows.iter().map(|r| u32::from(r[1] > 0.4)).collect();
        // Exhaustive threshold scan confirms a perfect axis split exists.
        let mut values: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        values.sort_by(f64::total_cmp);
        let perfect = values.windows(2).any(|w| {
            let t = (w[0] + w[1]) / 2.0;
            rows.iter().zip(&y).all(|(r, &c)| (r[1] > t) == (c == 1))
        });
        assert!(perfect);
        let tree = fit(&rows, &y, 1, 2);
        let correct = rows.iter().zip(&y).filter(|(r, &c)| {
            let leaf = tree.leaf_index(r, usize::MAX);
            let counts = tree.class_counts(leaf);
            u32::from(counts[1] > counts[0]) == c
        });
        assert_eq!(correct.count(), 50);
    }

    #[test]
    fn truncation_equals_shallow_training() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<u32> = (0..300).map(|_| rng.random_range(0..2)).collect();
        let deep = fit(&rows, &y, 30, 2);
        for depth in [1, 2, 4, 7] {
            let shallow = fit(&rows, &y, depth, 2);
            for r in &rows {
                let a = deep.class_counts(deep.leaf_index(r, depth));
                let b = shallow.class_counts(shallow.leaf_index(r, usize::MAX));
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn radix_sort_orders_ranks_stably() {
        let mut keys: Vec<u64> = [(300u32, 5u32), (2, 9), (300, 1), (70_000, 3), (2, 4), (0, 8)]
            .iter()
            .map(|&(r, row)| key(r, row))
            .collect();
        radix_sort_by_rank(&mut keys, &mut Vec::new());
        let got: Vec<(u64, u32)> = keys.iter().map(|&k| (k >> 32, k as u32)).collect();
        assert_eq!(got, vec![(0, 8), (2, 9), (2, 4), (300, 5), (300, 1), (70_000, 3)]);
    }

    #[test]
    fn ordered_bits_follow_total_cmp() {
        let v = [f64::NEG_INFINITY, -3.5, -0.0, 0.0, 1e-300, 2.0, f64::INFINITY];
        for w in v.windows(2) {
            assert!(ordered_bits(w[0]) < ordered_bits(w[1]), "{} {}", w[0], w[1]);
        }
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5.0, 0.0]), 0.0);
        assert!((gini(&[1.0, 1.0]) - 0.5).abs() < 1e-15);
    }
}
