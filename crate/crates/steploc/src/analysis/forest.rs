//! A from-scratch random forest for binary labels over numeric features, with
//! bootstrap sampling, Gini splits, and normalized impurity-based importances,
//! plus a depth-one baseline used as a fit-quality reference.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AnalysisError;

/// Default number of trees per forest.
pub const DEFAULT_N_TREES: usize = 200;
/// Minimum rows required to train.
pub const MIN_ROWS: usize = 10;

#[derive(Debug, Clone)]
enum Node {
    Leaf { label: bool },
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, row: &[f64]) -> bool {
        match self {
            Node::Leaf { label } => *label,
            Node::Split { feature, threshold, left, right } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

/// One trained tree.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    root: Node,
}

impl DecisionTree {
    /// Label for one row of feature values.
    pub fn predict(&self, row: &[f64]) -> bool {
        self.root.predict(row)
    }
}

/// A trained forest with normalized importances and training-fit statistics.
#[derive(Debug, Clone)]
pub struct ForestModel {
    pub n_trees: usize,
    trees: Vec<DecisionTree>,
    pub feature_names: Vec<String>,
    /// Mean per-tree-normalized Gini importance, renormalized to sum to one.
    pub importances: Vec<f64>,
    /// F1 of the majority vote on the training rows.
    pub fit_f1: f64,
    /// Accuracy of the majority vote on the training rows, in [0,1].
    pub fit_accuracy: f64,
    pub seed: u64,
}

impl ForestModel {
    /// Majority vote over trees; exact ties resolve to false.
    pub fn predict(&self, row: &[f64]) -> bool {
        let votes = self.trees.iter().filter(|t| t.predict(row)).count();
        votes * 2 > self.trees.len()
    }
}

/// The single best axis-aligned split over all features, as a weak baseline.
#[derive(Debug, Clone, Copy)]
pub struct StumpModel {
    pub feature: usize,
    pub threshold: f64,
    pub left_label: bool,
    pub right_label: bool,
    pub fit_f1: f64,
    pub fit_accuracy: f64,
}

impl StumpModel {
    /// Label for one row of feature values.
    pub fn predict(&self, row: &[f64]) -> bool {
        if row[self.feature] <= self.threshold {
            self.left_label
        } else {
            self.right_label
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Best (threshold, impurity decrease, left size, left positives) for one
/// feature over the given rows, or None when the column cannot split them.
fn best_split_on_feature(
    column: &[f64],
    labels: &[bool],
    indices: &[usize],
) -> Option<(f64, f64)> {
    let n = indices.len();
    let mut rows: Vec<(f64, bool)> = indices.iter().map(|&i| (column[i], labels[i])).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos: usize = rows.iter().filter(|r| r.1).count();
    let parent = gini(pos, n);
    let mut best: Option<(f64, f64)> = None;
    let mut left_pos = 0usize;
    for split_at in 1..n {
        left_pos += rows[split_at - 1].1 as usize;
        if rows[split_at].0 == rows[split_at - 1].0 {
            continue;
        }
        let left_n = split_at;
        let right_n = n - split_at;
        let right_pos = pos - left_pos;
        let weighted = (left_n as f64 * gini(left_pos, left_n)
            + right_n as f64 * gini(right_pos, right_n))
            / n as f64;
        let decrease = parent - weighted;
        let improves = match best {
            None => decrease > 1e-12,
            Some((_, current)) => decrease > current + 1e-12,
        };
        if improves {
            best = Some(((rows[split_at - 1].0 + rows[split_at].0) / 2.0, decrease));
        }
    }
    best
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    labels: &'a [bool],
    sample_size: f64,
    n_candidates: usize,
    importances: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, indices: &[usize], rng: &mut ChaCha8Rng) -> Node {
        let n = indices.len();
        let pos = indices.iter().filter(|&&i| self.labels[i]).count();
        if pos == 0 || pos == n || n <= 1 {
            return Node::Leaf { label: pos * 2 > n };
        }
        let n_features = self.columns.len();
        let mut pool: Vec<usize> = (0..n_features).collect();
        for i in 0..self.n_candidates {
            let j = rng.gen_range(i..n_features);
            pool.swap(i, j);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for &feature in &pool[..self.n_candidates] {
            if let Some((threshold, decrease)) =
                best_split_on_feature(&self.columns[feature], self.labels, indices)
            {
                let improves = match best {
                    None => true,
                    Some((_, _, current)) => decrease > current + 1e-12,
                };
                if improves {
                    best = Some((feature, threshold, decrease));
                }
            }
        }
        let Some((feature, threshold, decrease)) = best else {
            return Node::Leaf { label: pos * 2 > n };
        };
        self.importances[feature] += (n as f64 / self.sample_size) * decrease;
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            indices.iter().copied().partition(|&i| self.columns[feature][i] <= threshold);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.build(&left_idx, rng)),
            right: Box::new(self.build(&right_idx, rng)),
        }
    }
}

fn validate_matrix(
    columns: &[Vec<f64>],
    names: &[String],
    labels: &[bool],
) -> Result<(), AnalysisError> {
    if columns.is_empty() {
        return Err(AnalysisError::BadMatrix("no feature columns".into()));
    }
    if names.len() != columns.len() {
        return Err(AnalysisError::BadMatrix(format!(
            "{} names for {} columns",
            names.len(),
            columns.len()
        )));
    }
    let n = labels.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(AnalysisError::BadMatrix("column lengths differ from label count".into()));
    }
    if n < MIN_ROWS {
        return Err(AnalysisError::TooFewRows { min: MIN_ROWS, got: n });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(AnalysisError::SingleClassLabels);
    }
    Ok(())
}

fn fit_scores(predictions: &[bool], labels: &[bool]) -> (f64, f64) {
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / labels.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fnn) as f64;
        2.0 * precision * recall / (precision + recall)
    };
    (f1, accuracy)
}

fn row_view(columns: &[Vec<f64>], row: usize) -> Vec<f64> {
    columns.iter().map(|c| c[row]).collect()
}

/// Trains a bagged forest: per tree, a bootstrap sample of the rows and
/// floor(sqrt(features)) split candidates per node, grown until pure. Per-tree
/// seeds are drawn upfront from a stream seeded with `seed`, so results are
/// identical regardless of trainer scheduling.
pub fn train_random_forest(
    columns: &[Vec<f64>],
    names: &[String],
    labels: &[bool],
    n_trees: usize,
    seed: u64,
) -> Result<ForestModel, AnalysisError> {
    validate_matrix(columns, names, labels)?;
    if n_trees == 0 {
        return Err(AnalysisError::BadMatrix("forest needs at least one tree".into()));
    }
    let n = labels.len();
    let n_features = columns.len();
    let n_candidates = ((n_features as f64).sqrt().floor() as usize).clamp(1, n_features);

    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let tree_seeds: Vec<u64> = (0..n_trees).map(|_| seed_rng.gen()).collect();

    let mut trees = Vec::with_capacity(n_trees);
    let mut importance_acc = vec![0.0f64; n_features];
    for tree_seed in tree_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let mut builder = TreeBuilder {
            columns,
            labels,
            sample_size: n as f64,
            n_candidates,
            importances: vec![0.0; n_features],
        };
        let root = builder.build(&sample, &mut rng);
        let total: f64 = builder.importances.iter().sum();
        if total > 0.0 {
            for (acc, v) in importance_acc.iter_mut().zip(&builder.importances) {
                *acc += v / total;
            }
        }
        trees.push(DecisionTree { root });
    }
    let acc_total: f64 = importance_acc.iter().sum();
    let importances: Vec<f64> = if acc_total > 0.0 {
        importance_acc.iter().map(|v| v / acc_total).collect()
    } else {
        importance_acc
    };

    let mut model = ForestModel {
        n_trees,
        trees,
        feature_names: names.to_vec(),
        importances,
        fit_f1: 0.0,
        fit_accuracy: 0.0,
        seed,
    };
    let predictions: Vec<bool> = (0..n).map(|r| model.predict(&row_view(columns, r))).collect();
    let (f1, accuracy) = fit_scores(&predictions, labels);
    model.fit_f1 = f1;
    model.fit_accuracy = accuracy;
    Ok(model)
}

/// Trains the depth-one baseline: the single best Gini split over every
/// feature, with majority labels on each side. Deterministic.
pub fn train_depth_one_baseline(
    columns: &[Vec<f64>],
    names: &[String],
    labels: &[bool],
) -> Result<StumpModel, AnalysisError> {
    validate_matrix(columns, names, labels)?;
    let n = labels.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut best: Option<(usize, f64, f64)> = None;
    for (feature, column) in columns.iter().enumerate() {
        if let Some((threshold, decrease)) = best_split_on_feature(column, labels, &indices) {
            let improves = match best {
                None => true,
                Some((_, _, current)) => decrease > current + 1e-12,
            };
            if improves {
                best = Some((feature, threshold, decrease));
            }
        }
    }
    let (feature, threshold) = match best {
        Some((f, t, _)) => (f, t),
        // No split improves impurity: predict the global majority on both sides.
        None => (0, f64::INFINITY),
    };
    let mut left_pos = 0usize;
    let mut left_n = 0usize;
    let mut right_pos = 0usize;
    let mut right_n = 0usize;
    for i in 0..n {
        if columns[feature][i] <= threshold {
            left_n += 1;
            left_pos += labels[i] as usize;
        } else {
            right_n += 1;
            right_pos += labels[i] as usize;
        }
    }
    let mut stump = StumpModel {
        feature,
        threshold,
        left_label: left_pos * 2 > left_n,
        right_label: right_pos * 2 > right_n,
        fit_f1: 0.0,
        fit_accuracy: 0.0,
    };
    let predictions: Vec<bool> = (0..n).map(|r| stump.predict(&row_view(columns, r))).collect();
    let (f1, accuracy) = fit_scores(&predictions, labels);
    stump.fit_f1 = f1;
    stump.fit_accuracy = accuracy;
    Ok(stump)
}
