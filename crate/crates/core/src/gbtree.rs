//! Gradient-boosted regression trees with squared-error loss.
//!
//! Exact greedy split search over midpoint thresholds, six regularization
//! knobs (depth, row/column subsampling, minimum leaf size, learning rate,
//! minimum split gain) plus a fixed leaf L2 penalty. Training is
//! deterministic given the seed: row and column subsamples for tree `t` are
//! drawn from a stream derived from `(seed, t)` only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::FeatureMatrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyData,
    #[error("fit_tree called with zero rows")]
    EmptyNode,
    #[error("targets length {targets} does not match row count {rows}")]
    LengthMismatch { targets: usize, rows: usize },
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("feature names do not match the model")]
    FeatureMismatch,
    #[error("model format: {0}")]
    ModelFormat(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// The tuned regularization knobs plus the fixed leaf L2 penalty, tree
/// count, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Maximum depth of each tree (root at depth 0), >= 1.
    pub max_depth: usize,
    /// Fraction of rows sampled per tree, in (0, 1].
    pub subsample: f64,
    /// Minimum instances per leaf, >= 1.
    pub min_leaf: usize,
    /// Fraction of columns sampled per tree, in (0, 1].
    pub colsample: f64,
    /// Learning rate in (0, 1].
    pub eta: f64,
    /// Minimum gain required to split, >= 0.
    pub gamma: f64,
    /// Leaf L2 penalty, >= 0. Not on the tuned grid.
    pub lambda: f64,
    /// Number of boosting rounds, 0..=500.
    pub n_trees: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            max_depth: 6,
            subsample: 1.0,
            min_leaf: 1,
            colsample: 1.0,
            eta: 0.32,
            gamma: 0.0,
            lambda: 1.0,
            n_trees: 100,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::BadHyperparams(msg.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        if self.min_leaf < 1 {
            return bad("min_leaf must be >= 1");
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return bad("colsample must be in (0, 1]");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must be in (0, 1]");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return bad("gamma must be >= 0");
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if self.n_trees > 500 {
            return bad("n_trees must be <= 500");
        }
        Ok(())
    }
}

/// A regression tree node. Leaf values are already scaled by the learning
/// rate; `cover` counts the training rows that reached the node during the
/// tree's fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Internal {
        feature: usize,
        threshold: f64,
        cover: usize,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
        cover: usize,
    },
}

impl TreeNode {
    pub fn cover(&self) -> usize {
        match self {
            TreeNode::Internal { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }

    /// Route a row to its leaf: left iff value < threshold.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if row[*feature] < *threshold {
                    left.predict_row(row)
                } else {
                    right.predict_row(row)
                }
            }
        }
    }

    /// Cover-weighted mean of leaf values: the tree's expected output under
    /// its own training distribution.
    pub fn cover_weighted_mean(&self) -> f64 {
        match self {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Internal { left, right, .. } => {
                let (cl, cr) = (left.cover() as f64, right.cover() as f64);
                (cl * left.cover_weighted_mean() + cr * right.cover_weighted_mean()) / (cl + cr)
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn max_feature_index(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Internal {
                feature,
                left,
                right,
                ..
            } => Some(
                (*feature)
                    .max(left.max_feature_index().unwrap_or(0))
                    .max(right.max_feature_index().unwrap_or(0)),
            ),
        }
    }
}

/// An additive ensemble: prediction is `base_score` plus the sum of reached
/// leaf values over all trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub hyperparams: Hyperparams,
    pub trees: Vec<TreeNode>,
}

impl Ensemble {
    /// Constant model: no trees, predicts `base_score` everywhere.
    pub fn constant(base_score: f64, feature_names: Vec<String>) -> Self {
        Ensemble {
            base_score,
            feature_names,
            hyperparams: Hyperparams {
                n_trees: 0,
                ..Hyperparams::default()
            },
            trees: Vec::new(),
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let model: Ensemble =
            serde_json::from_str(json).map_err(|e| TrainError::ModelFormat(e.to_string()))?;
        let n = model.feature_names.len();
        for tree in &model.trees {
            if let Some(max) = tree.max_feature_index() {
                if max >= n {
                    return Err(TrainError::ModelFormat(format!(
                        "tree references feature {max} but the model has {n}"
                    )));
                }
            }
        }
        Ok(model)
    }
}

/// Split gain for squared-error boosting:
/// `1/2 * (GL^2/(HL+l) + GR^2/(HR+l) - (GL+GR)^2/(HL+HR+l)) - gamma`.
/// For squared error each instance contributes h = 1, so hessian totals are
/// instance counts. The degenerate all-zero case evaluates to `-gamma`.
pub fn split_gain(
    g_left: f64,
    h_left: f64,
    g_right: f64,
    h_right: f64,
    lambda: f64,
    gamma: f64,
) -> f64 {
    let term = |g: f64, h: f64| {
        if h + lambda > 0.0 {
            g * g / (h + lambda)
        } else {
            0.0
        }
    };
    0.5 * (term(g_left, h_left) + term(g_right, h_right)
        - term(g_left + g_right, h_left + h_right))
        - gamma
}

fn leaf_value(g_sum: f64, h_sum: f64, hp: &Hyperparams) -> f64 {
    if h_sum + hp.lambda > 0.0 {
        -hp.eta * g_sum / (h_sum + hp.lambda)
    } else {
        0.0
    }
}

/// Fit one regression tree on the given rows and candidate columns.
///
/// Gradients and hessians are indexed by global row id. Exact greedy search:
/// for every candidate column, rows are sorted by value and every midpoint
/// between consecutive distinct values is scored with [`split_gain`]; the
/// best strictly positive gain wins, with ties broken toward the lowest
/// column index and then the lowest threshold. A split must leave at least
/// `min_leaf` instances on each side.
pub fn fit_tree(
    matrix: &FeatureMatrix,
    rows: &[usize],
    cols: &[usize],
    grad: &[f64],
    hess: &[f64],
    hp: &Hyperparams,
) -> Result<TreeNode> {
    if rows.is_empty() {
        return Err(TrainError::EmptyNode);
    }
    let mut buf = Vec::with_capacity(rows.len());
    Ok(grow(matrix, rows, cols, grad, hess, hp, 0, &mut buf))
}

struct BestSplit {
    gain: f64,
    col: usize,
    threshold: f64,
}

#[allow(clippy::too_many_arguments)]
fn grow(
    matrix: &FeatureMatrix,
    rows: &[usize],
    cols: &[usize],
    grad: &[f64],
    hess: &[f64],
    hp: &Hyperparams,
    depth: usize,
    buf: &mut Vec<(f64, usize)>,
) -> TreeNode {
    let g_sum: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_sum: f64 = rows.iter().map(|&r| hess[r]).sum();
    let leaf = TreeNode::Leaf {
        value: leaf_value(g_sum, h_sum, hp),
        cover: rows.len(),
    };
    if depth >= hp.max_depth || rows.len() < 2 * hp.min_leaf {
        return leaf;
    }

    let mut best: Option<BestSplit> = None;
    for &c in cols {
        buf.clear();
        buf.extend(rows.iter().map(|&r| (matrix.get(r, c), r)));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut gl = 0.0;
        let mut hl = 0.0;
        for i in 0..buf.len() - 1 {
            gl += grad[buf[i].1];
            hl += hess[buf[i].1];
            if buf[i].0 == buf[i + 1].0 {
                continue;
            }
            let left_n = i + 1;
            if left_n < hp.min_leaf || buf.len() - left_n < hp.min_leaf {
                continue;
            }
            let gain = split_gain(gl, hl, g_sum - gl, h_sum - hl, hp.lambda, hp.gamma);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(BestSplit {
                    gain,
                    col: c,
                    threshold: 0.5 * (buf[i].0 + buf[i + 1].0),
                });
            }
        }
    }

    match best {
        Some(split) if split.gain > 0.0 => {
            let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
            for &r in rows {
                if matrix.get(r, split.col) < split.threshold {
                    left_rows.push(r);
                } else {
                    right_rows.push(r);
                }
            }
            let left = grow(matrix, &left_rows, cols, grad, hess, hp, depth + 1, buf);
            let right = grow(matrix, &right_rows, cols, grad, hess, hp, depth + 1, buf);
            TreeNode::Internal {
                feature: split.col,
                threshold: split.threshold,
                cover: rows.len(),
                left: Box::new(left),
                right: Box::new(right),
            }
        }
        _ => leaf,
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, fraction: f64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..len).collect();
    }
    let k = ((fraction * len as f64).floor() as usize).max(1);
    let mut idx = rand::seq::index::sample(rng, len, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Train an ensemble: base score is the target mean, then `n_trees` rounds
/// of fitting a tree to the current gradients on a per-round row and column
/// subsample.
pub fn train(matrix: &FeatureMatrix, targets: &[f64], hp: &Hyperparams) -> Result<Ensemble> {
    hp.validate()?;
    let n = matrix.n_rows();
    if n == 0 {
        return Err(TrainError::EmptyData);
    }
    if targets.len() != n {
        return Err(TrainError::LengthMismatch {
            targets: targets.len(),
            rows: n,
        });
    }
    let base_score = targets.iter().sum::<f64>() / n as f64;
    let mut preds = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let hess = vec![1.0; n];
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..matrix.n_cols()).collect();

    let mut trees = Vec::with_capacity(hp.n_trees);
    for t in 1..=hp.n_trees {
        for i in 0..n {
            grad[i] = preds[i] - targets[i];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(t as u64);
        let rows = if hp.subsample < 1.0 {
            sample_indices(&mut rng, n, hp.subsample)
        } else {
            all_rows.clone()
        };
        let cols = if hp.colsample < 1.0 {
            sample_indices(&mut rng, matrix.n_cols(), hp.colsample)
        } else {
            all_cols.clone()
        };
        let tree = fit_tree(matrix, &rows, &cols, &grad, &hess, hp)?;
        for (i, p) in preds.iter_mut().enumerate() {
            *p += tree.predict_row(matrix.row(i));
        }
        trees.push(tree);
    }
    Ok(Ensemble {
        base_score,
        feature_names: matrix.feature_names().to_vec(),
        hyperparams: hp.clone(),
        trees,
    })
}

/// Predict every row of `matrix`. The matrix must carry exactly the model's
/// feature names.
pub fn predict(model: &Ensemble, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
    if matrix.feature_names() != model.feature_names.as_slice() {
        return Err(TrainError::FeatureMismatch);
    }
    Ok((0..matrix.n_rows())
        .map(|r| model.predict_row(matrix.row(r)))
        .collect())
}
