//! Grouped cross-validation, coordinate-descent hyperparameter search, and
//! the evaluation metrics used by the pipeline.
//!
//! Folds always split on group (school) boundaries: held-out students never
//! share a school with training students. The search sweeps one grid axis at
//! a time in a fixed order, keeping the incumbent on ties, for a fixed
//! number of passes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbtree::{self, Hyperparams, TrainError};
use crate::seed;
use crate::stats;
use crate::tabular::{rows_by_group, FeatureMatrix};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("need at least two distinct groups")]
    TooFewGroups,
    #[error("bad k for fold construction: {0}")]
    BadK(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("each sample needs at least two values")]
    TooFewValues,
    #[error("every group was skipped; no correlation is defined")]
    NoDefinedFolds,
    #[error("pooled standard deviation is zero; effect size undefined")]
    ZeroVariance,
    #[error("empty grid axis: {0}")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, TuneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    LeaveOneGroupOut,
    LeaveKGroupsIn,
    KFoldGrouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_groups: BTreeSet<String>,
    pub test_groups: BTreeSet<String>,
}

impl Fold {
    /// Row indices for this fold given the per-row group ids.
    pub fn row_indices(&self, groups: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            if self.train_groups.contains(g) {
                train.push(i);
            } else if self.test_groups.contains(g) {
                test.push(i);
            }
        }
        (train, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub folds: Vec<Fold>,
}

/// Build grouped folds.
///
/// - `LeaveOneGroupOut`: one fold per distinct group (k and repeats ignored).
/// - `LeaveKGroupsIn`: `repeats` folds, each training on `k` sampled groups
///   and testing on all the rest.
/// - `KFoldGrouped`: groups shuffled into `k` nearly equal buckets; fold i
///   tests on bucket i.
pub fn make_folds(
    groups: &[String],
    mode: FoldMode,
    k: usize,
    repeats: usize,
    seed_value: u64,
) -> Result<FoldPlan> {
    let distinct: Vec<String> = {
        let set: BTreeSet<&String> = groups.iter().collect();
        set.into_iter().cloned().collect()
    };
    if distinct.len() < 2 {
        return Err(TuneError::TooFewGroups);
    }
    let folds = match mode {
        FoldMode::LeaveOneGroupOut => distinct
            .iter()
            .map(|g| Fold {
                train_groups: distinct.iter().filter(|o| *o != g).cloned().collect(),
                test_groups: BTreeSet::from([g.clone()]),
            })
            .collect(),
        FoldMode::LeaveKGroupsIn => {
            if k < 1 || k > distinct.len() - 1 {
                return Err(TuneError::BadK(format!(
                    "k = {k} with {} groups",
                    distinct.len()
                )));
            }
            (0..repeats)
                .map(|rep| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "leave-k-in", rep as u64));
                    let mut shuffled = distinct.clone();
                    shuffled.shuffle(&mut rng);
                    let train: BTreeSet<String> = shuffled[..k].iter().cloned().collect();
                    let test: BTreeSet<String> =
                        shuffled[k..].iter().cloned().collect();
                    Fold {
                        train_groups: train,
                        test_groups: test,
                    }
                })
                .collect()
        }
        FoldMode::KFoldGrouped => {
            if k < 2 || k > distinct.len() {
                return Err(TuneError::BadK(format!(
                    "k = {k} with {} groups",
                    distinct.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "k-fold", 0));
            let mut shuffled = distinct.clone();
            shuffled.shuffle(&mut rng);
            (0..k)
                .map(|bucket| {
                    let test: BTreeSet<String> = shuffled
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| j % k == bucket)
                        .map(|(_, g)| g.clone())
                        .collect();
                    let train: BTreeSet<String> =
                        shuffled.iter().filter(|g| !test.contains(*g)).cloned().collect();
                    Fold {
                        train_groups: train,
                        test_groups: test,
                    }
                })
                .collect()
        }
    };
    Ok(FoldPlan { mode, folds })
}

/// The six tuned axes. `paper()` is the published grid; any other
/// combination of non-empty axes is a valid (e.g. reduced) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub max_depth: Vec<usize>,
    pub subsample: Vec<f64>,
    pub min_leaf: Vec<usize>,
    pub colsample: Vec<f64>,
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Grid {
    /// The published six-axis grid: 8 x 6 x 8 x 6 x 6 x 12 = 165,888
    /// combinations.
    pub fn paper() -> Grid {
        Grid {
            max_depth: (1..=8).collect(),
            subsample: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            min_leaf: vec![1, 2, 4, 8, 16, 32, 64, 128],
            colsample: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            eta: vec![0.01, 0.02, 0.04, 0.08, 0.16, 0.32],
            gamma: vec![
                0.0, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56, 5.12, 10.24,
            ],
        }
    }

    /// Degenerate grid pinning every axis to the values in `hp`.
    pub fn single(hp: &Hyperparams) -> Grid {
        Grid {
            max_depth: vec![hp.max_depth],
            subsample: vec![hp.subsample],
            min_leaf: vec![hp.min_leaf],
            colsample: vec![hp.colsample],
            eta: vec![hp.eta],
            gamma: vec![hp.gamma],
        }
    }

    pub fn combination_count(&self) -> usize {
        self.max_depth.len()
            * self.subsample.len()
            * self.min_leaf.len()
            * self.colsample.len()
            * self.eta.len()
            * self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        for axis in Axis::ALL {
            if self.axis_values(axis).is_empty() {
                return Err(TuneError::EmptyAxis(axis.name()));
            }
        }
        Ok(())
    }

    pub fn axis_values(&self, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::MaxDepth => self.max_depth.iter().map(|&v| v as f64).collect(),
            Axis::Subsample => self.subsample.clone(),
            Axis::MinLeaf => self.min_leaf.iter().map(|&v| v as f64).collect(),
            Axis::Colsample => self.colsample.clone(),
            Axis::Eta => self.eta.clone(),
            Axis::Gamma => self.gamma.clone(),
        }
    }
}

/// The sweep order matches the axis order the grid was published in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    MaxDepth,
    Subsample,
    MinLeaf,
    Colsample,
    Eta,
    Gamma,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::MaxDepth,
        Axis::Subsample,
        Axis::MinLeaf,
        Axis::Colsample,
        Axis::Eta,
        Axis::Gamma,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::MaxDepth => "max_depth",
            Axis::Subsample => "subsample",
            Axis::MinLeaf => "min_leaf",
            Axis::Colsample => "colsample",
            Axis::Eta => "eta",
            Axis::Gamma => "gamma",
        }
    }

    fn apply(&self, hp: &mut Hyperparams, value: f64) {
        match self {
            Axis::MaxDepth => hp.max_depth = value as usize,
            Axis::Subsample => hp.subsample = value,
            Axis::MinLeaf => hp.min_leaf = value as usize,
            Axis::Colsample => hp.colsample = value,
            Axis::Eta => hp.eta = value,
            Axis::Gamma => hp.gamma = value,
        }
    }

    fn read(&self, hp: &Hyperparams) -> f64 {
        match self {
            Axis::MaxDepth => hp.max_depth as f64,
            Axis::Subsample => hp.subsample,
            Axis::MinLeaf => hp.min_leaf as f64,
            Axis::Colsample => hp.colsample,
            Axis::Eta => hp.eta,
            Axis::Gamma => hp.gamma,
        }
    }

    /// Conventional package default this axis starts nearest to.
    fn start_target(&self) -> f64 {
        match self {
            Axis::MaxDepth => 6.0,
            Axis::Subsample => 1.0,
            Axis::MinLeaf => 1.0,
            Axis::Colsample => 1.0,
            Axis::Eta => 0.3,
            Axis::Gamma => 0.0,
        }
    }
}

/// One evaluated candidate during the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneStep {
    pub pass: usize,
    pub axis: String,
    pub candidate: f64,
    pub inner_rmse: f64,
    pub accepted: bool,
}

/// Full candidate-level record of one coordinate-descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub steps: Vec<TuneStep>,
    pub final_hp: Hyperparams,
}

impl TuneTrace {
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::from("pass,axis,candidate,inner_rmse,accepted\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.pass, s.axis, s.candidate, s.inner_rmse, s.accepted
            ));
        }
        std::fs::write(path, out)
    }
}

/// Grid value closest to the conventional defaults, per axis; ties go to the
/// earlier grid entry.
fn start_point(grid: &Grid) -> Hyperparams {
    let mut hp = Hyperparams::default();
    for axis in Axis::ALL {
        let target = axis.start_target();
        let values = grid.axis_values(axis);
        let mut best = values[0];
        for &v in &values[1..] {
            if (v - target).abs() < (best - target).abs() {
                best = v;
            }
        }
        axis.apply(&mut hp, best);
    }
    hp
}

/// Coordinate descent over an arbitrary objective.
///
/// Starts at the grid values nearest the package defaults; for each pass and
/// axis evaluates every candidate with the other axes held at their
/// incumbents, adopting the axis best only when strictly better than the
/// incumbent. Candidates within an axis evaluate in parallel; acceptance is
/// sequential. Terminates early once a full pass changes nothing.
pub fn coordinate_descent_with<F>(
    grid: &Grid,
    passes: usize,
    objective: F,
) -> Result<(Hyperparams, TuneTrace)>
where
    F: Fn(&Hyperparams) -> Result<f64> + Sync,
{
    assert!(passes >= 1, "passes must be >= 1");
    grid.validate()?;
    let mut hp = start_point(grid);
    let mut incumbent_rmse = objective(&hp)?;
    let mut steps = Vec::new();

    for pass in 1..=passes {
        let mut changed = false;
        for axis in Axis::ALL {
            let current = axis.read(&hp);
            let values = grid.axis_values(axis);
            let scores: Vec<Result<f64>> = values
                .par_iter()
                .map(|&v| {
                    if v == current {
                        Ok(incumbent_rmse)
                    } else {
                        let mut candidate = hp.clone();
                        axis.apply(&mut candidate, v);
                        objective(&candidate)
                    }
                })
                .collect();

            let mut best: Option<(f64, f64)> = None;
            let first_step = steps.len();
            for (&v, score) in values.iter().zip(scores) {
                let r = score?;
                steps.push(TuneStep {
                    pass,
                    axis: axis.name().to_string(),
                    candidate: v,
                    inner_rmse: r,
                    accepted: false,
                });
                if v != current {
                    let better = match best {
                        None => true,
                        Some((bv, br)) => r < br || (r == br && v < bv),
                    };
                    if better {
                        best = Some((v, r));
                    }
                }
            }
            if let Some((v, r)) = best {
                if r < incumbent_rmse {
                    axis.apply(&mut hp, v);
                    incumbent_rmse = r;
                    changed = true;
                    for s in &mut steps[first_step..] {
                        if s.candidate == v {
                            s.accepted = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok((
        hp.clone(),
        TuneTrace {
            steps,
            final_hp: hp,
        },
    ))
}

/// Mean inner-CV RMSE objective over a grouped k-fold split of the given
/// rows. All candidates share the same fold plan and per-fold training
/// seeds, so scores are comparable.
pub fn coordinate_descent(
    matrix: &FeatureMatrix,
    targets: &[f64],
    groups: &[String],
    grid: &Grid,
    inner_folds: usize,
    passes: usize,
    seed_value: u64,
) -> Result<(Hyperparams, TuneTrace)> {
    let plan = make_folds(
        groups,
        FoldMode::KFoldGrouped,
        inner_folds,
        1,
        seed::derive(seed_value, "inner-folds", 0),
    )?;
    let splits = materialize(matrix, targets, groups, &plan);
    let objective = |hp: &Hyperparams| inner_cv_rmse(&splits, hp, seed_value);
    let (mut hp, mut trace) = coordinate_descent_with(grid, passes, objective)?;
    hp.seed = seed_value;
    trace.final_hp = hp.clone();
    Ok((hp, trace))
}

struct Split {
    train_matrix: FeatureMatrix,
    train_y: Vec<f64>,
    test_matrix: FeatureMatrix,
    test_y: Vec<f64>,
}

fn materialize(
    matrix: &FeatureMatrix,
    targets: &[f64],
    groups: &[String],
    plan: &FoldPlan,
) -> Vec<Split> {
    plan.folds
        .iter()
        .map(|fold| {
            let (train, test) = fold.row_indices(groups);
            Split {
                train_matrix: matrix.select_rows(&train),
                train_y: train.iter().map(|&i| targets[i]).collect(),
                test_matrix: matrix.select_rows(&test),
                test_y: test.iter().map(|&i| targets[i]).collect(),
            }
        })
        .collect()
}

fn inner_cv_rmse(splits: &[Split], hp: &Hyperparams, seed_value: u64) -> Result<f64> {
    let fold_rmse: Vec<Result<f64>> = splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| {
            let mut hp_fold = hp.clone();
            hp_fold.seed = seed::derive(seed_value, "inner-train", i as u64);
            let model = gbtree::train(&split.train_matrix, &split.train_y, &hp_fold)?;
            let preds = gbtree::predict(&model, &split.test_matrix)?;
            rmse(&preds, &split.test_y)
        })
        .collect();
    let mut sum = 0.0;
    for r in &fold_rmse {
        match r {
            Ok(v) => sum += v,
            Err(_) => {
                return fold_rmse.into_iter().find(|r| r.is_err()).unwrap();
            }
        }
    }
    Ok(sum / splits.len() as f64)
}

/// Pick the prefix length (1..=max_trees) minimizing mean inner-validation
/// RMSE. Each fold trains once with `max_trees` trees; prefixes are scored
/// incrementally without retraining. Ties go to the smaller count.
pub fn tune_tree_count(
    matrix: &FeatureMatrix,
    targets: &[f64],
    groups: &[String],
    hp: &Hyperparams,
    max_trees: usize,
    inner_folds: usize,
    seed_value: u64,
) -> Result<usize> {
    assert!(max_trees >= 1, "max_trees must be >= 1");
    let plan = make_folds(
        groups,
        FoldMode::KFoldGrouped,
        inner_folds,
        1,
        seed::derive(seed_value, "tree-count-folds", 0),
    )?;
    let splits = materialize(matrix, targets, groups, &plan);

    let curves: Vec<Result<Vec<f64>>> = splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| {
            let mut hp_fold = hp.clone();
            hp_fold.n_trees = max_trees;
            hp_fold.seed = seed::derive(seed_value, "tree-count-train", i as u64);
            let model = gbtree::train(&split.train_matrix, &split.train_y, &hp_fold)?;
            let n_test = split.test_matrix.n_rows();
            let mut preds = vec![model.base_score; n_test];
            let mut curve = Vec::with_capacity(max_trees);
            for tree in &model.trees {
                for (j, p) in preds.iter_mut().enumerate() {
                    *p += tree.predict_row(split.test_matrix.row(j));
                }
                curve.push(rmse(&preds, &split.test_y)?);
            }
            Ok(curve)
        })
        .collect();

    let mut mean_curve = vec![0.0; max_trees];
    for curve in curves {
        let curve = curve?;
        for (m, c) in mean_curve.iter_mut().zip(curve) {
            *m += c / splits.len() as f64;
        }
    }
    let mut best = 0;
    for (i, &v) in mean_curve.iter().enumerate() {
        if v < mean_curve[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(TuneError::LengthMismatch(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(TuneError::Empty);
    }
    let mse = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Per-group correlation summary for held-out predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Pearson r per group with a defined correlation, in sorted group order.
    pub per_fold_r: Vec<f64>,
    /// Groups skipped for constant vectors or fewer than 3 rows.
    pub skipped_folds: usize,
    /// Unweighted mean of the defined per-group correlations.
    pub mean_r: f64,
    /// mean_r squared.
    pub variance_explained: f64,
    /// Two-sided one-sample t-test of the per-group correlations against 0.
    pub p_value: f64,
    /// Overall RMSE across all rows.
    pub rmse: f64,
}

/// Pearson r within each group, skipping groups where r is undefined
/// (constant predictions or actuals, or fewer than 3 rows). The mean is
/// unweighted; significance is a two-sided one-sample t-test across the
/// defined per-group correlations.
pub fn per_group_r(pred: &[f64], actual: &[f64], groups: &[String]) -> Result<EvalSummary> {
    if pred.len() != actual.len() || pred.len() != groups.len() {
        return Err(TuneError::LengthMismatch(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(TuneError::Empty);
    }
    let mut per_fold_r = Vec::new();
    let mut skipped = 0usize;
    for rows in rows_by_group(groups).values() {
        if rows.len() < 3 {
            skipped += 1;
            continue;
        }
        let p: Vec<f64> = rows.iter().map(|&i| pred[i]).collect();
        let a: Vec<f64> = rows.iter().map(|&i| actual[i]).collect();
        match stats::pearson(&p, &a) {
            Some(r) => per_fold_r.push(r),
            None => skipped += 1,
        }
    }
    if per_fold_r.is_empty() {
        return Err(TuneError::NoDefinedFolds);
    }
    let mean_r = stats::mean(&per_fold_r);
    Ok(EvalSummary {
        skipped_folds: skipped,
        mean_r,
        variance_explained: mean_r * mean_r,
        p_value: stats::one_sample_t_p(&per_fold_r),
        rmse: rmse(pred, actual)?,
        per_fold_r,
    })
}

/// Mean difference, pooled-SD Cohen's d, and Welch two-sided p for a
/// treatment/control contrast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectStats {
    pub mean_diff: f64,
    pub cohens_d: f64,
    pub p_value: f64,
}

pub fn effect_stats(control: &[f64], treatment: &[f64]) -> Result<EffectStats> {
    if control.len() < 2 || treatment.len() < 2 {
        return Err(TuneError::TooFewValues);
    }
    let mean_diff = stats::mean(treatment) - stats::mean(control);
    let (n1, n2) = (control.len() as f64, treatment.len() as f64);
    let pooled_var = ((n1 - 1.0) * stats::sample_variance(control)
        + (n2 - 1.0) * stats::sample_variance(treatment))
        / (n1 + n2 - 2.0);
    if pooled_var == 0.0 {
        return Err(TuneError::ZeroVariance);
    }
    Ok(EffectStats {
        mean_diff,
        cohens_d: mean_diff / pooled_var.sqrt(),
        p_value: stats::welch_p(control, treatment),
    })
}
