//! The two-model procedure: fit an outcome model on the control condition,
//! residualize the treated condition against its counterfactual predictions,
//! and fit a second model to the residuals. The second model's feature
//! importance identifies candidate moderators of the intervention effect.
//!
//! Also houses the robustness operations: the condition-leakage check, a
//! linear baseline, learning curves over training-school count, split-sample
//! stability of model-2 importance, and an unregularized overfit probe.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gbtree::{self, Ensemble, Hyperparams, TrainError};
use crate::seed;
use crate::shapley::{self, ImportanceTable, ShapError, ShapleyRow};
use crate::stats;
use crate::tabular::{
    apply_impute, encode_matrix, fit_impute, outcome_change, Dataset, FeatureMatrix, ImputePlan,
    TabularError,
};
use crate::tuning::{
    self, effect_stats, make_folds, per_group_r, EffectStats, EvalSummary, FoldMode, Grid,
    TuneError, TuneTrace,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least {need} distinct groups, found {found}")]
    TooFewGroups { need: usize, found: usize },
    #[error("both conditions must be present")]
    OneCondition,
    #[error("design matrix has no usable columns")]
    DegenerateDesign,
    #[error("importance vectors are constant; correlation undefined")]
    UndefinedCorrelation,
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Shap(#[from] ShapError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Whether imputation means are fitted inside every cross-validation fold
/// (no leakage) or once on all rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeScope {
    Fold,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Provenance only: where the schema came from.
    pub schema_ref: Option<String>,
    pub grid: Grid,
    pub inner_folds: usize,
    pub passes: usize,
    pub impute_scope: ImputeScope,
    pub seed: u64,
    /// Upper bound for the tree-count search.
    pub max_trees: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_ref: None,
            grid: Grid::paper(),
            inner_folds: 5,
            passes: 5,
            impute_scope: ImputeScope::Fold,
            seed: 0,
            max_trees: 500,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> serde_json::Result<Self> {
        serde_json::from_str(json)
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("config serializes"));
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Residual outcome change per treated row: actual change minus the control
/// model's counterfactual prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLabels {
    pub residuals: Vec<f64>,
}

/// One outer cross-validation fold: the held-out group, its rows, the
/// held-out predictions, and the model that produced them.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub test_group: String,
    pub test_rows: Vec<usize>,
    pub predictions: Vec<f64>,
    pub model: Ensemble,
}

/// A fully fitted model: held-out accuracy from leave-one-group-out
/// cross-validation, plus the final model re-tuned and re-trained on all
/// rows with its attribution table.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub ensemble: Ensemble,
    pub eval: EvalSummary,
    pub importance: ImportanceTable,
    pub trace: TuneTrace,
    /// Held-out prediction per input row, assembled across outer folds.
    pub heldout_predictions: Vec<f64>,
    /// Imputation plan fitted on all rows; what the final model expects.
    pub impute_plan: ImputePlan,
    /// All rows imputed with `impute_plan` and encoded.
    pub matrix: FeatureMatrix,
    /// Per-row attribution of the final model over `matrix`.
    pub phis: Vec<ShapleyRow>,
}

fn distinct_groups(groups: &[String]) -> usize {
    let set: std::collections::BTreeSet<&String> = groups.iter().collect();
    set.len()
}

// Inner-CV fold count cannot exceed the number of training groups.
fn inner_k(cfg_inner: usize, n_groups: usize) -> usize {
    cfg_inner.min(n_groups).max(2)
}

fn tune_and_train(
    matrix: &FeatureMatrix,
    targets: &[f64],
    groups: &[String],
    cfg: &PipelineConfig,
    seed_value: u64,
) -> Result<(Ensemble, TuneTrace)> {
    let k = inner_k(cfg.inner_folds, distinct_groups(groups));
    let (mut hp, trace) = tuning::coordinate_descent(
        matrix,
        targets,
        groups,
        &cfg.grid,
        k,
        cfg.passes,
        seed::derive(seed_value, "descent", 0),
    )?;
    hp.n_trees = tuning::tune_tree_count(
        matrix,
        targets,
        groups,
        &hp,
        cfg.max_trees,
        k,
        seed::derive(seed_value, "tree-count", 0),
    )?;
    hp.seed = seed::derive(seed_value, "train", 0);
    let model = gbtree::train(matrix, targets, &hp)?;
    Ok((model, trace))
}

/// Leave-one-group-out fit and predict over `data`, with imputation fitted
/// per the configured scope and hyperparameters re-tuned inside every fold.
/// Held-out rows never influence their fold's model.
pub fn loso_outcomes(
    data: &Dataset,
    targets: &[f64],
    cfg: &PipelineConfig,
    label: &str,
) -> Result<Vec<FoldOutcome>> {
    let groups = data.group_ids();
    let plan = make_folds(&groups, FoldMode::LeaveOneGroupOut, 0, 0, cfg.seed)?;
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();

    plan.folds
        .par_iter()
        .enumerate()
        .map(|(fold_idx, fold)| {
            let fold_seed = seed::derive(cfg.seed, label, fold_idx as u64);
            let (train_rows, test_rows) = fold.row_indices(&groups);
            let impute = match cfg.impute_scope {
                ImputeScope::Fold => fit_impute(data, &train_rows)?,
                ImputeScope::Global => fit_impute(data, &all_rows)?,
            };
            let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
            let train_matrix = matrix.select_rows(&train_rows);
            let train_y: Vec<f64> = train_rows.iter().map(|&i| targets[i]).collect();
            let train_groups: Vec<String> =
                train_rows.iter().map(|&i| groups[i].clone()).collect();
            let (model, _) = tune_and_train(&train_matrix, &train_y, &train_groups, cfg, fold_seed)?;
            let predictions = gbtree::predict(&model, &matrix.select_rows(&test_rows))?;
            Ok(FoldOutcome {
                test_group: fold.test_groups.iter().next().expect("one group").clone(),
                test_rows,
                predictions,
                model,
            })
        })
        .collect()
}

fn assemble_heldout(outcomes: &[FoldOutcome], n_rows: usize) -> Vec<f64> {
    let mut preds = vec![f64::NAN; n_rows];
    for fold in outcomes {
        for (&row, &p) in fold.test_rows.iter().zip(&fold.predictions) {
            preds[row] = p;
        }
    }
    preds
}

fn fit_labelled_model(
    data: &Dataset,
    targets: &[f64],
    cfg: &PipelineConfig,
    label: &str,
) -> Result<FittedModel> {
    let groups = data.group_ids();
    let n_groups = distinct_groups(&groups);
    if n_groups < 2 {
        return Err(PipelineError::TooFewGroups {
            need: 2,
            found: n_groups,
        });
    }

    let outcomes = loso_outcomes(data, targets, cfg, label)?;
    let heldout = assemble_heldout(&outcomes, data.n_rows());
    let eval = per_group_r(&heldout, targets, &groups)?;

    // Re-tune and re-train on all rows for the returned model; the fold
    // models exist only to measure held-out accuracy.
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();
    let impute_plan = fit_impute(data, &all_rows)?;
    let matrix = encode_matrix(&apply_impute(data, &impute_plan)?)?;
    let final_seed = seed::derive(cfg.seed, label, u64::MAX);
    let (ensemble, trace) = tune_and_train(&matrix, targets, &groups, cfg, final_seed)?;
    let phis = shapley::tree_shap_batch(&ensemble, &matrix)?;
    let importance = shapley::importance_table(&phis, matrix.origin())?;
    Ok(FittedModel {
        ensemble,
        eval,
        importance,
        trace,
        heldout_predictions: heldout,
        impute_plan,
        matrix,
        phis,
    })
}

/// Model 1: outcome change regressed on features, control condition only.
pub fn fit_control_model(data: &Dataset, cfg: &PipelineConfig) -> Result<FittedModel> {
    let (control_rows, _) = data.split_by_condition();
    if control_rows.is_empty() {
        return Err(PipelineError::OneCondition);
    }
    let control = data.subset(&control_rows);
    let targets = outcome_change(&control)?;
    fit_labelled_model(&control, &targets, cfg, "model1")
}

/// Counterfactual residuals for treated rows: actual change minus model 1's
/// prediction under the control-fitted imputation plan.
pub fn counterfactual_residuals(
    model1: &Ensemble,
    treated: &Dataset,
    plan: &ImputePlan,
) -> Result<ResidualLabels> {
    let matrix = encode_matrix(&apply_impute(treated, plan)?)?;
    let predicted = gbtree::predict(model1, &matrix)?;
    let actual = outcome_change(treated)?;
    Ok(ResidualLabels {
        residuals: actual
            .iter()
            .zip(&predicted)
            .map(|(a, p)| a - p)
            .collect(),
    })
}

/// Model 2: the residual labels regressed on features, treated rows only,
/// with the same procedure as model 1.
pub fn fit_effect_model(
    treated: &Dataset,
    labels: &ResidualLabels,
    cfg: &PipelineConfig,
) -> Result<FittedModel> {
    fit_labelled_model(treated, &labels.residuals, cfg, "model2")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Held-out fraction of rows whose condition was predicted correctly.
    pub accuracy: f64,
    /// Two-sided binomial test against the majority-class base rate.
    pub p_value: f64,
}

/// Guard against features that encode the experimental condition: predict
/// condition from the features under leave-one-school-out and test the
/// held-out accuracy against the majority base rate. The regression core is
/// reused with a 0.5 threshold.
pub fn condition_leakage_check(data: &Dataset, cfg: &PipelineConfig) -> Result<LeakageReport> {
    let treated = data.treated();
    let n_treated = treated.iter().filter(|t| **t).count();
    if n_treated == 0 || n_treated == data.n_rows() {
        return Err(PipelineError::OneCondition);
    }
    let labels: Vec<f64> = treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let groups = data.group_ids();
    let plan = make_folds(&groups, FoldMode::LeaveOneGroupOut, 0, 0, cfg.seed)?;
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();

    let fold_correct: Vec<Result<(usize, usize)>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold_idx, fold)| {
            let (train_rows, test_rows) = fold.row_indices(&groups);
            let impute = match cfg.impute_scope {
                ImputeScope::Fold => fit_impute(data, &train_rows)?,
                ImputeScope::Global => fit_impute(data, &all_rows)?,
            };
            let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
            let train_y: Vec<f64> = train_rows.iter().map(|&i| labels[i]).collect();
            let hp = Hyperparams {
                seed: seed::derive(cfg.seed, "leakage", fold_idx as u64),
                ..Hyperparams::default()
            };
            let model = gbtree::train(&matrix.select_rows(&train_rows), &train_y, &hp)?;
            let preds = gbtree::predict(&model, &matrix.select_rows(&test_rows))?;
            let correct = preds
                .iter()
                .zip(test_rows.iter().map(|&i| labels[i]))
                .filter(|(p, y)| (**p >= 0.5) == (*y == 1.0))
                .count();
            Ok((correct, test_rows.len()))
        })
        .collect();

    let mut correct = 0usize;
    let mut total = 0usize;
    for fc in fold_correct {
        let (c, t) = fc?;
        correct += c;
        total += t;
    }
    let base_rate = n_treated.max(data.n_rows() - n_treated) as f64 / data.n_rows() as f64;
    Ok(LeakageReport {
        accuracy: correct as f64 / total as f64,
        p_value: stats::binomial_two_sided_p(correct, total, base_rate),
    })
}

// Design matrix for the linear baseline: intercept, numeric columns, and
// one-hot groups with their first category dropped.
fn ols_columns(matrix: &FeatureMatrix) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut seen_sources: Vec<&String> = Vec::new();
    for c in 0..matrix.n_cols() {
        if matrix.category()[c].is_none() {
            kept.push(c);
        } else {
            let source = &matrix.origin()[c];
            if seen_sources.contains(&source) {
                kept.push(c);
            } else {
                seen_sources.push(source); // drop the first category
            }
        }
    }
    kept
}

fn ols_design(matrix: &FeatureMatrix, rows: &[usize], kept: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), kept.len() + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            matrix.get(rows[r], kept[c - 1])
        }
    })
}

/// Ordinary least squares under the same leave-one-school-out evaluation as
/// the boosted models. Rank-deficient folds fall back to the minimum-norm
/// solution. `targets` defaults to the outcome change.
pub fn ols_baseline(
    data: &Dataset,
    targets: Option<&[f64]>,
    cfg: &PipelineConfig,
) -> Result<EvalSummary> {
    if data.schema().feature_indices().is_empty() {
        return Err(PipelineError::DegenerateDesign);
    }
    let owned;
    let targets: &[f64] = match targets {
        Some(t) => t,
        None => {
            owned = outcome_change(data)?;
            &owned
        }
    };
    let groups = data.group_ids();
    let plan = make_folds(&groups, FoldMode::LeaveOneGroupOut, 0, 0, cfg.seed)?;
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();

    let fold_preds: Vec<Result<(Vec<usize>, Vec<f64>)>> = plan
        .folds
        .par_iter()
        .map(|fold| {
            let (train_rows, test_rows) = fold.row_indices(&groups);
            let impute = match cfg.impute_scope {
                ImputeScope::Fold => fit_impute(data, &train_rows)?,
                ImputeScope::Global => fit_impute(data, &all_rows)?,
            };
            let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
            let kept = ols_columns(&matrix);
            let x = ols_design(&matrix, &train_rows, &kept);
            let y = DVector::from_iterator(
                train_rows.len(),
                train_rows.iter().map(|&i| targets[i]),
            );
            let svd = x.svd(true, true);
            let beta = svd
                .solve(&y, 1e-12)
                .map_err(|_| PipelineError::DegenerateDesign)?;
            let x_test = ols_design(&matrix, &test_rows, &kept);
            let preds = x_test * beta;
            Ok((test_rows, preds.iter().copied().collect()))
        })
        .collect();

    let mut heldout = vec![f64::NAN; data.n_rows()];
    for fp in fold_preds {
        let (rows, preds) = fp?;
        for (&r, &p) in rows.iter().zip(&preds) {
            heldout[r] = p;
        }
    }
    Ok(per_group_r(&heldout, targets, &groups)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_r: f64,
    /// Mean per-school r of each individual draw.
    pub per_repeat_mean_r: Vec<f64>,
}

/// Accuracy as a function of training-set size: for each `k`, draw `repeats`
/// random sets of `k` training schools, train with fixed default
/// hyperparameters, and average the mean per-school r over the held-out
/// schools.
pub fn learning_curve(
    data: &Dataset,
    cfg: &PipelineConfig,
    k_values: &[usize],
    repeats: usize,
) -> Result<Vec<CurvePoint>> {
    let targets = outcome_change(data)?;
    let groups = data.group_ids();
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();

    k_values
        .iter()
        .map(|&k| {
            let plan = make_folds(
                &groups,
                FoldMode::LeaveKGroupsIn,
                k,
                repeats,
                seed::derive(cfg.seed, "curve", k as u64),
            )?;
            let rs: Vec<Result<f64>> = plan
                .folds
                .par_iter()
                .enumerate()
                .map(|(rep, fold)| {
                    let (train_rows, test_rows) = fold.row_indices(&groups);
                    let impute = match cfg.impute_scope {
                        ImputeScope::Fold => fit_impute(data, &train_rows)?,
                        ImputeScope::Global => fit_impute(data, &all_rows)?,
                    };
                    let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
                    let train_y: Vec<f64> = train_rows.iter().map(|&i| targets[i]).collect();
                    let hp = Hyperparams {
                        seed: seed::derive(cfg.seed, "curve-train", (k * 1000 + rep) as u64),
                        ..Hyperparams::default()
                    };
                    let model = gbtree::train(&matrix.select_rows(&train_rows), &train_y, &hp)?;
                    let preds = gbtree::predict(&model, &matrix.select_rows(&test_rows))?;
                    let test_y: Vec<f64> = test_rows.iter().map(|&i| targets[i]).collect();
                    let test_groups: Vec<String> =
                        test_rows.iter().map(|&i| groups[i].clone()).collect();
                    Ok(per_group_r(&preds, &test_y, &test_groups)?.mean_r)
                })
                .collect();
            let per_repeat: Vec<f64> = rs.into_iter().collect::<Result<_>>()?;
            Ok(CurvePoint {
                k,
                mean_r: stats::mean(&per_repeat),
                per_repeat_mean_r: per_repeat,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Pearson r between the two halves' importance vectors.
    pub importance_correlation: f64,
}

/// Split the treated schools into random halves, run the full model-2
/// procedure on each, and correlate the two importance tables. Both halves
/// run with the same derived seed, so identical halves produce identical
/// models.
pub fn split_sample_stability(
    treated: &Dataset,
    labels: &ResidualLabels,
    cfg: &PipelineConfig,
) -> Result<StabilityReport> {
    let groups = treated.group_ids();
    let distinct: Vec<String> = {
        let set: std::collections::BTreeSet<&String> = groups.iter().collect();
        set.into_iter().cloned().collect()
    };
    if distinct.len() < 4 {
        return Err(PipelineError::TooFewGroups {
            need: 4,
            found: distinct.len(),
        });
    }
    let mut shuffled = distinct.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "stability-split", 0));
    shuffled.shuffle(&mut rng);
    let half_a: std::collections::BTreeSet<String> =
        shuffled[..shuffled.len() / 2].iter().cloned().collect();

    let half_cfg = PipelineConfig {
        seed: seed::derive(cfg.seed, "stability-half", 0),
        ..cfg.clone()
    };
    let mut tables = Vec::new();
    for in_half_a in [true, false] {
        let rows: Vec<usize> = (0..treated.n_rows())
            .filter(|&i| half_a.contains(&groups[i]) == in_half_a)
            .collect();
        let half_data = treated.subset(&rows);
        let half_labels = ResidualLabels {
            residuals: rows.iter().map(|&i| labels.residuals[i]).collect(),
        };
        let fitted = fit_effect_model(&half_data, &half_labels, &half_cfg)?;
        tables.push(fitted.importance);
    }

    let names: Vec<&String> = tables[0].rows.iter().map(|r| &r.feature).collect();
    let a: Vec<f64> = names
        .iter()
        .map(|n| tables[0].mean_abs_for(n).expect("feature present"))
        .collect();
    let b: Vec<f64> = names
        .iter()
        .map(|n| tables[1].mean_abs_for(n).expect("same schema"))
        .collect();
    match stats::pearson(&a, &b) {
        Some(r) => Ok(StabilityReport {
            importance_correlation: r,
        }),
        None => Err(PipelineError::UndefinedCorrelation),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Overall training-set r; None when predictions are constant.
    pub train_r: Option<f64>,
    /// Leave-one-school-out mean per-school r; None when every fold is
    /// skipped.
    pub heldout_r: Option<f64>,
}

fn probe_hyperparams(n_trees: usize, seed_value: u64) -> Hyperparams {
    Hyperparams {
        max_depth: 8,
        min_leaf: 1,
        gamma: 0.0,
        subsample: 1.0,
        colsample: 1.0,
        eta: 0.32,
        n_trees,
        seed: seed_value,
        ..Hyperparams::default()
    }
}

/// Train with regularization effectively disabled and no tuning; report the
/// overall training-set correlation against the leave-one-school-out mean
/// per-school correlation. The gap measures overfitting.
pub fn overfit_probe(data: &Dataset, cfg: &PipelineConfig) -> Result<ProbeReport> {
    overfit_probe_with_trees(data, cfg, 500)
}

pub fn overfit_probe_with_trees(
    data: &Dataset,
    cfg: &PipelineConfig,
    n_trees: usize,
) -> Result<ProbeReport> {
    let targets = outcome_change(data)?;
    let groups = data.group_ids();
    let all_rows: Vec<usize> = (0..data.n_rows()).collect();

    // Training-set fit.
    let impute = fit_impute(data, &all_rows)?;
    let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
    let hp = probe_hyperparams(n_trees, seed::derive(cfg.seed, "probe-train", 0));
    let model = gbtree::train(&matrix, &targets, &hp)?;
    let train_preds = gbtree::predict(&model, &matrix)?;
    let train_r = stats::pearson(&train_preds, &targets);

    // Held-out fit with the same fixed hyperparameters.
    let plan = make_folds(&groups, FoldMode::LeaveOneGroupOut, 0, 0, cfg.seed)?;
    let fold_preds: Vec<Result<(Vec<usize>, Vec<f64>)>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold_idx, fold)| {
            let (train_rows, test_rows) = fold.row_indices(&groups);
            let impute = match cfg.impute_scope {
                ImputeScope::Fold => fit_impute(data, &train_rows)?,
                ImputeScope::Global => fit_impute(data, &all_rows)?,
            };
            let matrix = encode_matrix(&apply_impute(data, &impute)?)?;
            let train_y: Vec<f64> = train_rows.iter().map(|&i| targets[i]).collect();
            let hp = probe_hyperparams(
                n_trees,
                seed::derive(cfg.seed, "probe-fold", fold_idx as u64),
            );
            let model = gbtree::train(&matrix.select_rows(&train_rows), &train_y, &hp)?;
            let preds = gbtree::predict(&model, &matrix.select_rows(&test_rows))?;
            Ok((test_rows, preds))
        })
        .collect();
    let mut heldout = vec![f64::NAN; data.n_rows()];
    for fp in fold_preds {
        let (rows, preds) = fp?;
        for (&r, &p) in rows.iter().zip(&preds) {
            heldout[r] = p;
        }
    }
    let heldout_r = match per_group_r(&heldout, &targets, &groups) {
        Ok(summary) => Some(summary.mean_r),
        Err(TuneError::NoDefinedFolds) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ProbeReport { train_r, heldout_r })
}

/// Serializable accuracy/importance summary of one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub eval: EvalSummary,
    pub importance: ImportanceTable,
    pub tuned_hp: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    /// Set by the CLI; None in library runs so reports stay byte-identical.
    pub timestamp: Option<String>,
}

/// Every reported quantity of one full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub model1: ModelReport,
    pub model2: ModelReport,
    pub effect: EffectStats,
    pub residual_summary: ResidualSummary,
    pub leakage: LeakageReport,
    pub provenance: Provenance,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A pipeline run: the serializable report plus the fitted models and their
/// attribution matrices for downstream exports.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub model1: FittedModel,
    pub model2: FittedModel,
}

/// The full procedure: control model, counterfactual residuals, effect
/// model, condition contrast, and leakage check.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let (control_rows, treated_rows) = data.split_by_condition();
    if control_rows.is_empty() || treated_rows.is_empty() {
        return Err(PipelineError::OneCondition);
    }
    let treated = data.subset(&treated_rows);

    let model1 = fit_control_model(data, cfg)?;
    let residuals = counterfactual_residuals(&model1.ensemble, &treated, &model1.impute_plan)?;
    let model2 = fit_effect_model(&treated, &residuals, cfg)?;

    let change = outcome_change(data)?;
    let control_change: Vec<f64> = control_rows.iter().map(|&i| change[i]).collect();
    let treated_change: Vec<f64> = treated_rows.iter().map(|&i| change[i]).collect();
    let effect = effect_stats(&control_change, &treated_change)?;

    let leakage = condition_leakage_check(data, cfg)?;

    let report = PipelineReport {
        model1: ModelReport {
            eval: model1.eval.clone(),
            importance: model1.importance.clone(),
            tuned_hp: model1.ensemble.hyperparams.clone(),
        },
        model2: ModelReport {
            eval: model2.eval.clone(),
            importance: model2.importance.clone(),
            tuned_hp: model2.ensemble.hyperparams.clone(),
        },
        effect,
        residual_summary: ResidualSummary {
            mean: stats::mean(&residuals.residuals),
            sd: stats::sample_sd(&residuals.residuals),
            n: residuals.residuals.len(),
        },
        leakage,
        provenance: Provenance {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            timestamp: None,
        },
    };
    Ok(PipelineRun {
        report,
        model1,
        model2,
    })
}

/// Write the report and all tables into `dir` under fixed names.
pub fn write_artifacts(run: &PipelineRun, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(TabularError::Io)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(TabularError::Io)?;
        written.push(path);
        Ok(())
    };
    emit("report.json", run.report.to_json())?;
    emit("model1.json", run.model1.ensemble.to_json())?;
    emit("model2.json", run.model2.ensemble.to_json())?;

    for (name, model, top) in [
        ("model1", &run.model1, 5usize),
        ("model2", &run.model2, 4usize),
    ] {
        let path = dir.join(format!("{name}_importance.csv"));
        model
            .importance
            .write_csv(&path)
            .map_err(TabularError::Io)?;
        written.push(path);

        let trace_path = dir.join(format!("tune_trace_{name}.csv"));
        model.trace.write_csv(&trace_path).map_err(TabularError::Io)?;
        written.push(trace_path);

        for row in model.importance.rows.iter().take(top) {
            let table = shapley::dependence_table(&model.phis, &row.feature, &model.matrix)?;
            let safe: String = row
                .feature
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '_' })
                .collect();
            let path = dir.join(format!("{name}_dependence_{safe}.csv"));
            table.write_csv(&path).map_err(TabularError::Io)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, Expr, SynthConfig};
    use crate::tabular::{Cell, ColumnKind, ColumnRole, ColumnSpec, Schema};

    fn small_cfg(seed_value: u64) -> PipelineConfig {
        PipelineConfig {
            grid: Grid::single(&Hyperparams {
                max_depth: 2,
                eta: 0.3,
                min_leaf: 8,
                ..Hyperparams::default()
            }),
            inner_folds: 2,
            passes: 1,
            seed: seed_value,
            max_trees: 30,
            ..PipelineConfig::default()
        }
    }

    fn small_trial(seed_value: u64, n: usize, schools: usize) -> SynthConfig {
        SynthConfig {
            n_students: n,
            n_schools: schools,
            seed: seed_value,
            noise_sd: 0.3,
            drift: Expr::feature("x1").times(Expr::constant(0.2)),
            effect: Expr::threshold("x1", 0.0, 0.3, 0.0),
            ..synth::test_base_config()
        }
    }

    #[test]
    fn residual_mean_identity() {
        let (data, _) = synth::generate(&small_trial(3, 240, 4)).unwrap();
        let (_, treated_rows) = data.split_by_condition();
        let treated = data.subset(&treated_rows);
        let all: Vec<usize> = (0..treated.n_rows()).collect();
        let plan = fit_impute(&treated, &all).unwrap();
        let matrix = encode_matrix(&apply_impute(&treated, &plan).unwrap()).unwrap();
        let targets = outcome_change(&treated).unwrap();
        let model = gbtree::train(
            &matrix,
            &targets,
            &Hyperparams {
                n_trees: 20,
                max_depth: 2,
                ..Hyperparams::default()
            },
        )
        .unwrap();

        let labels = counterfactual_residuals(&model, &treated, &plan).unwrap();
        let preds = gbtree::predict(&model, &matrix).unwrap();
        let identity = stats::mean(&labels.residuals)
            - (stats::mean(&targets) - stats::mean(&preds));
        assert!(identity.abs() < 1e-12);
    }

    #[test]
    fn constant_zero_model_degrades_to_raw_changes() {
        let (data, _) = synth::generate(&small_trial(5, 200, 4)).unwrap();
        let (_, treated_rows) = data.split_by_condition();
        let treated = data.subset(&treated_rows);
        let all: Vec<usize> = (0..treated.n_rows()).collect();
        let plan = fit_impute(&treated, &all).unwrap();
        let matrix = encode_matrix(&apply_impute(&treated, &plan).unwrap()).unwrap();
        let zero = Ensemble::constant(0.0, matrix.feature_names().to_vec());

        let labels = counterfactual_residuals(&zero, &treated, &plan).unwrap();
        assert_eq!(labels.residuals, outcome_change(&treated).unwrap());
    }

    #[test]
    fn counterfactual_residual_arithmetic() {
        let (data, _) = synth::generate(&small_trial(7, 120, 4)).unwrap();
        let (_, treated_rows) = data.split_by_condition();
        let treated = data.subset(&treated_rows);
        let all: Vec<usize> = (0..treated.n_rows()).collect();
        let plan = fit_impute(&treated, &all).unwrap();
        let matrix = encode_matrix(&apply_impute(&treated, &plan).unwrap()).unwrap();
        // Model predicting -0.2 everywhere: residual = change + 0.2.
        let model = Ensemble::constant(-0.2, matrix.feature_names().to_vec());
        let labels = counterfactual_residuals(&model, &treated, &plan).unwrap();
        let change = outcome_change(&treated).unwrap();
        for (r, c) in labels.residuals.iter().zip(&change) {
            assert!((r - (c + 0.2)).abs() < 1e-12);
        }
    }

    // Dataset with an extra feature column equal to the condition flag.
    fn leaky_dataset(seed_value: u64) -> Dataset {
        let (data, _) = synth::generate(&small_trial(seed_value, 300, 4)).unwrap();
        let mut columns = data.schema().columns().to_vec();
        columns.push(ColumnSpec {
            name: "leak".into(),
            kind: ColumnKind::Continuous,
            role: ColumnRole::Feature,
            categories: Vec::new(),
        });
        let schema = Schema::new(columns).unwrap();
        let treated = data.treated();
        let w = data.schema().columns().len();
        let mut cells = Vec::new();
        for r in 0..data.n_rows() {
            for c in 0..w {
                cells.push(data.cell(r, c).clone());
            }
            cells.push(Cell::Num(if treated[r] { 1.0 } else { 0.0 }));
        }
        Dataset::new(schema, cells).unwrap()
    }

    #[test]
    fn leakage_check_catches_a_perfect_leak() {
        let data = leaky_dataset(11);
        let report = condition_leakage_check(&data, &small_cfg(0)).unwrap();
        assert!(report.accuracy >= 0.99, "accuracy {}", report.accuracy);
        assert!(report.p_value < 0.001);
    }

    #[test]
    fn shuffling_condition_restores_non_significance() {
        let data = leaky_dataset(13);
        // Permute the condition column with a fixed seed.
        let cond_col = data
            .schema()
            .columns()
            .iter()
            .position(|c| c.role == ColumnRole::Condition)
            .unwrap();
        let mut order: Vec<usize> = (0..data.n_rows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        order.shuffle(&mut rng);
        let w = data.schema().columns().len();
        let mut cells = Vec::new();
        for r in 0..data.n_rows() {
            for c in 0..w {
                if c == cond_col {
                    cells.push(data.cell(order[r], c).clone());
                } else {
                    cells.push(data.cell(r, c).clone());
                }
            }
        }
        let shuffled = Dataset::new(data.schema().clone(), cells).unwrap();
        let report = condition_leakage_check(&shuffled, &small_cfg(0)).unwrap();
        assert!(report.p_value > 0.05, "p = {}", report.p_value);
    }

    fn linear_dataset(n: usize, schools: usize) -> Dataset {
        let columns = vec![
            ColumnSpec {
                name: "school".into(),
                kind: ColumnKind::Categorical,
                role: ColumnRole::Group,
                categories: Vec::new(),
            },
            ColumnSpec {
                name: "condition".into(),
                kind: ColumnKind::Categorical,
                role: ColumnRole::Condition,
                categories: Vec::new(),
            },
            ColumnSpec {
                name: "gpa_pre".into(),
                kind: ColumnKind::Continuous,
                role: ColumnRole::PreOutcome,
                categories: Vec::new(),
            },
            ColumnSpec {
                name: "gpa_post".into(),
                kind: ColumnKind::Continuous,
                role: ColumnRole::PostOutcome,
                categories: Vec::new(),
            },
            ColumnSpec {
                name: "x".into(),
                kind: ColumnKind::Continuous,
                role: ColumnRole::Feature,
                categories: Vec::new(),
            },
        ];
        let schema = Schema::new(columns).unwrap();
        let mut cells = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for i in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            cells.push(Cell::Cat(format!("s{}", i % schools)));
            cells.push(Cell::Cat("control".into()));
            cells.push(Cell::Num(0.0));
            cells.push(Cell::Num(2.0 * x + 1.0));
            cells.push(Cell::Num(x));
        }
        Dataset::new(schema, cells).unwrap()
    }

    #[test]
    fn ols_fits_exact_linear_data_perfectly() {
        let data = linear_dataset(120, 4);
        let summary = ols_baseline(&data, None, &small_cfg(0)).unwrap();
        for r in &summary.per_fold_r {
            assert!((r - 1.0).abs() < 1e-9, "fold r = {r}");
        }
        assert!((summary.mean_r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overfit_probe_degenerate_tree_count_is_skipped() {
        let (data, _) = synth::generate(&small_trial(17, 150, 3)).unwrap();
        let report = overfit_probe_with_trees(&data, &small_cfg(0), 0).unwrap();
        assert_eq!(report.train_r, None);
        assert_eq!(report.heldout_r, None);
    }

    // Eight schools carrying byte-identical rows.
    fn duplicated_school_treated() -> (Dataset, ResidualLabels) {
        let (base, _) = synth::generate(&SynthConfig {
            n_students: 60,
            n_schools: 2,
            treatment_fraction: 1.0,
            noise_sd: 0.2,
            drift: Expr::feature("x1").times(Expr::constant(0.3)),
            effect: Expr::constant(0.0),
            seed: 23,
            school_drift_sd: 0.0,
            ..synth::test_base_config()
        })
        .unwrap();
        let schema = base.schema().clone();
        let group_col = schema
            .columns()
            .iter()
            .position(|c| c.role == ColumnRole::Group)
            .unwrap();
        let w = schema.columns().len();
        let mut cells = Vec::new();
        for copy in 0..8 {
            for r in 0..base.n_rows() {
                for c in 0..w {
                    if c == group_col {
                        cells.push(Cell::Cat(format!("dup{copy}")));
                    } else {
                        cells.push(base.cell(r, c).clone());
                    }
                }
            }
        }
        let data = Dataset::new(schema, cells).unwrap();
        let change = outcome_change(&data).unwrap();
        (data, ResidualLabels { residuals: change })
    }

    #[test]
    fn stability_is_one_on_duplicated_halves() {
        let (treated, labels) = duplicated_school_treated();
        let report = split_sample_stability(&treated, &labels, &small_cfg(1)).unwrap();
        assert!(
            (report.importance_correlation - 1.0).abs() < 1e-12,
            "r = {}",
            report.importance_correlation
        );
    }

    #[test]
    fn learning_curve_boundary_single_fold() {
        let (data, _) = synth::generate(&small_trial(19, 200, 5)).unwrap();
        let points = learning_curve(&data, &small_cfg(0), &[4], 1).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].per_repeat_mean_r.len(), 1);
        assert!(points[0].mean_r.is_finite());
    }

    #[test]
    fn heldout_school_perturbation_never_changes_fold_models() {
        let (data, _) = synth::generate(&small_trial(29, 240, 4)).unwrap();
        let (control_rows, _) = data.split_by_condition();
        let control = data.subset(&control_rows);
        let targets = outcome_change(&control).unwrap();
        let cfg = small_cfg(2);
        let base = loso_outcomes(&control, &targets, &cfg, "model1").unwrap();

        for fold_idx in 0..base.len() {
            let held_group = &base[fold_idx].test_group;
            // Perturb every feature cell of the held-out school.
            let schema = control.schema().clone();
            let w = schema.columns().len();
            let groups = control.group_ids();
            let feature_idx = schema.feature_indices();
            let mut cells = Vec::new();
            for r in 0..control.n_rows() {
                for c in 0..w {
                    if groups[r] == *held_group && feature_idx.contains(&c) {
                        cells.push(match schema.column(c).kind {
                            ColumnKind::Categorical => Cell::Missing,
                            _ => Cell::Num(999.0),
                        });
                    } else {
                        cells.push(control.cell(r, c).clone());
                    }
                }
            }
            let perturbed = Dataset::new(schema, cells).unwrap();
            let after = loso_outcomes(&perturbed, &targets, &cfg, "model1").unwrap();
            assert_eq!(
                base[fold_idx].model.to_json(),
                after[fold_idx].model.to_json(),
                "fold {fold_idx} model changed when its held-out school was perturbed"
            );
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_serializable() {
        let (data, _) = synth::generate(&small_trial(31, 200, 4)).unwrap();
        let cfg = small_cfg(3);
        let a = run_pipeline(&data, &cfg).unwrap();
        let b = run_pipeline(&data, &cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert!(a.report.effect.mean_diff.is_finite());
        assert!(a.report.leakage.accuracy.is_finite());
        assert_eq!(
            a.report.residual_summary.n,
            data.treated().iter().filter(|t| **t).count()
        );
        // Round-trips as JSON.
        let parsed: PipelineReport = serde_json::from_str(&a.report.to_json()).unwrap();
        assert_eq!(parsed, a.report);
    }

    #[test]
    fn write_artifacts_emits_fixed_names() {
        let (data, _) = synth::generate(&small_trial(37, 160, 4)).unwrap();
        let run = run_pipeline(&data, &small_cfg(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = write_artifacts(&run, dir.path()).unwrap();
        for name in [
            "report.json",
            "model1.json",
            "model2.json",
            "model1_importance.csv",
            "model2_importance.csv",
            "tune_trace_model1.csv",
            "tune_trace_model2.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        assert!(written.len() >= 7);
    }

    #[test]
    fn too_few_groups_is_reported() {
        let (data, _) = synth::generate(&small_trial(41, 80, 2)).unwrap();
        // Only keep one school: control model cannot cross-validate.
        let groups = data.group_ids();
        let first = groups[0].clone();
        let rows: Vec<usize> = (0..data.n_rows()).filter(|&i| groups[i] == first).collect();
        let single = data.subset(&rows);
        let err = fit_control_model(&single, &small_cfg(0)).unwrap_err();
        assert!(matches!(err, PipelineError::TooFewGroups { .. }));
    }
}
