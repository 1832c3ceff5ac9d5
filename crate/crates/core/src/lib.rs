//! Two-model analysis of randomized experiments: which covariates predict
//! heterogeneous intervention effects?
//!
//! The pipeline fits a gradient-boosted regression model to the control
//! condition, predicts counterfactual outcome change for treated units,
//! and fits a second model to the residuals. Feature importance of the
//! second model (mean absolute Shapley values) identifies candidate
//! moderators of the intervention effect.
//!
//! Modules:
//! - [`tabular`]: typed CSV loading, imputation, derived features, one-hot encoding
//! - [`gbtree`]: gradient-boosted regression trees with exact greedy splits
//! - [`tuning`]: grouped cross-validation, coordinate-descent search, metrics
//! - [`shapley`]: exact tree attribution plus a brute-force oracle
//! - [`twomodel`]: the control/effect model procedure and robustness checks
//! - [`synth`]: synthetic randomized-trial generator with known ground truth

pub mod gbtree;
pub mod seed;
pub mod shapley;
pub mod stats;
pub mod synth;
pub mod tabular;
pub mod tuning;
pub mod twomodel;
