//! Exact per-instance Shapley attribution for tree ensembles.
//!
//! Attribution is path-dependent: when a feature is absent from a
//! coalition, the tree expectation marginalizes over that feature using the
//! per-node training covers recorded at fit time. [`tree_shap`] computes the
//! attribution in polynomial time by tracking, along each root-to-leaf path,
//! the proportion of feature-subset permutations that flow down the path;
//! [`brute_force_shap`] computes the same quantity from the classic subset
//! enumeration and exists to cross-check it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbtree::{Ensemble, TreeNode};
use crate::tabular::{source_value, FeatureMatrix, SourceValue};

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("instance has {got} features but the model expects {want}")]
    FeatureMismatch { got: usize, want: usize },
    #[error("a tree node lacks usable cover metadata")]
    MissingCovers,
    #[error("brute force supports at most 15 features, got {0}")]
    TooManyFeatures(usize),
    #[error("no instances")]
    Empty,
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("labels length {0} does not match instance count {1}")]
    LabelMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, ShapError>;

/// Per-instance attribution: one phi per matrix column, in outcome units.
/// `base_value + phi.sum()` equals the model prediction for the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyRow {
    pub phi: Vec<f64>,
    pub base_value: f64,
}

/// Expected ensemble output under the training cover distribution.
pub fn expected_value(model: &Ensemble) -> f64 {
    model.base_score
        + model
            .trees
            .iter()
            .map(TreeNode::cover_weighted_mean)
            .sum::<f64>()
}

fn validate_covers(node: &TreeNode) -> Result<()> {
    match node {
        TreeNode::Leaf { .. } => Ok(()),
        TreeNode::Internal {
            cover, left, right, ..
        } => {
            if *cover == 0 || left.cover() == 0 || right.cover() == 0 {
                return Err(ShapError::MissingCovers);
            }
            validate_covers(left)?;
            validate_covers(right)
        }
    }
}

fn check_instance(model: &Ensemble, instance: &[f64]) -> Result<()> {
    if instance.len() != model.feature_names.len() {
        return Err(ShapError::FeatureMismatch {
            got: instance.len(),
            want: model.feature_names.len(),
        });
    }
    for tree in &model.trees {
        validate_covers(tree)?;
    }
    Ok(())
}

// One element of the active decision path: the feature that split, the
// proportion of cover flowing through when the feature is absent, whether
// the instance flows through when present, and the accumulated permutation
// weight.
#[derive(Clone, Copy)]
struct PathElem {
    feature: isize,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero_fraction: f64, one_fraction: f64, feature: isize) {
    let l = path.len();
    path.push(PathElem {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if l == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..l).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) as f64 / (l + 1) as f64;
        path[i].pweight = zero_fraction * path[i].pweight * (l - i) as f64 / (l + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElem>, index: usize) {
    let l = path.len() - 1;
    let one_fraction = path[index].one_fraction;
    let zero_fraction = path[index].zero_fraction;
    let mut next_one_portion = path[l].pweight;
    for j in (0..l).rev() {
        if one_fraction != 0.0 {
            let tmp = path[j].pweight;
            path[j].pweight = next_one_portion * (l + 1) as f64 / ((j + 1) as f64 * one_fraction);
            next_one_portion =
                tmp - path[j].pweight * zero_fraction * (l - j) as f64 / (l + 1) as f64;
        } else {
            path[j].pweight = path[j].pweight * (l + 1) as f64 / (zero_fraction * (l - j) as f64);
        }
    }
    for j in index..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero_fraction = path[j + 1].zero_fraction;
        path[j].one_fraction = path[j + 1].one_fraction;
    }
    path.pop();
}

// Total permutation weight the path would carry if `index` were removed.
fn unwound_sum(path: &[PathElem], index: usize) -> f64 {
    let l = path.len() - 1;
    let one_fraction = path[index].one_fraction;
    let zero_fraction = path[index].zero_fraction;
    let mut next_one_portion = path[l].pweight;
    let mut total = 0.0;
    for j in (0..l).rev() {
        if one_fraction != 0.0 {
            let tmp = next_one_portion * (l + 1) as f64 / ((j + 1) as f64 * one_fraction);
            total += tmp;
            next_one_portion =
                path[j].pweight - tmp * zero_fraction * (l - j) as f64 / (l + 1) as f64;
        } else {
            total += path[j].pweight * (l + 1) as f64 / (zero_fraction * (l - j) as f64);
        }
    }
    total
}

fn recurse(
    node: &TreeNode,
    instance: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElem>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: isize,
) {
    extend(&mut path, zero_fraction, one_fraction, feature);
    match node {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature as usize] += w * (el.one_fraction - el.zero_fraction) * value;
            }
        }
        TreeNode::Internal {
            feature: split_feature,
            threshold,
            cover,
            left,
            right,
        } => {
            let (hot, cold) = if instance[*split_feature] < *threshold {
                (left, right)
            } else {
                (right, left)
            };
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            if let Some(k) = path[1..]
                .iter()
                .position(|e| e.feature == *split_feature as isize)
            {
                let k = k + 1;
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind(&mut path, k);
            }
            let total = *cover as f64;
            recurse(
                hot,
                instance,
                phi,
                path.clone(),
                incoming_zero * hot.cover() as f64 / total,
                incoming_one,
                *split_feature as isize,
            );
            recurse(
                cold,
                instance,
                phi,
                path,
                incoming_zero * cold.cover() as f64 / total,
                0.0,
                *split_feature as isize,
            );
        }
    }
}

/// Path-dependent Shapley attribution of one instance, summed over all
/// trees. Polynomial in tree size; exact.
pub fn tree_shap(model: &Ensemble, instance: &[f64]) -> Result<ShapleyRow> {
    check_instance(model, instance)?;
    let mut phi = vec![0.0; instance.len()];
    for tree in &model.trees {
        recurse(tree, instance, &mut phi, Vec::new(), 1.0, 1.0, -1);
    }
    Ok(ShapleyRow {
        phi,
        base_value: expected_value(model),
    })
}

/// Attribute every row of `matrix`; rows are independent and run in
/// parallel.
pub fn tree_shap_batch(model: &Ensemble, matrix: &FeatureMatrix) -> Result<Vec<ShapleyRow>> {
    if matrix.feature_names() != model.feature_names.as_slice() {
        return Err(ShapError::FeatureMismatch {
            got: matrix.n_cols(),
            want: model.feature_names.len(),
        });
    }
    (0..matrix.n_rows())
        .into_par_iter()
        .map(|r| tree_shap(model, matrix.row(r)))
        .collect()
}

// Tree expectation with the coalition's features following the instance and
// all others marginalized by cover fractions.
fn coalition_value(node: &TreeNode, instance: &[f64], mask: u32) -> f64 {
    match node {
        TreeNode::Leaf { value, .. } => *value,
        TreeNode::Internal {
            feature,
            threshold,
            cover,
            left,
            right,
        } => {
            if mask & (1 << *feature) != 0 {
                let child = if instance[*feature] < *threshold {
                    left
                } else {
                    right
                };
                coalition_value(child, instance, mask)
            } else {
                let total = *cover as f64;
                (left.cover() as f64 / total) * coalition_value(left, instance, mask)
                    + (right.cover() as f64 / total) * coalition_value(right, instance, mask)
            }
        }
    }
}

/// Classic Shapley formula over all 2^n feature coalitions, with the same
/// path-dependent coalition value as [`tree_shap`]. The independent oracle:
/// the two must agree to numerical precision.
pub fn brute_force_shap(model: &Ensemble, instance: &[f64]) -> Result<ShapleyRow> {
    check_instance(model, instance)?;
    let m = instance.len();
    if m > 15 {
        return Err(ShapError::TooManyFeatures(m));
    }

    // Coalition values for every mask, summed over trees.
    let n_masks = 1usize << m;
    let mut value = vec![model.base_score; n_masks];
    for (mask, v) in value.iter_mut().enumerate() {
        for tree in &model.trees {
            *v += coalition_value(tree, instance, mask as u32);
        }
    }

    // w[s] = s! (m - s - 1)! / m!
    let mut factorial = vec![1.0f64; m + 1];
    for i in 1..=m {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..m)
        .map(|s| factorial[s] * factorial[m - s - 1] / factorial[m])
        .collect();

    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..n_masks {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                *p += weight[s] * (value[mask | bit] - value[mask]);
            }
        }
    }
    Ok(ShapleyRow {
        phi,
        base_value: value[0],
    })
}

/// One feature's aggregate importance: mean and population SD of the
/// absolute per-instance attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub mean_abs_phi: f64,
    pub sd_abs_phi: f64,
}

/// Feature importance table sorted by descending mean absolute attribution.
/// One-hot member columns are re-aggregated to their source column, so a
/// categorical feature gets a single row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    pub fn mean_abs_for(&self, feature: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.feature == feature)
            .map(|r| r.mean_abs_phi)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::from("feature,mean_abs_phi,sd_abs_phi\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.feature, r.mean_abs_phi, r.sd_abs_phi));
        }
        std::fs::write(path, out)
    }
}

/// Per-instance summed attribution of each source feature, before any
/// absolute value. Instances index the outer vector.
pub fn source_phis(phis: &[ShapleyRow], origin: &[String]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if phis.is_empty() {
        return Err(ShapError::Empty);
    }
    for row in phis {
        if row.phi.len() != origin.len() {
            return Err(ShapError::FeatureMismatch {
                got: row.phi.len(),
                want: origin.len(),
            });
        }
    }
    let mut sources: Vec<String> = Vec::new();
    for o in origin {
        if !sources.contains(o) {
            sources.push(o.clone());
        }
    }
    let member_cols: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| {
            (0..origin.len())
                .filter(|&c| &origin[c] == s)
                .collect::<Vec<usize>>()
        })
        .collect();
    let summed = phis
        .iter()
        .map(|row| {
            member_cols
                .iter()
                .map(|cols| cols.iter().map(|&c| row.phi[c]).sum())
                .collect()
        })
        .collect();
    Ok((sources, summed))
}

/// Mean and SD of absolute per-instance attribution per source feature,
/// sorted descending by the mean (ties by name).
pub fn importance_table(phis: &[ShapleyRow], origin: &[String]) -> Result<ImportanceTable> {
    let (sources, summed) = source_phis(phis, origin)?;
    let n = summed.len() as f64;
    let mut rows: Vec<ImportanceRow> = sources
        .iter()
        .enumerate()
        .map(|(j, feature)| {
            let abs: Vec<f64> = summed.iter().map(|row| row[j].abs()).collect();
            let mean = abs.iter().sum::<f64>() / n;
            let var = abs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            ImportanceRow {
                feature: feature.clone(),
                mean_abs_phi: mean,
                sd_abs_phi: var.sqrt(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_abs_phi
            .total_cmp(&a.mean_abs_phi)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    Ok(ImportanceTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceRow {
    pub row_id: usize,
    pub value: SourceValue,
    pub phi: f64,
}

/// Plot-ready pairing of one feature's values with its per-instance
/// attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DependenceTable {
    pub feature: String,
    pub rows: Vec<DependenceRow>,
}

impl DependenceTable {
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::from("row_id,feature_value,phi\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.row_id, r.value, r.phi));
        }
        std::fs::write(path, out)
    }
}

pub fn dependence_table(
    phis: &[ShapleyRow],
    feature: &str,
    matrix: &FeatureMatrix,
) -> Result<DependenceTable> {
    let (sources, summed) = source_phis(phis, matrix.origin())?;
    let j = sources
        .iter()
        .position(|s| s == feature)
        .ok_or_else(|| ShapError::UnknownFeature(feature.to_string()))?;
    let rows = (0..phis.len())
        .map(|i| DependenceRow {
            row_id: i,
            value: source_value(matrix, i, feature).expect("feature exists"),
            phi: summed[i][j],
        })
        .collect();
    Ok(DependenceTable {
        feature: feature.to_string(),
        rows,
    })
}

/// Signed mean attribution and count per class of a partition of the
/// instances. An empty class reports n = 0 with no mean rather than a
/// fabricated value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub n: usize,
    pub mean_phi: Option<f64>,
}

pub fn category_summary(
    phis: &[ShapleyRow],
    feature: &str,
    origin: &[String],
    labels: &[String],
    classes: Option<&[String]>,
) -> Result<Vec<ClassSummary>> {
    let (sources, summed) = source_phis(phis, origin)?;
    let j = sources
        .iter()
        .position(|s| s == feature)
        .ok_or_else(|| ShapError::UnknownFeature(feature.to_string()))?;
    if labels.len() != phis.len() {
        return Err(ShapError::LabelMismatch(labels.len(), phis.len()));
    }
    let class_list: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut seen = Vec::new();
            for l in labels {
                if !seen.contains(l) {
                    seen.push(l.clone());
                }
            }
            seen
        }
    };
    Ok(class_list
        .iter()
        .map(|class| {
            let values: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| *l == class)
                .map(|(i, _)| summed[i][j])
                .collect();
            ClassSummary {
                class: class.clone(),
                n: values.len(),
                mean_phi: if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                },
            }
        })
        .collect())
}

/// Export per-instance attributions re-aggregated to source features, one
/// row per instance plus a trailing base_value column.
pub fn write_shapley_csv(
    phis: &[ShapleyRow],
    origin: &[String],
    path: &std::path::Path,
) -> Result<()> {
    let (sources, summed) = source_phis(phis, origin)?;
    let mut out = String::new();
    out.push_str(&sources.join(","));
    out.push_str(",base_value\n");
    for (row, phi_row) in phis.iter().zip(&summed) {
        let mut fields: Vec<String> = phi_row.iter().map(|v| format!("{v}")).collect();
        fields.push(format!("{}", row.base_value));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| {
        ShapError::UnknownFeature(format!("write failed: {e}")) // unreachable in practice
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbtree::{self, Hyperparams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn stump_model() -> Ensemble {
        // Split on feature 0 at 0.5: left leaf +2 (cover 1), right -2 (cover 3).
        Ensemble {
            base_score: 0.0,
            feature_names: names(2),
            hyperparams: Hyperparams::default(),
            trees: vec![TreeNode::Internal {
                feature: 0,
                threshold: 0.5,
                cover: 4,
                left: Box::new(TreeNode::Leaf {
                    value: 2.0,
                    cover: 1,
                }),
                right: Box::new(TreeNode::Leaf {
                    value: -2.0,
                    cover: 3,
                }),
            }],
        }
    }

    #[test]
    fn constant_model_attributes_nothing() {
        let model = Ensemble::constant(1.5, names(3));
        let row = tree_shap(&model, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(row.phi, vec![0.0; 3]);
        assert_eq!(row.base_value, 1.5);
    }

    #[test]
    fn stump_attribution_matches_hand_computation() {
        let model = stump_model();
        // Instance routed left: base = 0.25*2 + 0.75*(-2) = -1, phi0 = 3.
        let row = tree_shap(&model, &[0.0, 9.9]).unwrap();
        assert!((row.base_value - (-1.0)).abs() < 1e-12);
        assert!((row.phi[0] - 3.0).abs() < 1e-12);
        assert_eq!(row.phi[1], 0.0);

        let oracle = brute_force_shap(&model, &[0.0, 9.9]).unwrap();
        assert!((oracle.phi[0] - 3.0).abs() < 1e-12);
        assert_eq!(oracle.phi[1], 0.0);
        assert!((oracle.base_value - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_feature_phi_is_prediction_minus_base() {
        let model = Ensemble {
            feature_names: names(1),
            ..stump_model()
        };
        for x in [0.0, 1.0] {
            let row = brute_force_shap(&model, &[x]).unwrap();
            let pred = model.predict_row(&[x]);
            assert!((row.phi[0] - (pred - row.base_value)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_stumps_decompose_additively() {
        let stump = |feature: usize, value: f64| TreeNode::Internal {
            feature,
            threshold: 0.5,
            cover: 4,
            left: Box::new(TreeNode::Leaf { value, cover: 2 }),
            right: Box::new(TreeNode::Leaf {
                value: -value,
                cover: 2,
            }),
        };
        let combined = Ensemble {
            base_score: 0.3,
            feature_names: names(2),
            hyperparams: Hyperparams::default(),
            trees: vec![stump(0, 1.0), stump(1, 5.0)],
        };
        let single = |t: usize| Ensemble {
            trees: vec![combined.trees[t].clone()],
            ..combined.clone()
        };
        let instance = [0.0, 1.0];
        let both = tree_shap(&combined, &instance).unwrap();
        let first = tree_shap(&single(0), &instance).unwrap();
        let second = tree_shap(&single(1), &instance).unwrap();
        for i in 0..2 {
            let sum = first.phi[i] + second.phi[i];
            assert!((both.phi[i] - sum).abs() < 1e-12);
        }
        let oracle = brute_force_shap(&combined, &instance).unwrap();
        for i in 0..2 {
            assert!((both.phi[i] - oracle.phi[i]).abs() < 1e-12);
        }
    }

    fn random_model(n_features: usize, seed: u64) -> (Ensemble, FeatureMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let values: Vec<f64> = (0..n * n_features)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let nm = names(n_features);
        let m = FeatureMatrix::from_rows(
            values,
            n_features,
            nm.clone(),
            nm,
            vec![None; n_features],
        );
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let row = m.row(r);
                row[0] - row[1 % n_features] * row[(2 % n_features).max(1) - 1]
                    + rng.random_range(-0.2..0.2)
            })
            .collect();
        let hp = Hyperparams {
            max_depth: 3,
            n_trees: 3,
            eta: 0.5,
            subsample: 0.8,
            seed,
            ..Hyperparams::default()
        };
        let model = gbtree::train(&m, &y, &hp).unwrap();
        (model, m)
    }

    #[test]
    fn tree_shap_agrees_with_brute_force_on_random_models() {
        for seed in 0..100 {
            let (model, m) = random_model(5, seed);
            let row_idx = (seed as usize * 7) % m.n_rows();
            let instance = m.row(row_idx);
            let fast = tree_shap(&model, instance).unwrap();
            let slow = brute_force_shap(&model, instance).unwrap();
            assert!((fast.base_value - slow.base_value).abs() < 1e-9, "seed {seed}");
            for i in 0..5 {
                assert!(
                    (fast.phi[i] - slow.phi[i]).abs() < 1e-8,
                    "seed {seed}, feature {i}: {} vs {}",
                    fast.phi[i],
                    slow.phi[i]
                );
            }
        }
    }

    #[test]
    fn local_accuracy_on_random_models() {
        for seed in 0..20 {
            let (model, m) = random_model(4, 1000 + seed);
            for r in 0..m.n_rows() {
                let row = tree_shap(&model, m.row(r)).unwrap();
                let pred = model.predict_row(m.row(r));
                let reconstructed = row.base_value + row.phi.iter().sum::<f64>();
                assert!(
                    (reconstructed - pred).abs() < 1e-9,
                    "seed {seed} row {r}: {reconstructed} vs {pred}"
                );
            }
        }
    }

    #[test]
    fn dummy_feature_gets_exactly_zero() {
        // Feature 2 appears in no tree.
        let model = Ensemble {
            base_score: 0.1,
            feature_names: names(3),
            hyperparams: Hyperparams::default(),
            trees: vec![
                TreeNode::Internal {
                    feature: 0,
                    threshold: 0.0,
                    cover: 10,
                    left: Box::new(TreeNode::Leaf {
                        value: 1.0,
                        cover: 4,
                    }),
                    right: Box::new(TreeNode::Internal {
                        feature: 1,
                        threshold: 1.0,
                        cover: 6,
                        left: Box::new(TreeNode::Leaf {
                            value: -1.0,
                            cover: 3,
                        }),
                        right: Box::new(TreeNode::Leaf {
                            value: 0.5,
                            cover: 3,
                        }),
                    }),
                },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let instance = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            assert_eq!(tree_shap(&model, &instance).unwrap().phi[2], 0.0);
        }
    }

    #[test]
    fn duplicated_features_split_identically_get_equal_phi() {
        let stump = |feature: usize| TreeNode::Internal {
            feature,
            threshold: 0.5,
            cover: 10,
            left: Box::new(TreeNode::Leaf {
                value: 1.0,
                cover: 6,
            }),
            right: Box::new(TreeNode::Leaf {
                value: -1.5,
                cover: 4,
            }),
        };
        let model = Ensemble {
            base_score: 0.0,
            feature_names: names(2),
            hyperparams: Hyperparams::default(),
            trees: vec![stump(0), stump(1)],
        };
        for x in [0.0, 1.0] {
            // Duplicated columns: both features carry the same value.
            let row = tree_shap(&model, &[x, x]).unwrap();
            assert!((row.phi[0] - row.phi[1]).abs() < 1e-12);
            let oracle = brute_force_shap(&model, &[x, x]).unwrap();
            assert!((oracle.phi[0] - oracle.phi[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_table_arithmetic() {
        let origin = vec!["a".to_string(), "b".to_string()];
        let phis = vec![
            ShapleyRow {
                phi: vec![1.0, 0.5],
                base_value: 0.0,
            },
            ShapleyRow {
                phi: vec![-1.0, 0.5],
                base_value: 0.0,
            },
        ];
        let table = importance_table(&phis, &origin).unwrap();
        assert_eq!(table.rows[0].feature, "a");
        assert_eq!(table.rows[0].mean_abs_phi, 1.0);
        assert_eq!(table.rows[0].sd_abs_phi, 0.0);
        assert_eq!(table.rows[1].feature, "b");
        assert_eq!(table.rows[1].mean_abs_phi, 0.5);
    }

    #[test]
    fn importance_of_constant_model_is_zero() {
        let model = Ensemble::constant(2.0, names(2));
        let phis: Vec<ShapleyRow> = (0..5)
            .map(|i| tree_shap(&model, &[i as f64, 0.0]).unwrap())
            .collect();
        let origin = vec!["f0".to_string(), "f1".to_string()];
        let table = importance_table(&phis, &origin).unwrap();
        for row in &table.rows {
            assert_eq!(row.mean_abs_phi, 0.0);
            assert_eq!(row.sd_abs_phi, 0.0);
        }
    }

    #[test]
    fn one_hot_reaggregation_matches_direct_encoding() {
        // Tree splits the indicator column "c=A" at 0.5; an equivalent model
        // splits a single 0/1 column. Summed one-hot attribution must match.
        let one_hot = Ensemble {
            base_score: 0.0,
            feature_names: vec!["c=A".to_string(), "c=B".to_string()],
            hyperparams: Hyperparams::default(),
            trees: vec![TreeNode::Internal {
                feature: 0,
                threshold: 0.5,
                cover: 10,
                left: Box::new(TreeNode::Leaf {
                    value: -0.7,
                    cover: 6,
                }),
                right: Box::new(TreeNode::Leaf {
                    value: 1.1,
                    cover: 4,
                }),
            }],
        };
        let direct = Ensemble {
            feature_names: vec!["c".to_string()],
            ..one_hot.clone()
        };
        let origin = vec!["c".to_string(), "c".to_string()];
        for (a_ind, b_ind) in [(1.0, 0.0), (0.0, 1.0)] {
            let oh = tree_shap(&one_hot, &[a_ind, b_ind]).unwrap();
            let (sources, summed) = source_phis(&[oh], &origin).unwrap();
            assert_eq!(sources, vec!["c".to_string()]);
            let d = tree_shap(&direct, &[a_ind]).unwrap();
            assert!((summed[0][0] - d.phi[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn dependence_table_has_two_levels_for_a_stump() {
        let model = stump_model();
        let nm = names(2);
        let values = vec![0.0, 5.0, 1.0, 6.0, 0.2, 7.0, 0.9, 8.0];
        let m = FeatureMatrix::from_rows(values, 2, nm.clone(), nm, vec![None, None]);
        let phis = tree_shap_batch(&model, &m).unwrap();
        let table = dependence_table(&phis, "f0", &m).unwrap();
        assert_eq!(table.rows.len(), m.n_rows());
        let mut levels: Vec<f64> = table.rows.iter().map(|r| r.phi).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(levels.len(), 2);

        assert!(matches!(
            dependence_table(&phis, "nope", &m),
            Err(ShapError::UnknownFeature(_))
        ));
    }

    #[test]
    fn category_summary_centers_on_training_data() {
        // Single-feature ensemble, no subsampling: mean attribution over the
        // training rows is exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 64;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let nm = vec!["x".to_string()];
        let m = FeatureMatrix::from_rows(values.clone(), 1, nm.clone(), nm, vec![None]);
        let y: Vec<f64> = values.iter().map(|v| v * v + v).collect();
        let hp = Hyperparams {
            max_depth: 3,
            n_trees: 10,
            eta: 0.4,
            ..Hyperparams::default()
        };
        let model = gbtree::train(&m, &y, &hp).unwrap();
        let phis = tree_shap_batch(&model, &m).unwrap();
        let labels = vec!["all".to_string(); n];
        let summary =
            category_summary(&phis, "x", &["x".to_string()], &labels, None).unwrap();
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].n, n);
        assert!(summary[0].mean_phi.unwrap().abs() < 1e-9);
    }

    #[test]
    fn category_summary_stump_classes_and_empty_class() {
        let model = stump_model();
        let nm = names(2);
        let values = vec![0.0, 0.0, 1.0, 0.0, 0.3, 0.0];
        let m = FeatureMatrix::from_rows(values, 2, nm.clone(), nm, vec![None, None]);
        let phis = tree_shap_batch(&model, &m).unwrap();
        let labels: Vec<String> = (0..3)
            .map(|i| {
                if m.get(i, 0) < 0.5 {
                    "low".to_string()
                } else {
                    "high".to_string()
                }
            })
            .collect();
        let classes = vec!["low".to_string(), "high".to_string(), "ghost".to_string()];
        let summary = category_summary(
            &phis,
            "f0",
            &["f0".to_string(), "f1".to_string()],
            &labels,
            Some(&classes),
        )
        .unwrap();
        assert_eq!(summary[0].n, 2);
        assert!((summary[0].mean_phi.unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(summary[1].n, 1);
        assert!((summary[1].mean_phi.unwrap() - (-1.0)).abs() < 1e-12);
        assert_eq!(summary[2].n, 0);
        assert_eq!(summary[2].mean_phi, None);
    }

    #[test]
    fn cover_validation_and_feature_mismatch() {
        let mut model = stump_model();
        assert!(matches!(
            tree_shap(&model, &[0.0]),
            Err(ShapError::FeatureMismatch { .. })
        ));
        if let TreeNode::Internal { left, .. } = &mut model.trees[0] {
            **left = TreeNode::Leaf {
                value: 2.0,
                cover: 0,
            };
        }
        assert!(matches!(
            tree_shap(&model, &[0.0, 0.0]),
            Err(ShapError::MissingCovers)
        ));
    }

    #[test]
    fn brute_force_feature_cap() {
        let model = Ensemble::constant(0.0, names(16));
        assert!(matches!(
            brute_force_shap(&model, &vec![0.0; 16]),
            Err(ShapError::TooManyFeatures(16))
        ));
    }
}
