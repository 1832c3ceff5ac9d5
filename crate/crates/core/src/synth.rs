//! Synthetic randomized-trial generator with known ground truth.
//!
//! Produces a school-clustered dataset with a configurable control-condition
//! drift surface, a planted conditional treatment effect, outcome noise,
//! clamping to the 0-4 outcome scale, and MCAR missingness, so every
//! pipeline property is verifiable without restricted study data.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::stats;
use crate::tabular::{
    write_csv, Cell, ColumnKind, ColumnRole, ColumnSpec, Dataset, Schema, CONTROL, TREATMENT,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("predictions length {0} does not match treated row count {1}")]
    LengthMismatch(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tabular(#[from] crate::tabular::TabularError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Closed expression language over numeric features: constants, feature
/// references, +, -, *, and a two-level threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    Feature(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// `lo` when the feature value is below `cut`, otherwise `hi`.
    Threshold {
        feature: String,
        cut: f64,
        lo: f64,
        hi: f64,
    },
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn feature(name: &str) -> Expr {
        Expr::Feature(name.to_string())
    }

    pub fn threshold(feature: &str, cut: f64, lo: f64, hi: f64) -> Expr {
        Expr::Threshold {
            feature: feature.to_string(),
            cut,
            lo,
            hi,
        }
    }

    pub fn plus(self, rhs: Expr) -> Expr {
        Expr::Add(Box::new(self), Box::new(rhs))
    }

    pub fn minus(self, rhs: Expr) -> Expr {
        Expr::Sub(Box::new(self), Box::new(rhs))
    }

    pub fn times(self, rhs: Expr) -> Expr {
        Expr::Mul(Box::new(self), Box::new(rhs))
    }

    fn references(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Feature(f) | Expr::Threshold { feature: f, .. } => {
                out.insert(f.clone());
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.references(out);
                b.references(out);
            }
        }
    }

    fn eval(&self, lookup: &dyn Fn(&str) -> f64) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Feature(f) => lookup(f),
            Expr::Add(a, b) => a.eval(lookup) + b.eval(lookup),
            Expr::Sub(a, b) => a.eval(lookup) - b.eval(lookup),
            Expr::Mul(a, b) => a.eval(lookup) * b.eval(lookup),
            Expr::Threshold {
                feature,
                cut,
                lo,
                hi,
            } => {
                if lookup(feature) < *cut {
                    *lo
                } else {
                    *hi
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Normal { mean: f64, sd: f64 },
    /// Uniform over lo..=hi.
    UniformInt { lo: i64, hi: i64 },
    Categorical { labels: Vec<String>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGen {
    pub name: String,
    pub kind: ColumnKind,
    pub generator: Generator,
    /// Overrides the config-level missing rate for this feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_rate: Option<f64>,
}

fn default_school_drift_sd() -> f64 {
    0.1
}
fn default_pre_mean() -> f64 {
    2.5
}
fn default_pre_sd() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_schools: usize,
    pub features: Vec<FeatureGen>,
    /// Expected control-condition outcome change as a function of features.
    pub drift: Expr,
    /// True conditional treatment effect as a function of features.
    pub effect: Expr,
    pub noise_sd: f64,
    #[serde(default)]
    pub missing_rate: f64,
    pub treatment_fraction: f64,
    pub seed: u64,
    /// SD of the per-school shift added to the drift.
    #[serde(default = "default_school_drift_sd")]
    pub school_drift_sd: f64,
    #[serde(default = "default_pre_mean")]
    pub pre_mean: f64,
    #[serde(default = "default_pre_sd")]
    pub pre_sd: f64,
}

const RESERVED_COLUMNS: [&str; 5] = ["school", "condition", "student_id", "gpa_pre", "gpa_post"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.n_schools < 2 {
            return bad("n_schools must be >= 2".into());
        }
        if self.n_students < self.n_schools {
            return bad("n_students must be >= n_schools".into());
        }
        if !(0.0..=1.0).contains(&self.treatment_fraction) {
            return bad("treatment_fraction must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("missing_rate must be in [0, 1]".into());
        }
        if self.noise_sd < 0.0 || self.school_drift_sd < 0.0 || self.pre_sd < 0.0 {
            return bad("standard deviations must be >= 0".into());
        }
        let mut names = BTreeSet::new();
        for f in &self.features {
            if RESERVED_COLUMNS.contains(&f.name.as_str()) {
                return bad(format!("feature name {:?} is reserved", f.name));
            }
            if !names.insert(f.name.clone()) {
                return bad(format!("duplicate feature name {:?}", f.name));
            }
            if let Some(rate) = f.missing_rate {
                if !(0.0..=1.0).contains(&rate) {
                    return bad(format!("missing_rate for {:?} must be in [0, 1]", f.name));
                }
            }
            match (&f.kind, &f.generator) {
                (ColumnKind::Categorical, Generator::Categorical { labels, probs }) => {
                    if labels.is_empty() || labels.len() != probs.len() {
                        return bad(format!("{:?}: labels and probs must align", f.name));
                    }
                    let total: f64 = probs.iter().sum();
                    if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
                        return bad(format!("{:?}: probs must be >= 0 and sum to 1", f.name));
                    }
                }
                (ColumnKind::Categorical, _) => {
                    return bad(format!("{:?}: categorical feature needs labels", f.name));
                }
                (_, Generator::Categorical { .. }) => {
                    return bad(format!("{:?}: numeric feature cannot be categorical", f.name));
                }
                (_, Generator::Normal { sd, .. }) => {
                    if *sd < 0.0 {
                        return bad(format!("{:?}: sd must be >= 0", f.name));
                    }
                }
                (_, Generator::UniformInt { lo, hi }) => {
                    if lo > hi {
                        return bad(format!("{:?}: lo must be <= hi", f.name));
                    }
                }
            }
        }
        for (label, expr) in [("drift", &self.drift), ("effect", &self.effect)] {
            let mut refs = BTreeSet::new();
            expr.references(&mut refs);
            for r in refs {
                match self.features.iter().find(|f| f.name == r) {
                    None => return bad(format!("{label} references unknown feature {r:?}")),
                    Some(f) if f.kind == ColumnKind::Categorical => {
                        return bad(format!("{label} references categorical feature {r:?}"));
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(json)
            .map_err(|e| SynthError::BadConfig(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Per-row generation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub school: String,
    pub treated: bool,
    pub true_drift: f64,
    pub true_cate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: Vec<GroundTruthRow>,
}

impl GroundTruth {
    /// True effects of the treated rows, in dataset row order.
    pub fn treated_cates(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.treated)
            .map(|r| r.true_cate)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("row_id,school,condition,true_drift,true_cate\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                r.school,
                if r.treated { TREATMENT } else { CONTROL },
                r.true_drift,
                r.true_cate
            ));
        }
        std::fs::write(path, out)
    }
}

fn clamp_outcome(v: f64) -> f64 {
    v.clamp(0.0, 4.0)
}

/// Generate one synthetic trial. Byte-identical output for equal configs.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_students;
    let school_width = (cfg.n_schools as f64).log10().ceil().max(2.0) as usize;

    // Round-robin school assignment keeps sizes near-uniform.
    let schools: Vec<String> = (0..n)
        .map(|i| format!("school_{:0school_width$}", i % cfg.n_schools))
        .collect();
    let mut shift_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "school-shift", 0));
    let shift_dist = Normal::new(0.0, cfg.school_drift_sd).expect("valid sd");
    let school_shift: Vec<f64> = (0..cfg.n_schools).map(|_| shift_dist.sample(&mut shift_rng)).collect();

    let mut cond_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "condition", 0));
    let treated: Vec<bool> = (0..n)
        .map(|_| cond_rng.random_range(0.0..1.0) < cfg.treatment_fraction)
        .collect();

    // True feature values, pre-missingness; numeric features also kept as
    // f64 for expression evaluation.
    let mut feature_cells: Vec<Vec<Cell>> = Vec::with_capacity(cfg.features.len());
    let mut numeric_values: Vec<Option<Vec<f64>>> = Vec::with_capacity(cfg.features.len());
    for (f_idx, fg) in cfg.features.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "feature", f_idx as u64));
        match &fg.generator {
            Generator::Normal { mean, sd } => {
                let dist = Normal::new(*mean, *sd).expect("valid sd");
                let vals: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                feature_cells.push(vals.iter().map(|&v| Cell::Num(v)).collect());
                numeric_values.push(Some(vals));
            }
            Generator::UniformInt { lo, hi } => {
                let vals: Vec<f64> = (0..n).map(|_| rng.random_range(*lo..=*hi) as f64).collect();
                feature_cells.push(vals.iter().map(|&v| Cell::Num(v)).collect());
                numeric_values.push(Some(vals));
            }
            Generator::Categorical { labels, probs } => {
                let cells: Vec<Cell> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random_range(0.0..1.0);
                        let mut acc = 0.0;
                        let mut chosen = labels.len() - 1;
                        for (k, p) in probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                chosen = k;
                                break;
                            }
                        }
                        Cell::Cat(labels[chosen].clone())
                    })
                    .collect();
                feature_cells.push(cells);
                numeric_values.push(None);
            }
        }
    }

    let feature_index: std::collections::BTreeMap<&str, usize> = cfg
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i))
        .collect();

    let mut pre_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "pre-outcome", 0));
    let pre_dist = Normal::new(cfg.pre_mean, cfg.pre_sd).expect("valid sd");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "noise", 0));
    let noise_dist = Normal::new(0.0, cfg.noise_sd).expect("valid sd");

    let mut truth_rows = Vec::with_capacity(n);
    let mut pre_vals = Vec::with_capacity(n);
    let mut post_vals = Vec::with_capacity(n);
    for i in 0..n {
        let look = |name: &str| -> f64 {
            let idx = feature_index[name];
            numeric_values[idx].as_ref().expect("numeric reference")[i]
        };
        let true_drift = cfg.drift.eval(&look) + school_shift[i % cfg.n_schools];
        let true_cate = cfg.effect.eval(&look);
        let pre = clamp_outcome(pre_dist.sample(&mut pre_rng));
        let effect_term = if treated[i] { true_cate } else { 0.0 };
        let post = clamp_outcome(pre + true_drift + effect_term + noise_dist.sample(&mut noise_rng));
        pre_vals.push(pre);
        post_vals.push(post);
        truth_rows.push(GroundTruthRow {
            school: schools[i].clone(),
            treated: treated[i],
            true_drift,
            true_cate,
        });
    }

    // MCAR missingness per feature, independent of condition and outcome.
    for (f_idx, fg) in cfg.features.iter().enumerate() {
        let rate = fg.missing_rate.unwrap_or(cfg.missing_rate);
        if rate <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "missing", f_idx as u64));
        for cell in feature_cells[f_idx].iter_mut() {
            if rng.random_range(0.0..1.0) < rate {
                *cell = Cell::Missing;
            }
        }
    }

    let mut columns = vec![
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
            name: "student_id".into(),
            kind: ColumnKind::Categorical,
            role: ColumnRole::Id,
            categories: Vec::new(),
        },
    ];
    for fg in &cfg.features {
        let categories = match &fg.generator {
            Generator::Categorical { labels, .. } => labels.clone(),
            _ => Vec::new(),
        };
        columns.push(ColumnSpec {
            name: fg.name.clone(),
            kind: fg.kind,
            role: ColumnRole::Feature,
            categories,
        });
    }
    columns.push(ColumnSpec {
        name: "gpa_pre".into(),
        kind: ColumnKind::Continuous,
        role: ColumnRole::PreOutcome,
        categories: Vec::new(),
    });
    columns.push(ColumnSpec {
        name: "gpa_post".into(),
        kind: ColumnKind::Continuous,
        role: ColumnRole::PostOutcome,
        categories: Vec::new(),
    });
    let schema = Schema::new(columns)?;

    let id_width = (n as f64).log10().ceil().max(4.0) as usize;
    let mut cells = Vec::with_capacity(n * schema.columns().len());
    for i in 0..n {
        cells.push(Cell::Cat(schools[i].clone()));
        cells.push(Cell::Cat(
            if treated[i] { TREATMENT } else { CONTROL }.to_string(),
        ));
        cells.push(Cell::Cat(format!("s{:0id_width$}", i)));
        for fc in &feature_cells {
            cells.push(fc[i].clone());
        }
        cells.push(Cell::Num(pre_vals[i]));
        cells.push(Cell::Num(post_vals[i]));
    }
    let data = Dataset::new(schema, cells)?;
    Ok((data, GroundTruth { rows: truth_rows }))
}

/// Agreement between predicted effects and the planted truth on treated
/// rows. Pearson r is undefined (None) for constant predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEval {
    pub pearson_r: Option<f64>,
    pub rmse: f64,
}

pub fn oracle_eval(predicted_effects: &[f64], truth: &GroundTruth) -> Result<OracleEval> {
    let cates = truth.treated_cates();
    if predicted_effects.len() != cates.len() {
        return Err(SynthError::LengthMismatch(
            predicted_effects.len(),
            cates.len(),
        ));
    }
    let mse = predicted_effects
        .iter()
        .zip(&cates)
        .map(|(p, c)| (p - c) * (p - c))
        .sum::<f64>()
        / cates.len() as f64;
    Ok(OracleEval {
        pearson_r: stats::pearson(predicted_effects, &cates),
        rmse: mse.sqrt(),
    })
}

/// Write `data.csv`, `truth.csv`, and `schema.json` into `dir`.
pub fn write_outputs(data: &Dataset, truth: &GroundTruth, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(data, &dir.join("data.csv"))?;
    truth.write_csv(&dir.join("truth.csv"))?;
    std::fs::write(dir.join("schema.json"), data.schema().to_json())?;
    Ok(())
}

/// Shared test fixture: a small four-feature trial configuration.
#[cfg(test)]
pub(crate) fn test_base_config() -> SynthConfig {
    SynthConfig {
        n_students: 600,
        n_schools: 6,
        features: vec![
            FeatureGen {
                name: "x1".into(),
                kind: ColumnKind::Continuous,
                generator: Generator::Normal { mean: 0.0, sd: 1.0 },
                missing_rate: None,
            },
            FeatureGen {
                name: "x2".into(),
                kind: ColumnKind::Continuous,
                generator: Generator::Normal { mean: 0.0, sd: 1.0 },
                missing_rate: None,
            },
            FeatureGen {
                name: "blocked_navigation_count".into(),
                kind: ColumnKind::Ordinal,
                generator: Generator::UniformInt { lo: 0, hi: 8 },
                missing_rate: None,
            },
            FeatureGen {
                name: "race".into(),
                kind: ColumnKind::Categorical,
                generator: Generator::Categorical {
                    labels: vec!["a".into(), "b".into(), "c".into()],
                    probs: vec![0.5, 0.3, 0.2],
                },
                missing_rate: None,
            },
        ],
        drift: Expr::feature("x2").times(Expr::constant(0.1)),
        effect: Expr::constant(0.0),
        noise_sd: 0.0,
        missing_rate: 0.0,
        treatment_fraction: 0.5,
        seed: 1,
        school_drift_sd: 0.05,
        pre_mean: 2.5,
        pre_sd: 0.5,
    }
}
