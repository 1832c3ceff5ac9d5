//! Typed tabular study data: schema-validated CSV loading, mean/category
//! imputation, derived features, and one-hot encoding into a dense numeric
//! matrix.
//!
//! Every downstream module consumes the [`FeatureMatrix`] produced here; the
//! guarantees that matter are "no missing values" and "one-hot groups sum to
//! one per row".

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved category label substituted for missing categorical cells.
pub const MISSING_CATEGORY: &str = "__missing__";
/// Condition label for control rows.
pub const CONTROL: &str = "control";
/// Condition label for treated rows.
pub const TREATMENT: &str = "treatment";

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema json: {0}")]
    SchemaJson(#[from] serde_json::Error),
    #[error("column {0} missing from header")]
    MissingColumn(String),
    #[error("unexpected column {0} in header")]
    UnexpectedColumn(String),
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    ParseError {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column {column}: unknown category {value:?}")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column {column}: identifier cell may not be missing")]
    MissingIdentifier { row: usize, column: String },
    #[error("column {0} has no non-missing values to fit a mean")]
    AllMissing(String),
    #[error("imputation plan does not match dataset feature columns: {0}")]
    PlanMismatch(String),
    #[error("bad derive inputs: {0}")]
    BadInputs(String),
    #[error("row {0}: missing outcome value")]
    MissingOutcome(usize),
    #[error("row {row}, column {column}: missing feature cell (dataset not imputed)")]
    NotImputed { row: usize, column: String },
}

pub type Result<T> = std::result::Result<T, TabularError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Ordinal,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Group,
    Condition,
    PreOutcome,
    PostOutcome,
    Id,
}

/// One column of the study schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSpec {
    pub fn numeric(&self) -> bool {
        matches!(self.kind, ColumnKind::Continuous | ColumnKind::Ordinal)
    }
}

/// Validated column list. Exactly one group, condition, pre-outcome and
/// post-outcome column; unique names; categorical features declare their
/// categories up front.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let columns = Vec::<ColumnSpec>::deserialize(deserializer)?;
        Schema::new(columns).map_err(serde::de::Error::custom)
    }
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name.clone()) {
                return Err(TabularError::InvalidSchema(format!(
                    "duplicate column name {:?}",
                    c.name
                )));
            }
        }
        for role in [
            ColumnRole::Group,
            ColumnRole::Condition,
            ColumnRole::PreOutcome,
            ColumnRole::PostOutcome,
        ] {
            let n = columns.iter().filter(|c| c.role == role).count();
            if n != 1 {
                return Err(TabularError::InvalidSchema(format!(
                    "expected exactly one {role:?} column, found {n}"
                )));
            }
        }
        for c in &columns {
            match c.role {
                ColumnRole::PreOutcome | ColumnRole::PostOutcome => {
                    if c.kind != ColumnKind::Continuous {
                        return Err(TabularError::InvalidSchema(format!(
                            "outcome column {:?} must be continuous",
                            c.name
                        )));
                    }
                }
                ColumnRole::Condition => {
                    if !c.categories.is_empty()
                        && c.categories != [CONTROL.to_string(), TREATMENT.to_string()]
                    {
                        return Err(TabularError::InvalidSchema(format!(
                            "condition column {:?} categories must be [{CONTROL}, {TREATMENT}]",
                            c.name
                        )));
                    }
                }
                ColumnRole::Feature
                    if c.kind == ColumnKind::Categorical && c.categories.is_empty() =>
                {
                    return Err(TabularError::InvalidSchema(format!(
                        "categorical feature {:?} declares no categories",
                        c.name
                    )));
                }
                _ => {}
            }
            let mut seen = BTreeSet::new();
            for cat in &c.categories {
                if !seen.insert(cat) {
                    return Err(TabularError::InvalidSchema(format!(
                        "column {:?} lists category {:?} twice",
                        c.name, cat
                    )));
                }
                if cat == MISSING_CATEGORY && c.role == ColumnRole::Feature {
                    return Err(TabularError::InvalidSchema(format!(
                        "column {:?} declares the reserved category {MISSING_CATEGORY:?}",
                        c.name
                    )));
                }
            }
            if c.numeric() && !c.categories.is_empty() {
                return Err(TabularError::InvalidSchema(format!(
                    "numeric column {:?} must not declare categories",
                    c.name
                )));
            }
        }
        Ok(Schema { columns })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, index: usize) -> &ColumnSpec {
        &self.columns[index]
    }

    fn role_index(&self, role: ColumnRole) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == role)
            .expect("validated schema has the role")
    }

    /// Indices of feature columns in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::Feature)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A single cell: numeric value, category label, or explicit missing marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }
}

/// Typed row-major table tied to a [`Schema`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    cells: Vec<Cell>,
    n_rows: usize,
}

/// CSV parsing options.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    /// Cell text treated as missing, in addition to the empty string.
    pub missing_sentinel: String,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            missing_sentinel: "NA".to_string(),
        }
    }
}

impl Dataset {
    pub fn new(schema: Schema, cells: Vec<Cell>) -> Result<Self> {
        let w = schema.columns().len();
        if w == 0 || !cells.len().is_multiple_of(w) {
            return Err(TabularError::InvalidSchema(
                "cell count is not a multiple of the column count".into(),
            ));
        }
        let n_rows = cells.len() / w;
        Ok(Dataset {
            schema,
            cells,
            n_rows,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.schema.columns().len() + col]
    }

    fn cell_mut(&mut self, row: usize, col: usize) -> &mut Cell {
        &mut self.cells[row * self.schema.columns().len() + col]
    }

    /// Group identifier per row.
    pub fn group_ids(&self) -> Vec<String> {
        let g = self.schema.role_index(ColumnRole::Group);
        (0..self.n_rows)
            .map(|r| match self.cell(r, g) {
                Cell::Cat(s) => s.clone(),
                Cell::Num(v) => format!("{v}"),
                Cell::Missing => unreachable!("group cells are non-missing by construction"),
            })
            .collect()
    }

    /// Treatment flag per row.
    pub fn treated(&self) -> Vec<bool> {
        let c = self.schema.role_index(ColumnRole::Condition);
        (0..self.n_rows)
            .map(|r| matches!(self.cell(r, c), Cell::Cat(s) if s == TREATMENT))
            .collect()
    }

    /// New dataset containing only the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let w = self.schema.columns().len();
        let mut cells = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            cells.extend_from_slice(&self.cells[r * w..(r + 1) * w]);
        }
        Dataset {
            schema: self.schema.clone(),
            cells,
            n_rows: rows.len(),
        }
    }

    /// Rows in the control / treatment condition respectively.
    pub fn split_by_condition(&self) -> (Vec<usize>, Vec<usize>) {
        let treated = self.treated();
        let mut control = Vec::new();
        let mut treatment = Vec::new();
        for (i, t) in treated.iter().enumerate() {
            if *t {
                treatment.push(i);
            } else {
                control.push(i);
            }
        }
        (control, treatment)
    }
}

/// Parse a CSV file against `schema` with default options (sentinel "NA").
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    load_csv_opts(path, schema, &CsvOptions::default())
}

/// Parse a CSV file against `schema`.
///
/// The header must contain exactly the schema's column names in any order.
/// Empty cells and the missing sentinel parse as [`Cell::Missing`]. Row
/// numbers in errors are 1-based over data rows.
pub fn load_csv_opts(path: &Path, schema: &Schema, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let header_names: Vec<&str> = header.iter().collect();
    for c in schema.columns() {
        if !header_names.contains(&c.name.as_str()) {
            return Err(TabularError::MissingColumn(c.name.clone()));
        }
    }
    for h in &header_names {
        if schema.index_of(h).is_none() {
            return Err(TabularError::UnexpectedColumn(h.to_string()));
        }
    }
    // Map schema column index -> header position.
    let positions: Vec<usize> = schema
        .columns()
        .iter()
        .map(|c| header_names.iter().position(|h| *h == c.name).unwrap())
        .collect();

    let mut cells = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        for (col_idx, spec) in schema.columns().iter().enumerate() {
            let raw = record.get(positions[col_idx]).unwrap_or("");
            cells.push(parse_cell(raw, spec, row, opts)?);
        }
    }
    Dataset::new(schema.clone(), cells)
}

fn parse_cell(raw: &str, spec: &ColumnSpec, row: usize, opts: &CsvOptions) -> Result<Cell> {
    let text = raw.trim();
    if text.is_empty() || text == opts.missing_sentinel {
        return match spec.role {
            ColumnRole::Group | ColumnRole::Condition => Err(TabularError::MissingIdentifier {
                row,
                column: spec.name.clone(),
            }),
            _ => Ok(Cell::Missing),
        };
    }
    match spec.role {
        ColumnRole::Group | ColumnRole::Id => Ok(Cell::Cat(text.to_string())),
        ColumnRole::Condition => {
            if text == CONTROL || text == TREATMENT {
                Ok(Cell::Cat(text.to_string()))
            } else {
                Err(TabularError::UnknownCategory {
                    row,
                    column: spec.name.clone(),
                    value: text.to_string(),
                })
            }
        }
        ColumnRole::PreOutcome | ColumnRole::PostOutcome => parse_number(text, spec, row),
        ColumnRole::Feature => match spec.kind {
            ColumnKind::Continuous | ColumnKind::Ordinal => parse_number(text, spec, row),
            ColumnKind::Categorical => {
                if spec.categories.iter().any(|c| c == text) {
                    Ok(Cell::Cat(text.to_string()))
                } else {
                    Err(TabularError::UnknownCategory {
                        row,
                        column: spec.name.clone(),
                        value: text.to_string(),
                    })
                }
            }
        },
    }
}

fn parse_number(text: &str, spec: &ColumnSpec, row: usize) -> Result<Cell> {
    text.parse::<f64>()
        .map(Cell::Num)
        .map_err(|_| TabularError::ParseError {
            row,
            column: spec.name.clone(),
            value: text.to_string(),
        })
}

/// Write a dataset back to CSV, rendering missing cells as the sentinel.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    write_csv_opts(data, path, &CsvOptions::default())
}

pub fn write_csv_opts(data: &Dataset, path: &Path, opts: &CsvOptions) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(data.schema.columns().iter().map(|c| c.name.as_str()))?;
    for r in 0..data.n_rows() {
        let record: Vec<String> = (0..data.schema.columns().len())
            .map(|c| match data.cell(r, c) {
                Cell::Num(v) => format!("{v}"),
                Cell::Cat(s) => s.clone(),
                Cell::Missing => opts.missing_sentinel.clone(),
            })
            .collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-column imputation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImputeRule {
    /// Replace missing numeric cells with the fitted mean.
    Mean(f64),
    /// Replace missing categorical cells with [`MISSING_CATEGORY`].
    MissingCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeEntry {
    pub column: String,
    pub rule: ImputeRule,
    /// Non-missing fit-row values the rule was fitted on.
    pub fit_rows: usize,
}

/// Imputation rules for every feature column, fitted on a row subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputePlan {
    pub entries: Vec<ImputeEntry>,
}

impl ImputePlan {
    pub fn rule_for(&self, column: &str) -> Option<&ImputeRule> {
        self.entries
            .iter()
            .find(|e| e.column == column)
            .map(|e| &e.rule)
    }
}

/// Fit an [`ImputePlan`] on `fit_rows` only: numeric features record the mean
/// of their non-missing fit-row values, categorical features record the
/// missing-category rule. Held-out rows are never read.
pub fn fit_impute(data: &Dataset, fit_rows: &[usize]) -> Result<ImputePlan> {
    assert!(!fit_rows.is_empty(), "fit_rows must be non-empty");
    let mut entries = Vec::new();
    for idx in data.schema().feature_indices() {
        let spec = data.schema().column(idx);
        let entry = if spec.numeric() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for &r in fit_rows {
                if let Cell::Num(v) = data.cell(r, idx) {
                    sum += v;
                    n += 1;
                }
            }
            if n == 0 {
                return Err(TabularError::AllMissing(spec.name.clone()));
            }
            ImputeEntry {
                column: spec.name.clone(),
                rule: ImputeRule::Mean(sum / n as f64),
                fit_rows: n,
            }
        } else {
            let n = fit_rows
                .iter()
                .filter(|&&r| !data.cell(r, idx).is_missing())
                .count();
            ImputeEntry {
                column: spec.name.clone(),
                rule: ImputeRule::MissingCategory,
                fit_rows: n,
            }
        };
        entries.push(entry);
    }
    Ok(ImputePlan { entries })
}

/// Apply an [`ImputePlan`]: after this no feature cell is missing. The
/// missing-category label is appended to every categorical column covered by
/// a missing-category rule, if absent. Applying the same plan twice is a
/// no-op the second time.
pub fn apply_impute(data: &Dataset, plan: &ImputePlan) -> Result<Dataset> {
    let feature_names: BTreeSet<&str> = data
        .schema()
        .feature_indices()
        .into_iter()
        .map(|i| data.schema().column(i).name.as_str())
        .collect();
    let plan_names: BTreeSet<&str> = plan.entries.iter().map(|e| e.column.as_str()).collect();
    if feature_names != plan_names {
        let missing: Vec<&&str> = feature_names.difference(&plan_names).collect();
        let extra: Vec<&&str> = plan_names.difference(&feature_names).collect();
        return Err(TabularError::PlanMismatch(format!(
            "uncovered columns {missing:?}, unknown columns {extra:?}"
        )));
    }

    let mut out = data.clone();
    for idx in data.schema().feature_indices() {
        let spec = data.schema().column(idx).clone();
        let rule = plan.rule_for(&spec.name).expect("checked above").clone();
        match rule {
            ImputeRule::Mean(m) => {
                if !spec.numeric() {
                    return Err(TabularError::PlanMismatch(format!(
                        "mean rule for categorical column {:?}",
                        spec.name
                    )));
                }
                for r in 0..out.n_rows() {
                    if out.cell(r, idx).is_missing() {
                        *out.cell_mut(r, idx) = Cell::Num(m);
                    }
                }
            }
            ImputeRule::MissingCategory => {
                if spec.numeric() {
                    return Err(TabularError::PlanMismatch(format!(
                        "missing-category rule for numeric column {:?}",
                        spec.name
                    )));
                }
                for r in 0..out.n_rows() {
                    if out.cell(r, idx).is_missing() {
                        *out.cell_mut(r, idx) = Cell::Cat(MISSING_CATEGORY.to_string());
                    }
                }
                // Always reserve the label so the encoded shape is a
                // function of the plan alone, not of which rows happened
                // to have missing cells.
                let has_label = out.schema.columns[idx]
                    .categories
                    .iter()
                    .any(|c| c == MISSING_CATEGORY);
                if !has_label {
                    out.schema.columns[idx]
                        .categories
                        .push(MISSING_CATEGORY.to_string());
                }
            }
        }
    }
    Ok(out)
}

/// How to combine input columns in [`derive_feature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveMode {
    /// Row-wise mean of the non-missing inputs (missing only if all are).
    MeanOf,
    /// First minus second (missing if either is).
    DifferenceOf,
}

/// Replace `inputs` with one derived continuous feature named `output`.
pub fn derive_feature(
    data: &Dataset,
    mode: DeriveMode,
    inputs: &[&str],
    output: &str,
) -> Result<Dataset> {
    let mut input_idx = Vec::new();
    for name in inputs {
        let idx = data
            .schema()
            .index_of(name)
            .ok_or_else(|| TabularError::BadInputs(format!("no column named {name:?}")))?;
        let spec = data.schema().column(idx);
        if spec.role != ColumnRole::Feature || !spec.numeric() {
            return Err(TabularError::BadInputs(format!(
                "input {name:?} must be a numeric feature column"
            )));
        }
        input_idx.push(idx);
    }
    match mode {
        DeriveMode::MeanOf if input_idx.len() < 2 => {
            return Err(TabularError::BadInputs(
                "mean_of requires at least two inputs".into(),
            ));
        }
        DeriveMode::DifferenceOf if input_idx.len() != 2 => {
            return Err(TabularError::BadInputs(
                "difference_of requires exactly two inputs".into(),
            ));
        }
        _ => {}
    }
    if data.schema().index_of(output).is_some() && !inputs.contains(&output) {
        return Err(TabularError::BadInputs(format!(
            "output name {output:?} collides with an existing column"
        )));
    }

    let derived: Vec<Cell> = (0..data.n_rows())
        .map(|r| {
            let vals: Vec<Option<f64>> = input_idx.iter().map(|&i| data.cell(r, i).as_num()).collect();
            match mode {
                DeriveMode::MeanOf => {
                    let present: Vec<f64> = vals.iter().flatten().copied().collect();
                    if present.is_empty() {
                        Cell::Missing
                    } else {
                        Cell::Num(present.iter().sum::<f64>() / present.len() as f64)
                    }
                }
                DeriveMode::DifferenceOf => match (vals[0], vals[1]) {
                    (Some(a), Some(b)) => Cell::Num(a - b),
                    _ => Cell::Missing,
                },
            }
        })
        .collect();

    // Rebuild schema and cells without the input columns, derived column last.
    let keep: Vec<usize> = (0..data.schema().columns().len())
        .filter(|i| !input_idx.contains(i))
        .collect();
    let mut columns: Vec<ColumnSpec> = keep
        .iter()
        .map(|&i| data.schema().column(i).clone())
        .collect();
    columns.push(ColumnSpec {
        name: output.to_string(),
        kind: ColumnKind::Continuous,
        role: ColumnRole::Feature,
        categories: Vec::new(),
    });
    let schema = Schema::new(columns)?;
    let mut cells = Vec::with_capacity(data.n_rows() * schema.columns().len());
    for (r, d) in derived.iter().enumerate() {
        for &i in &keep {
            cells.push(data.cell(r, i).clone());
        }
        cells.push(d.clone());
    }
    Dataset::new(schema, cells)
}

/// Per-row outcome change: post minus pre, in outcome units.
pub fn outcome_change(data: &Dataset) -> Result<Vec<f64>> {
    let pre = data.schema().role_index(ColumnRole::PreOutcome);
    let post = data.schema().role_index(ColumnRole::PostOutcome);
    (0..data.n_rows())
        .map(|r| {
            match (data.cell(r, pre).as_num(), data.cell(r, post).as_num()) {
                (Some(a), Some(b)) => Ok(b - a),
                _ => Err(TabularError::MissingOutcome(r)),
            }
        })
        .collect()
}

/// Dense numeric design matrix with bookkeeping back to schema columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    feature_names: Vec<String>,
    origin: Vec<String>,
    category: Vec<Option<String>>,
}

impl FeatureMatrix {
    pub fn from_rows(
        values: Vec<f64>,
        n_cols: usize,
        feature_names: Vec<String>,
        origin: Vec<String>,
        category: Vec<Option<String>>,
    ) -> Self {
        assert_eq!(feature_names.len(), n_cols);
        assert_eq!(origin.len(), n_cols);
        assert_eq!(category.len(), n_cols);
        assert!(n_cols > 0 && values.len().is_multiple_of(n_cols));
        let n_rows = values.len() / n_cols;
        FeatureMatrix {
            values,
            n_rows,
            n_cols,
            feature_names,
            origin,
            category,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n_cols..(row + 1) * self.n_cols]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Source schema column per matrix column.
    pub fn origin(&self) -> &[String] {
        &self.origin
    }

    /// Category label per matrix column (one-hot columns only).
    pub fn category(&self) -> &[Option<String>] {
        &self.category
    }

    /// New matrix with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            values,
            n_rows: rows.len(),
            n_cols: self.n_cols,
            feature_names: self.feature_names.clone(),
            origin: self.origin.clone(),
            category: self.category.clone(),
        }
    }

    /// Distinct source features in first-appearance (schema) order.
    pub fn source_features(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for o in &self.origin {
            if seen.insert(o.clone()) {
                out.push(o.clone());
            }
        }
        out
    }

    /// Matrix columns belonging to a source feature.
    pub fn member_columns(&self, source: &str) -> Vec<usize> {
        (0..self.n_cols)
            .filter(|&c| self.origin[c] == source)
            .collect()
    }
}

/// Encode an imputed dataset into a [`FeatureMatrix`]: numeric features pass
/// through, categoricals expand to one indicator column per declared
/// category.
pub fn encode_matrix(data: &Dataset) -> Result<FeatureMatrix> {
    let feature_idx = data.schema().feature_indices();
    let mut feature_names = Vec::new();
    let mut origin = Vec::new();
    let mut category = Vec::new();
    for &idx in &feature_idx {
        let spec = data.schema().column(idx);
        if spec.numeric() {
            feature_names.push(spec.name.clone());
            origin.push(spec.name.clone());
            category.push(None);
        } else {
            for cat in &spec.categories {
                feature_names.push(format!("{}={}", spec.name, cat));
                origin.push(spec.name.clone());
                category.push(Some(cat.clone()));
            }
        }
    }
    let n_cols = feature_names.len();
    let mut values = Vec::with_capacity(data.n_rows() * n_cols);
    for r in 0..data.n_rows() {
        for &idx in &feature_idx {
            let spec = data.schema().column(idx);
            match data.cell(r, idx) {
                Cell::Num(v) if spec.numeric() => values.push(*v),
                Cell::Cat(label) if !spec.numeric() => {
                    for cat in &spec.categories {
                        values.push(if cat == label { 1.0 } else { 0.0 });
                    }
                }
                _ => {
                    return Err(TabularError::NotImputed {
                        row: r,
                        column: spec.name.clone(),
                    });
                }
            }
        }
    }
    Ok(FeatureMatrix::from_rows(
        values,
        n_cols,
        feature_names,
        origin,
        category,
    ))
}

/// Recover the displayed value of a source feature for one matrix row:
/// numeric features report their value, one-hot groups their active label.
pub fn source_value(matrix: &FeatureMatrix, row: usize, source: &str) -> Option<SourceValue> {
    let members = matrix.member_columns(source);
    match members.as_slice() {
        [] => None,
        [single] if matrix.category()[*single].is_none() => {
            Some(SourceValue::Num(matrix.get(row, *single)))
        }
        _ => members
            .iter()
            .find(|&&c| matrix.get(row, c) == 1.0)
            .and_then(|&c| matrix.category()[c].clone())
            .map(SourceValue::Cat),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceValue {
    Num(f64),
    Cat(String),
}

impl std::fmt::Display for SourceValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceValue::Num(v) => write!(f, "{v}"),
            SourceValue::Cat(s) => write!(f, "{s}"),
        }
    }
}

/// Group row indices by group id, preserving first-appearance group order.
pub fn rows_by_group(groups: &[String]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        map.entry(g.clone()).or_default().push(i);
    }
    map
}
