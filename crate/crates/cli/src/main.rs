//! Batch front end for the two-model analysis pipeline.
//!
//! Every subcommand reads its inputs, writes its outputs under `--out`, and
//! finishes with a `manifest.json` listing each written file with a content
//! checksum. All randomness flows from a single seed, so re-running a
//! subcommand with the same inputs reproduces byte-identical artifacts
//! (manifest timestamp aside).
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 internal invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use hetfx::gbtree::{Ensemble, TrainError};
use hetfx::shapley;
use hetfx::synth::{self, SynthConfig};
use hetfx::tabular::{self, Dataset, Schema, TabularError};
use hetfx::tuning;
use hetfx::twomodel::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "hetfx",
    version,
    about = "Two-model discovery of intervention-effect moderators"
)]
struct Cli {
    /// Cap on worker threads. Output identity does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConditionArg {
    Control,
    Treatment,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic randomized trial with known ground truth.
    Synth {
        /// Generator configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full two-model procedure and write report.json plus tables.
    Pipeline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline configuration (JSON); defaults to the published grid,
        /// 5 passes, 5 inner folds, 500 max trees.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run coordinate descent only and write the tuning trace.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Which rows to tune on.
        #[arg(long, value_enum, default_value = "control")]
        condition: ConditionArg,
    },
    /// Attribute a saved ensemble over a dataset.
    Shap {
        /// Saved ensemble (JSON, as written by `pipeline`).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy as a function of training-school count.
    Curve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training-school counts, e.g. 1,5,10,50.
        #[arg(long)]
        k: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "control")]
        condition: ConditionArg,
    },
    /// Split-sample stability of model-2 feature importance.
    Stability {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Overfit probe: training-set r versus held-out r without tuning.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "control")]
        condition: ConditionArg,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

fn classify_tabular(e: TabularError) -> CliError {
    match e {
        TabularError::InvalidSchema(_) | TabularError::SchemaJson(_) => {
            CliError::Usage(e.to_string())
        }
        TabularError::Io(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn classify_pipeline(e: PipelineError) -> CliError {
    match e {
        PipelineError::Tabular(t) => classify_tabular(t),
        PipelineError::TooFewGroups { .. }
        | PipelineError::OneCondition
        | PipelineError::DegenerateDesign
        | PipelineError::UndefinedCorrelation => CliError::Data(e.to_string()),
        PipelineError::Train(TrainError::BadHyperparams(_)) => CliError::Usage(e.to_string()),
        PipelineError::Tune(tuning::TuneError::TooFewGroups)
        | PipelineError::Tune(tuning::TuneError::BadK(_))
        | PipelineError::Tune(tuning::TuneError::EmptyAxis(_)) => CliError::Data(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "no such file: {}",
            path.display()
        )))
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    require_file(path)?;
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_schema(path: &Path) -> Result<Schema, CliError> {
    Schema::from_json(&read_file(path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path, schema: &Schema) -> Result<Dataset, CliError> {
    require_file(path)?;
    tabular::load_csv(path, schema).map_err(classify_tabular)
}

fn load_pipeline_config(
    path: Option<&Path>,
    seed: Option<u64>,
    schema_path: &Path,
) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_json(&read_file(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.schema_ref.is_none() {
        cfg.schema_ref = Some(schema_path.display().to_string());
    }
    Ok(cfg)
}

fn condition_subset(data: &Dataset, which: ConditionArg) -> Result<Dataset, CliError> {
    let (control, treatment) = data.split_by_condition();
    let rows = match which {
        ConditionArg::Control => control,
        ConditionArg::Treatment => treatment,
        ConditionArg::All => return Ok(data.clone()),
    };
    if rows.is_empty() {
        return Err(CliError::Data(
            "no rows in the requested condition".to_string(),
        ));
    }
    Ok(data.subset(&rows))
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_paths: Vec<String>,
    seed: u64,
    out_dir: String,
    generated_at_epoch_secs: u64,
    artifacts: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    command: &str,
    config_paths: &[&Path],
    seed: u64,
    out_dir: &Path,
    files: &[PathBuf],
) -> Result<(), CliError> {
    let mut artifacts = Vec::new();
    for f in files {
        let bytes = std::fs::read(f)
            .map_err(|e| CliError::Internal(format!("checksum {}: {e}", f.display())))?;
        let rel = f
            .strip_prefix(out_dir)
            .unwrap_or(f)
            .display()
            .to_string();
        artifacts.push(ManifestEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        command: command.to_string(),
        config_paths: config_paths.iter().map(|p| p.display().to_string()).collect(),
        seed,
        out_dir: out_dir.display().to_string(),
        generated_at_epoch_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json)
        .map_err(|e| CliError::Internal(format!("write manifest: {e}")))
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))
}

fn write_artifact(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Internal(format!("write {}: {e}", path.display())))
}

fn run_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = SynthConfig::from_json(&read_file(config)?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ensure_out_dir(out)?;
    let (data, truth) =
        synth::generate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    synth::write_outputs(&data, &truth, out)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let files = vec![
        out.join("data.csv"),
        out.join("truth.csv"),
        out.join("schema.json"),
    ];
    write_manifest("synth", &[config], cfg.seed, out, &files)
}

fn run_pipeline(
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let schema = load_schema(schema_path)?;
    let cfg = load_pipeline_config(config, seed, schema_path)?;
    let data = load_data(data_path, &schema)?;
    ensure_out_dir(out)?;
    let run = twomodel::run_pipeline(&data, &cfg).map_err(classify_pipeline)?;
    let files = twomodel::write_artifacts(&run, out).map_err(classify_pipeline)?;
    let mut config_paths: Vec<&Path> = vec![data_path, schema_path];
    if let Some(c) = config {
        config_paths.push(c);
    }
    write_manifest("pipeline", &config_paths, cfg.seed, out, &files)
}

fn run_tune(
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    condition: ConditionArg,
) -> Result<(), CliError> {
    let schema = load_schema(schema_path)?;
    let cfg = load_pipeline_config(config, seed, schema_path)?;
    let data = condition_subset(&load_data(data_path, &schema)?, condition)?;
    ensure_out_dir(out)?;

    let all: Vec<usize> = (0..data.n_rows()).collect();
    let plan = tabular::fit_impute(&data, &all).map_err(classify_tabular)?;
    let imputed = tabular::apply_impute(&data, &plan).map_err(classify_tabular)?;
    let matrix = tabular::encode_matrix(&imputed).map_err(classify_tabular)?;
    let targets = tabular::outcome_change(&data).map_err(classify_tabular)?;
    let groups = data.group_ids();

    let (mut hp, trace) = tuning::coordinate_descent(
        &matrix,
        &targets,
        &groups,
        &cfg.grid,
        cfg.inner_folds,
        cfg.passes,
        cfg.seed,
    )
    .map_err(|e| classify_pipeline(e.into()))?;
    hp.n_trees = tuning::tune_tree_count(
        &matrix,
        &targets,
        &groups,
        &hp,
        cfg.max_trees,
        cfg.inner_folds,
        cfg.seed,
    )
    .map_err(|e| classify_pipeline(e.into()))?;

    let trace_path = out.join("tune_trace.csv");
    trace
        .write_csv(&trace_path)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let hp_path = out.join("tuned_hp.json");
    write_artifact(
        &hp_path,
        &serde_json::to_string_pretty(&hp).expect("hp serializes"),
    )?;
    let mut config_paths: Vec<&Path> = vec![data_path, schema_path];
    if let Some(c) = config {
        config_paths.push(c);
    }
    write_manifest("tune", &config_paths, cfg.seed, out, &[trace_path, hp_path])
}

fn run_shap(
    model_path: &Path,
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let schema = load_schema(schema_path)?;
    let data = load_data(data_path, &schema)?;
    let model = Ensemble::from_json(&read_file(model_path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", model_path.display())))?;
    ensure_out_dir(out)?;

    let all: Vec<usize> = (0..data.n_rows()).collect();
    let plan = tabular::fit_impute(&data, &all).map_err(classify_tabular)?;
    let imputed = tabular::apply_impute(&data, &plan).map_err(classify_tabular)?;
    let matrix = tabular::encode_matrix(&imputed).map_err(classify_tabular)?;
    let phis = shapley::tree_shap_batch(&model, &matrix)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let rows_path = out.join("shapley_rows.csv");
    shapley::write_shapley_csv(&phis, matrix.origin(), &rows_path)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let table = shapley::importance_table(&phis, matrix.origin())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let imp_path = out.join("importance.csv");
    table
        .write_csv(&imp_path)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_manifest(
        "shap",
        &[model_path, data_path, schema_path],
        0,
        out,
        &[rows_path, imp_path],
    )
}

fn run_curve(
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
    k_spec: &str,
    repeats: usize,
    config: Option<&Path>,
    seed: Option<u64>,
    condition: ConditionArg,
) -> Result<(), CliError> {
    let k_values: Vec<usize> = k_spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad k value {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    let schema = load_schema(schema_path)?;
    let cfg = load_pipeline_config(config, seed, schema_path)?;
    let data = condition_subset(&load_data(data_path, &schema)?, condition)?;
    ensure_out_dir(out)?;

    let points =
        twomodel::learning_curve(&data, &cfg, &k_values, repeats).map_err(classify_pipeline)?;
    let mut csv = String::from("k,mean_r\n");
    for p in &points {
        csv.push_str(&format!("{},{}\n", p.k, p.mean_r));
    }
    let curve_path = out.join("curve.csv");
    write_artifact(&curve_path, &csv)?;
    let detail_path = out.join("curve_detail.json");
    write_artifact(
        &detail_path,
        &serde_json::to_string_pretty(&points).expect("points serialize"),
    )?;
    let mut config_paths: Vec<&Path> = vec![data_path, schema_path];
    if let Some(c) = config {
        config_paths.push(c);
    }
    write_manifest("curve", &config_paths, cfg.seed, out, &[curve_path, detail_path])
}

fn run_stability(
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let schema = load_schema(schema_path)?;
    let cfg = load_pipeline_config(config, seed, schema_path)?;
    let data = load_data(data_path, &schema)?;
    ensure_out_dir(out)?;

    let (_, treated_rows) = data.split_by_condition();
    if treated_rows.is_empty() {
        return Err(CliError::Data("no treated rows".to_string()));
    }
    let treated = data.subset(&treated_rows);
    let model1 = twomodel::fit_control_model(&data, &cfg).map_err(classify_pipeline)?;
    let labels =
        twomodel::counterfactual_residuals(&model1.ensemble, &treated, &model1.impute_plan)
            .map_err(classify_pipeline)?;
    let report =
        twomodel::split_sample_stability(&treated, &labels, &cfg).map_err(classify_pipeline)?;
    let path = out.join("stability.json");
    write_artifact(
        &path,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut config_paths: Vec<&Path> = vec![data_path, schema_path];
    if let Some(c) = config {
        config_paths.push(c);
    }
    write_manifest("stability", &config_paths, cfg.seed, out, &[path])
}

fn run_probe(
    data_path: &Path,
    schema_path: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    condition: ConditionArg,
) -> Result<(), CliError> {
    let schema = load_schema(schema_path)?;
    let cfg = load_pipeline_config(config, seed, schema_path)?;
    let data = condition_subset(&load_data(data_path, &schema)?, condition)?;
    ensure_out_dir(out)?;

    let report = twomodel::overfit_probe(&data, &cfg).map_err(classify_pipeline)?;
    let path = out.join("probe.json");
    write_artifact(
        &path,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut config_paths: Vec<&Path> = vec![data_path, schema_path];
    if let Some(c) = config {
        config_paths.push(c);
    }
    write_manifest("probe", &config_paths, cfg.seed, out, &[path])
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { config, out, seed } => run_synth(config, out, *seed),
        Command::Pipeline {
            data,
            schema,
            out,
            config,
            seed,
        } => run_pipeline(data, schema, out, config.as_deref(), *seed),
        Command::Tune {
            data,
            schema,
            out,
            config,
            seed,
            condition,
        } => run_tune(data, schema, out, config.as_deref(), *seed, *condition),
        Command::Shap {
            model,
            data,
            schema,
            out,
        } => run_shap(model, data, schema, out),
        Command::Curve {
            data,
            schema,
            out,
            k,
            repeats,
            config,
            seed,
            condition,
        } => run_curve(
            data,
            schema,
            out,
            k,
            *repeats,
            config.as_deref(),
            *seed,
            *condition,
        ),
        Command::Stability {
            data,
            schema,
            out,
            config,
            seed,
        } => run_stability(data, schema, out, config.as_deref(), *seed),
        Command::Probe {
            data,
            schema,
            out,
            config,
            seed,
            condition,
        } => run_probe(data, schema, out, config.as_deref(), *seed, *condition),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("hetfx: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hetfx: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
