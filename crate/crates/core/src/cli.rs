//! `fairpen` command line: `train`, `sweep`, `eval`, `synth`, `postprocess`.
//!
//! Exit codes: 0 success, 1 runtime failure (the message names the failing
//! stage), 2 usage error. All randomness comes from `--seed`; without it the
//! `FAIRPEN_SEED` environment variable is used, and failing that, 1.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, split_list, DataSchema, Standardization};
use crate::metrics;
use crate::penalty::PenaltyKind;
use crate::pipeline::{self, QGrid, SchemeConfig, WeightMode};
use crate::synth::{self, DEpsParams};
use crate::trainer::{self, ModelFile, ModelParams, TrainConfig};
use crate::Error;

pub const SEED_ENV: &str = "FAIRPEN_SEED";
pub const DEFAULT_SEED: u64 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "sweep.tsv";

#[derive(Debug, Parser)]
#[command(
    name = "fairpen",
    version,
    about = "Logistic regression with FPR/FNR-difference penalties"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit once with fixed hyperparameters and save the model.
    Train(TrainArgs),
    /// Run the split / cross-validate / sweep / select scheme.
    Sweep(SweepArgs),
    /// Evaluate a saved model on a CSV.
    Eval(EvalArgs),
    /// Sample the synthetic two-feature distribution as CSV.
    Synth(SynthArgs),
    /// Fit group-dependent random flips that equalize error rates.
    Postprocess(PostprocessArgs),
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// key = value schema file; individual flags override its entries.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub protected: Option<String>,
    #[arg(long)]
    pub positive_label: Option<String>,
    #[arg(long)]
    pub protected_one: Option<String>,
    /// Comma-separated categorical column names.
    #[arg(long)]
    pub categoricals: Option<String>,
    #[arg(long, action = ArgAction::Set)]
    pub include_protected: Option<bool>,
    /// Keep raw feature values instead of z-scoring them.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Avd,
    Sd,
}

impl From<KindArg> for PenaltyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Avd => PenaltyKind::Avd,
            KindArg::Sd => PenaltyKind::Sd,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightModeArg {
    Fp,
    Fn,
    Both,
}

impl From<WeightModeArg> for WeightMode {
    fn from(w: WeightModeArg) -> Self {
        match w {
            WeightModeArg::Fp => WeightMode::FpOnly,
            WeightModeArg::Fn => WeightMode::FnOnly,
            WeightModeArg::Both => WeightMode::Both,
        }
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` must be a finite value >= 0"))
    }
}

fn unit_open(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("`{s}` must lie in (0, 1)"))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long, default_value = "0", value_parser = non_negative)]
    pub c1: f64,
    #[arg(long, default_value = "0", value_parser = non_negative)]
    pub c2: f64,
    #[arg(long, default_value = "0", value_parser = non_negative)]
    pub q: f64,
    #[arg(long, value_enum, default_value = "sd")]
    pub kind: KindArg,
    /// Model JSON output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long, value_enum, default_value = "avd")]
    pub kind: KindArg,
    /// Comma-separated, ascending, starting at 0. Default: 0 and 16 values from 1 to 2000.
    #[arg(long, value_delimiter = ',', value_parser = non_negative)]
    pub c_grid: Option<Vec<f64>>,
    /// Comma-separated. Default: 8 values from 1e-4 n to n (n = training size).
    #[arg(long, value_delimiter = ',', value_parser = non_negative)]
    pub q_grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "both")]
    pub weight_mode: WeightModeArg,
    #[arg(long, default_value = "1", value_parser = non_negative)]
    pub d1: f64,
    #[arg(long, default_value = "1", value_parser = non_negative)]
    pub d2: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub folds: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long, default_value = "0.3", value_parser = unit_open)]
    pub test_fraction: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum concurrent fit tasks (default: all cores).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    #[arg(long)]
    pub stratify: bool,
    /// Output directory for report.json and sweep.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "0.1")]
    pub epsilon: f64,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0", value_parser = non_negative)]
    pub target: f64,
    #[arg(long, default_value = "0.01")]
    pub resolution: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Predictor JSON output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Usage,
    Load,
    Fit,
    Eval,
    Sweep,
    Synth,
    Postprocess,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Usage => "usage",
            Stage::Load => "load",
            Stage::Fit => "fit",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Synth => "synth",
            Stage::Postprocess => "postprocess",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        if self.stage == Stage::Usage {
            2
        } else {
            1
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T> StageExt<T> for crate::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|source| CliError { stage, source })
    }
}

/// Parses `std::env::args`, runs, and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Synth(a) => cmd_synth(a),
        Command::Postprocess(a) => cmd_postprocess(a, out),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError {
            stage: Stage::Usage,
            source: Error::invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn resolve_schema(a: &SchemaArgs) -> Result<DataSchema, CliError> {
    let usage = |m: &str| CliError {
        stage: Stage::Usage,
        source: Error::invalid(m),
    };
    let mut schema = match &a.schema {
        Some(path) => DataSchema::from_kv_file(path).stage(Stage::Load)?,
        None => DataSchema::new(
            a.label
                .as_deref()
                .ok_or_else(|| usage("--label is required (or --schema)"))?,
            a.protected
                .as_deref()
                .ok_or_else(|| usage("--protected is required (or --schema)"))?,
        ),
    };
    if let Some(v) = &a.label {
        schema.label_column = v.clone();
    }
    if let Some(v) = &a.protected {
        schema.protected_column = v.clone();
    }
    if let Some(v) = &a.positive_label {
        schema.positive_label = v.clone();
    }
    if let Some(v) = &a.protected_one {
        schema.protected_one = v.clone();
    }
    if let Some(v) = &a.categoricals {
        schema.categorical_columns = split_list(v);
    }
    if let Some(v) = a.include_protected {
        schema.include_protected_as_feature = v;
    }
    schema.validate().stage(Stage::Usage)?;
    Ok(schema)
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> crate::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn emit<T: Serialize>(out: &mut dyn std::io::Write, v: &T) -> Result<(), CliError> {
    let bytes = to_json(v).stage(Stage::Write)?;
    out.write_all(&bytes)
        .map_err(|e| Error::io("<stdout>", e))
        .stage(Stage::Write)
}

/// SHA-256 over the schema, one-hot levels and feature names.
pub fn schema_hash(schema: &DataSchema, encoding: &data::Encoding, feature_names: &[String]) -> String {
    let payload = serde_json::to_vec(&(schema, encoding, feature_names)).expect("serializable");
    hex::encode(Sha256::digest(&payload))
}

fn cmd_train(a: TrainArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let schema = resolve_schema(&a.schema)?;
    let loaded = data::load_csv(&a.schema.data, &schema).stage(Stage::Load)?;
    let ds = loaded.dataset;
    let standardization = if a.schema.no_standardize {
        Standardization::identity(ds.dim())
    } else {
        Standardization::fit(&ds)
    };
    let ds = standardization.apply(&ds).stage(Stage::Load)?;

    let cfg = TrainConfig::new(a.kind.into(), a.c1, a.c2, a.q);
    let fit = trainer::fit(&ds, &cfg, &ModelParams::zeros(ds.dim())).stage(Stage::Fit)?;
    if !fit.converged {
        eprintln!(
            "warning: solver stopped after {} iterations without meeting its tolerance",
            fit.iterations
        );
    }
    let summary = metrics::evaluate(&fit.params, &ds).stage(Stage::Eval)?;

    let feature_names = ds.meta().feature_names.clone();
    let model = ModelFile {
        theta: fit.params.theta,
        standardization,
        schema_hash: schema_hash(&schema, &loaded.encoding, &feature_names),
        schema,
        encoding: loaded.encoding,
        feature_names,
        config: cfg,
    };
    write_atomic(&a.out, &to_json(&model).stage(Stage::Write)?).stage(Stage::Write)?;
    emit(out, &summary)
}

fn load_model(path: &Path) -> crate::Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: ModelFile = serde_json::from_str(&text)?;
    if schema_hash(&model.schema, &model.encoding, &model.feature_names) != model.schema_hash {
        return Err(Error::invalid(format!("{}: schema hash mismatch", path.display())));
    }
    model.params().check_dim(model.feature_names.len())?;
    Ok(model)
}

fn load_for_model(model: &ModelFile, path: &Path) -> crate::Result<data::Dataset> {
    let loaded = data::load_csv_with_encoding(path, &model.schema, &model.encoding)?;
    if loaded.dataset.meta().feature_names != model.feature_names {
        return Err(Error::invalid("data columns do not match the model's features"));
    }
    model.standardization.apply(&loaded.dataset)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let model = load_model(&a.model).stage(Stage::Load)?;
    let ds = load_for_model(&model, &a.data).stage(Stage::Load)?;
    let summary = metrics::evaluate(&model.params(), &ds).stage(Stage::Eval)?;
    emit(out, &summary)
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed)?;
    let params = DEpsParams::new(a.epsilon, a.n, seed).stage(Stage::Usage)?;
    let ds = synth::sample_d_epsilon(&params).stage(Stage::Synth)?;
    let mut csv = String::from("A,X2,Y\n");
    for p in ds.points() {
        csv.push_str(&format!(
            "{},{},{}\n",
            u8::from(p.protected),
            p.features[1] as u8,
            u8::from(p.label)
        ));
    }
    write_atomic(&a.out, csv.as_bytes()).stage(Stage::Write)
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    mean_selected: &'a pipeline::MeanMetrics,
    selected_c: Vec<f64>,
    report_json: PathBuf,
    report_tsv: PathBuf,
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let schema = resolve_schema(&a.schema)?;
    let seed = resolve_seed(a.seed)?;
    let ds = data::load_csv(&a.schema.data, &schema).stage(Stage::Load)?.dataset;

    let cfg = SchemeConfig {
        d1: a.d1,
        d2: a.d2,
        c_grid: a.c_grid.unwrap_or_else(pipeline::default_c_grid),
        q_grid: a.q_grid.map_or_else(pipeline::default_q_grid, QGrid::Fixed),
        weight_mode: a.weight_mode.into(),
        kind: a.kind.into(),
        folds: a.folds as usize,
        repetitions: a.reps as usize,
        test_fraction: a.test_fraction,
        seed,
        standardize: !a.schema.no_standardize,
        stratify: a.stratify,
        solver: TrainConfig::default(),
    };
    cfg.validate().stage(Stage::Usage)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = a.jobs {
        pool = pool.num_threads(j as usize);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
        .stage(Stage::Sweep)?;
    let report = pool.install(|| pipeline::run_scheme(&ds, &cfg)).stage(Stage::Sweep)?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| Error::io(&a.out, e))
        .stage(Stage::Write)?;
    let json_path = a.out.join(REPORT_JSON);
    let tsv_path = a.out.join(REPORT_TSV);
    write_atomic(&json_path, &to_json(&report).stage(Stage::Write)?).stage(Stage::Write)?;
    write_atomic(&tsv_path, report.to_tsv().as_bytes()).stage(Stage::Write)?;

    emit(
        out,
        &SweepSummary {
            mean_selected: &report.mean_selected,
            selected_c: report.repetitions.iter().map(|r| r.selected_c).collect(),
            report_json: json_path,
            report_tsv: tsv_path,
        },
    )
}

fn cmd_postprocess(a: PostprocessArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.model).stage(Stage::Load)?;
    let ds = load_for_model(&model, &a.data).stage(Stage::Load)?;
    let predictor =
        pipeline::postprocess_equalize(&model.params(), &ds, a.target, a.resolution, seed).stage(Stage::Postprocess)?;
    let summary = predictor.expected_summary(&ds).stage(Stage::Eval)?;
    write_atomic(&a.out, &to_json(&predictor).stage(Stage::Write)?).stage(Stage::Write)?;
    emit(out, &summary)
}
