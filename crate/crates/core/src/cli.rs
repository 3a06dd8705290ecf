//! `multical` command line: argument parsing, orchestration, report files
//! and run manifests.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
//! convergence failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::categorical::{
    balance_correct, iterate_multical_categorical, multibalance_correct, quantile_bins, select_credibility,
    CalibrationConfig, CREDIBILITY_GRID,
};
use crate::continuous::{
    iterate_multical_continuous, local_balance_correct, mbc_bivariate_centered, select_credibility_continuous,
    ContinuousConfig,
};
use crate::data::{
    fmt_f64, load_csv, split, ColumnData, ColumnMapping, Grouping, Portfolio, PremiumVector, SensitiveColumn,
    SensitiveSpec, SplitTag,
};
use crate::error::{Error, Result};
use crate::glm::{fit_baseline, predict, GlmConfig};
use crate::metrics::{diagnose, quantile_grouping};
use crate::model::{ModelBody, ModelFile, SplitConfig, FORMAT_VERSION};
use crate::smoothing::Degree;
use crate::synth::{distorted_baseline, generate, Distortion, GroupKind, SynthConfig, TRUE_MU_COLUMN};

#[derive(Debug, Parser, Serialize)]
#[command(name = "multical", version, about = "Balance and multibalance corrections for insurance premiums")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Fit a Poisson GLM baseline on the training fold.
    FitBaseline(FitBaselineArgs),
    /// Fit a calibration correction on the training fold and write premiums for every record.
    Calibrate(CalibrateArgs),
    /// Replay a fitted model on a portfolio.
    Apply(ApplyArgs),
    /// Deviance, Gini, multicalibration error and balance gap of a premium column.
    Evaluate(EvaluateArgs),
    /// Residual bias table per (premium bin, group).
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic portfolio with a known true mean.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Portfolio CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "IDpol")]
    pub id_col: String,
    #[arg(long, default_value = "ClaimNb")]
    pub claims_col: String,
    #[arg(long, default_value = "Exposure")]
    pub exposure_col: String,
    /// Columns read as categorical even when numeric.
    #[arg(long, value_delimiter = ',')]
    pub force_categorical: Vec<String>,
    /// Upper cap on claim counts.
    #[arg(long)]
    pub cap_claims: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitiveKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Args, Serialize)]
pub struct SensitiveArgs {
    /// Column holding the sensitive feature.
    #[arg(long)]
    pub sensitive: Option<String>,
    #[arg(long, value_enum, default_value = "categorical")]
    pub sensitive_kind: SensitiveKind,
    /// Cut a numeric sensitive column into right-closed bins at these edges.
    #[arg(long, value_delimiter = ',')]
    pub sensitive_bins: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_fractions)]
    pub split: [f64; 3],
    /// Seed for every random choice of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct FitBaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sensitive: SensitiveArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Rating features; numeric ones are binned at exposure-weighted quantiles.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub feature_bins: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Model JSON.
    #[arg(long)]
    pub output: PathBuf,
    /// Optional premiums CSV with the GLM predictions for every record.
    #[arg(long)]
    pub premiums_out: Option<PathBuf>,
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Bc,
    Mbc,
    AutoIter,
    MultiIter,
    LocalBc,
    LocalMbc,
    MultiIterCont,
}

impl Mode {
    fn needs_sensitive(self) -> bool {
        matches!(self, Mode::Mbc | Mode::MultiIter | Mode::LocalMbc | Mode::MultiIterCont)
    }

    fn continuous(self) -> bool {
        matches!(self, Mode::LocalBc | Mode::LocalMbc | Mode::MultiIterCont)
    }

    fn iterative(self) -> bool {
        matches!(self, Mode::AutoIter | Mode::MultiIter | Mode::MultiIterCont)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeArg {
    Constant,
    Linear,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sensitive: SensitiveArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Column holding the input premium.
    #[arg(long, conflicts_with = "baseline_model")]
    pub premium: Option<String>,
    /// Model JSON from `fit-baseline` whose predictions are the input premium.
    #[arg(long)]
    pub baseline_model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Premium bins K.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.2)]
    pub eta: f64,
    /// Credibility constant c in exposure-years, or `auto` to pick it on the validation fold.
    #[arg(long, default_value = "100")]
    pub credibility: String,
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// One update with bins frozen at the input premium.
    #[arg(long)]
    pub fixed_bins: bool,
    #[arg(long, default_value_t = 30)]
    pub min_group_size: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub premium_floor: f64,
    /// Nearest-neighbour fraction of the local smoother.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, value_enum)]
    pub degree: Option<DegreeArg>,
    /// Neighbours used for the local effective exposure.
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub grid_p: usize,
    #[arg(long, default_value_t = 64)]
    pub grid_s: usize,
    #[arg(long, default_value_t = 256)]
    pub grid_1d: usize,
    /// Model JSON.
    #[arg(long)]
    pub output: PathBuf,
    /// Premiums CSV: id, premium_in, premium_out, group, split.
    #[arg(long)]
    pub premiums_out: PathBuf,
    /// Exit 0 even when an iterative fit did not converge.
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Portfolio CSV with the columns named in the model.
    #[arg(long)]
    pub input: PathBuf,
    /// Premiums CSV: id, premium_in, premium_out, group, split.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKindArg {
    /// Continuous when every group value is numeric with more than 50 distinct values.
    Auto,
    Categorical,
    Continuous,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Premiums CSV written by `calibrate`, `apply` or `fit-baseline`.
    #[arg(long)]
    pub premiums: PathBuf,
    /// Premium column to assess.
    #[arg(long, default_value = "premium_out")]
    pub column: String,
    #[arg(long, value_enum, default_value = "test")]
    pub fold: FoldArg,
    /// Premium bins of the bias table.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "auto")]
    pub group_kind: GroupKindArg,
    /// Quantile groups for a continuous group column.
    #[arg(long, default_value_t = 10)]
    pub s_bins: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub report: ReportArgs,
    /// Metrics JSON.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub report: ReportArgs,
    /// Bias-table CSV.
    #[arg(long)]
    pub output: PathBuf,
    /// Optional full diagnostics JSON.
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    /// Model JSON whose convergence trace goes into the diagnostics JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strength of the sensitive effect in the log-mean.
    #[arg(long, default_value_t = 0.3)]
    pub beta_s: f64,
    /// `categorical:L` or `continuous`.
    #[arg(long, default_value = "categorical:4", value_parser = parse_group_kind)]
    pub group_kind: GroupKind,
    #[arg(long, default_value_t = -2.0)]
    pub intercept: f64,
    /// Effects of standard normal features x0, x1, ...
    #[arg(long, value_delimiter = ',', default_value = "0.3,-0.2")]
    pub numeric_effects: Vec<f64>,
    /// Per-level effects of categorical features c0, c1, ...; features separated by `;`.
    #[arg(long, default_value = "0,0.25,-0.25", value_parser = parse_categorical_effects)]
    pub categorical_effects: CategoricalEffects,
    /// Baseline distortion `a,b,dropS`: premium = a * mu^b with `a` = `auto` to balance.
    #[arg(long, default_value = "1,1,false", value_parser = parse_distortion)]
    pub distort: Distortion,
    /// Features whose terms the distorted baseline omits.
    #[arg(long, value_delimiter = ',')]
    pub drop_features: Vec<String>,
    /// Portfolio CSV with `premium` and `true_mu` columns.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoricalEffects(pub Vec<Vec<f64>>);

fn parse_fractions(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated fractions".to_string())
}

fn parse_group_kind(s: &str) -> std::result::Result<GroupKind, String> {
    match s.split_once(':') {
        None if s == "continuous" => Ok(GroupKind::Continuous),
        None if s == "categorical" => Ok(GroupKind::Categorical { levels: 4 }),
        Some(("categorical", l)) => l
            .parse()
            .map(|levels| GroupKind::Categorical { levels })
            .map_err(|e| format!("level count `{l}`: {e}")),
        _ => Err(format!("expected `categorical:L` or `continuous`, got `{s}`")),
    }
}

fn parse_categorical_effects(s: &str) -> std::result::Result<CategoricalEffects, String> {
    if s.trim().is_empty() {
        return Ok(CategoricalEffects(vec![]));
    }
    s.split(';')
        .map(|f| {
            f.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
                .collect()
        })
        .collect::<std::result::Result<_, _>>()
        .map(CategoricalEffects)
}

fn parse_distortion(s: &str) -> std::result::Result<Distortion, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err("expected `a,b,dropS`".into());
    }
    let scale = match parts[0] {
        "auto" => None,
        a => Some(a.parse::<f64>().map_err(|e| format!("scale `{a}`: {e}"))?),
    };
    let power = parts[1].parse::<f64>().map_err(|e| format!("power `{}`: {e}", parts[1]))?;
    let drop_s = match parts[2] {
        "true" | "1" | "dropS" | "drop-s" => true,
        "false" | "0" | "keepS" | "keep-s" => false,
        other => return Err(format!("dropS flag `{other}` is not a boolean")),
    };
    Ok(Distortion {
        scale,
        power,
        drop_s,
        drop_features: vec![],
    })
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::FitBaseline(a) => cmd_fit_baseline(cli, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Apply(a) => cmd_apply(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Diagnose(a) => cmd_diagnose(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
    }
}

fn mapping(data: &DataArgs, sensitive: Option<&SensitiveArgs>, premium: Option<&str>) -> Result<ColumnMapping> {
    let spec = match sensitive.and_then(|s| s.sensitive.as_ref().map(|c| (s, c))) {
        None => None,
        Some((s, column)) => Some(match (s.sensitive_kind, s.sensitive_bins.is_empty()) {
            (SensitiveKind::Categorical, true) => SensitiveSpec::Categorical(column.clone()),
            (SensitiveKind::Categorical, false) => SensitiveSpec::Binned {
                column: column.clone(),
                edges: s.sensitive_bins.clone(),
            },
            (SensitiveKind::Continuous, true) => SensitiveSpec::Continuous(column.clone()),
            (SensitiveKind::Continuous, false) => {
                return Err(Error::Config("--sensitive-bins requires --sensitive-kind categorical".into()))
            }
        }),
    };
    if let Some(cap) = data.cap_claims {
        if !(cap >= 0.0) {
            return Err(Error::Config(format!("--cap-claims must be non-negative, got {cap}")));
        }
    }
    Ok(ColumnMapping {
        id: data.id_col.clone(),
        claims: data.claims_col.clone(),
        exposure: data.exposure_col.clone(),
        premium: premium.map(str::to_owned),
        sensitive: spec,
        force_categorical: data.force_categorical.clone(),
        cap_claims: data.cap_claims,
    })
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Config(format!("input file `{}` does not exist", p.display())));
        }
    }
    Ok(())
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    Ok(())
}

fn load_split(path: &Path, mapping: &ColumnMapping, cfg: SplitConfig) -> Result<Portfolio> {
    let portfolio = load_csv(path, mapping)?;
    if portfolio.is_empty() {
        return Err(Error::Validation(format!("{} has no data rows", path.display())));
    }
    split(portfolio, cfg.fractions, cfg.seed)
}

fn pick(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn group_labels(portfolio: &Portfolio) -> Vec<String> {
    match portfolio.sensitive() {
        Some(SensitiveColumn::Categorical(g)) => g.codes.iter().map(|&c| g.levels[c].clone()).collect(),
        Some(SensitiveColumn::Continuous(v)) => v.iter().map(|x| fmt_f64(*x)).collect(),
        None => vec![String::new(); portfolio.len()],
    }
}

fn premiums_csv(portfolio: &Portfolio, premium_in: &[f64], premium_out: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "premium_in", "premium_out", "group", "split"])?;
    let groups = group_labels(portfolio);
    for i in 0..portfolio.len() {
        w.write_record([
            portfolio.ids()[i].as_str(),
            &fmt_f64(premium_in[i]),
            &fmt_f64(premium_out[i]),
            &groups[i],
            portfolio.split_tags()[i].as_str(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path `{}` has no file name", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    format_version: u32,
    output: String,
    output_sha256: String,
    inputs: Vec<InputDigest>,
    config: &'a Command,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes `bytes` to `path` and its run manifest next to it.
fn emit(cli: &Cli, path: &Path, bytes: &[u8], inputs: &[&Path]) -> Result<()> {
    write_atomic(path, bytes)?;
    let manifest = Manifest {
        tool: "multical",
        version: env!("CARGO_PKG_VERSION"),
        format_version: FORMAT_VERSION,
        output: path.display().to_string(),
        output_sha256: Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect(),
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_hex(p)?,
                })
            })
            .collect::<Result<_>>()?,
        config: &cli.command,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&manifest_path(path), text.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn unconverged(what: &str, allow: bool) -> Result<()> {
    if allow {
        warn!("{what} did not converge; continuing because --allow-unconverged is set");
        Ok(())
    } else {
        Err(Error::NotConverged(format!(
            "{what} did not converge; outputs were written, pass --allow-unconverged to accept them"
        )))
    }
}

fn cmd_fit_baseline(cli: &Cli, a: &FitBaselineArgs) -> Result<()> {
    check_fractions(a.split.split)?;
    if a.feature_bins == 0 || a.max_iter == 0 {
        return Err(Error::Config("--feature-bins and --max-iter must be positive".into()));
    }
    let map = mapping(&a.data, Some(&a.sensitive), None)?;
    require_files(&[&a.data.input])?;
    let split_cfg = SplitConfig::new(a.split.split, a.split.seed);
    let portfolio = load_split(&a.data.input, &map, split_cfg)?;
    let train = portfolio.fold(SplitTag::Train);
    if train.is_empty() {
        return Err(Error::Validation("training fold is empty".into()));
    }
    let cfg = GlmConfig {
        feature_bins: a.feature_bins,
        max_iterations: a.max_iter,
        ..Default::default()
    };
    let glm = match fit_baseline(&train, &a.features, &cfg) {
        Err(Error::NotConverged(msg)) if a.allow_unconverged => {
            return Err(Error::NotConverged(format!(
                "{msg}; the GLM has no usable estimate to write"
            )))
        }
        other => other?,
    };
    let file = ModelFile::new(map, split_cfg, None, ModelBody::Glm(glm));
    emit(cli, &a.output, file.to_json()?.as_bytes(), &[&a.data.input])?;
    if let Some(out) = &a.premiums_out {
        let (pred, _) = file.model.apply(&portfolio, &PremiumVector::new(vec![1.0; portfolio.len()])?)?;
        emit(cli, out, &premiums_csv(&portfolio, &pred, &pred)?, &[&a.data.input])?;
    }
    Ok(())
}

struct Configs {
    categorical: CalibrationConfig,
    continuous: ContinuousConfig,
    credibility_auto: bool,
}

fn calibrate_configs(a: &CalibrateArgs) -> Result<Configs> {
    check_fractions(a.split.split)?;
    let (credibility, credibility_auto) = match a.credibility.as_str() {
        "auto" => (CalibrationConfig::default().credibility, true),
        c => (
            c.parse::<f64>()
                .map_err(|_| Error::Config(format!("--credibility must be a number or `auto`, got `{c}`")))?,
            false,
        ),
    };
    let categorical = CalibrationConfig {
        bins: a.bins,
        eta: a.eta,
        credibility,
        tol: a.tol,
        max_iterations: a.max_iter,
        premium_floor: a.premium_floor,
        fixed_bins: a.fixed_bins,
        min_group_size: a.min_group_size,
    };
    let continuous = ContinuousConfig {
        alpha: a.alpha,
        degree: a.degree.map(|d| match d {
            DegreeArg::Constant => Degree::Constant,
            DegreeArg::Linear => Degree::Linear,
        }),
        credibility,
        knn_k: a.knn_k,
        eta: a.eta,
        tol: a.tol,
        max_iterations: a.max_iter,
        premium_floor: a.premium_floor,
        grid_p: a.grid_p,
        grid_s: a.grid_s,
        grid_1d: a.grid_1d,
        ..Default::default()
    };
    if a.mode.continuous() {
        continuous.validate()?;
    } else {
        categorical.validate()?;
    }
    if credibility_auto && !a.mode.iterative() {
        return Err(Error::Config("--credibility auto only applies to the iterative modes".into()));
    }
    if a.premium.is_none() && a.baseline_model.is_none() {
        return Err(Error::Config("one of --premium or --baseline-model is required".into()));
    }
    if a.mode.needs_sensitive() && a.sensitive.sensitive.is_none() {
        return Err(Error::Config(format!("--mode {:?} requires --sensitive", a.mode)));
    }
    let kind_ok = match (a.mode.continuous(), a.mode.needs_sensitive()) {
        (_, false) => true,
        (true, true) => a.sensitive.sensitive_kind == SensitiveKind::Continuous,
        (false, true) => a.sensitive.sensitive_kind == SensitiveKind::Categorical,
    };
    if !kind_ok {
        return Err(Error::Config(format!(
            "--mode {:?} does not accept --sensitive-kind {:?}",
            a.mode, a.sensitive.sensitive_kind
        )));
    }
    Ok(Configs {
        categorical,
        continuous,
        credibility_auto,
    })
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let cfgs = calibrate_configs(a)?;
    let map = mapping(&a.data, Some(&a.sensitive), a.premium.as_deref())?;
    require_files(&[&a.data.input])?;
    if let Some(p) = &a.baseline_model {
        require_files(&[p])?;
    }
    let baseline = match &a.baseline_model {
        Some(path) => match ModelFile::load(path)?.model {
            ModelBody::Glm(g) => Some(g),
            other => {
                return Err(Error::Validation(format!(
                    "--baseline-model must be a GLM, found mode `{}`",
                    other.mode_name()
                )))
            }
        },
        None => None,
    };
    let split_cfg = SplitConfig::new(a.split.split, a.split.seed);
    let portfolio = load_split(&a.data.input, &map, split_cfg)?;
    let premium_in = match &baseline {
        Some(glm) => predict(glm, &portfolio)?.0,
        None => portfolio.baseline_premium()?,
    };

    let train_idx = portfolio.fold_indices(SplitTag::Train);
    if train_idx.is_empty() {
        return Err(Error::Validation("training fold is empty".into()));
    }
    let train = portfolio.subset(&train_idx);
    let train_premium = PremiumVector::new(pick(&premium_in, &train_idx))?;
    let valid_idx = portfolio.fold_indices(SplitTag::Validation);
    if cfgs.credibility_auto && valid_idx.is_empty() {
        return Err(Error::Config("--credibility auto needs a non-empty validation fold".into()));
    }
    let validation = portfolio.subset(&valid_idx);
    let valid_premium = || PremiumVector::new(pick(&premium_in, &valid_idx));

    let (fitted, body) = match a.mode {
        Mode::Bc => {
            let (out, f) = balance_correct(&train, &train_premium)?;
            (out, ModelBody::Bc(f))
        }
        Mode::Mbc => {
            let (out, m) = multibalance_correct(&train, &train_premium, train.grouping()?, cfgs.categorical.min_group_size)?;
            (out, ModelBody::Mbc(m))
        }
        Mode::AutoIter | Mode::MultiIter => {
            let auto = a.mode == Mode::AutoIter;
            let group = if auto {
                Grouping::constant(train.len(), "all")
            } else {
                train.grouping()?.clone()
            };
            let mut cfg = cfgs.categorical.clone();
            if cfgs.credibility_auto {
                let labels = if auto {
                    vec!["all".to_owned(); validation.len()]
                } else {
                    group_labels(&validation)
                };
                let (c, scores) = select_credibility(
                    &train,
                    &train_premium,
                    &group,
                    &validation,
                    &valid_premium()?,
                    &labels,
                    &cfg,
                    &CREDIBILITY_GRID,
                )?;
                info!("credibility scores {scores:?}; selected c = {c}");
                cfg.credibility = c;
            }
            let (out, m) = iterate_multical_categorical(&train, &train_premium, &group, &cfg)?;
            (out, if auto { ModelBody::AutoIter(m) } else { ModelBody::MultiIter(m) })
        }
        Mode::LocalBc => {
            let (out, m) = local_balance_correct(&train, &train_premium, &cfgs.continuous)?;
            (out, ModelBody::from_continuous(m))
        }
        Mode::LocalMbc => {
            let (out, m) =
                mbc_bivariate_centered(&train, &train_premium, train.sensitive_values()?, &cfgs.continuous)?;
            (out, ModelBody::from_continuous(m))
        }
        Mode::MultiIterCont => {
            let mut cfg = cfgs.continuous.clone();
            let s = train.sensitive_values()?;
            if cfgs.credibility_auto {
                let (c, scores) = select_credibility_continuous(
                    &train,
                    &train_premium,
                    s,
                    &validation,
                    &valid_premium()?,
                    validation.sensitive_values()?,
                    &cfg,
                    &CREDIBILITY_GRID,
                )?;
                info!("credibility scores {scores:?}; selected c = {c}");
                cfg.credibility = c;
            }
            let (out, m) = iterate_multical_continuous(&train, &train_premium, s, &cfg)?;
            (out, ModelBody::from_continuous(m))
        }
    };
    let file = ModelFile::new(map, split_cfg, baseline, body);

    let (mut premium_out, fallbacks) = file.model.apply(&portfolio, &premium_in)?;
    if fallbacks > 0 {
        info!("{fallbacks} records used a fallback correction");
    }
    let mut out = premium_out.to_vec();
    for (j, &i) in train_idx.iter().enumerate() {
        out[i] = fitted[j];
    }
    premium_out = PremiumVector::new(out)?;

    let mut inputs: Vec<&Path> = vec![&a.data.input];
    if let Some(p) = &a.baseline_model {
        inputs.push(p);
    }
    emit(cli, &a.output, file.to_json()?.as_bytes(), &inputs)?;
    emit(cli, &a.premiums_out, &premiums_csv(&portfolio, &premium_in, &premium_out)?, &inputs)?;
    if !file.model.converged() {
        unconverged(&format!("mode {}", file.model.mode_name()), a.allow_unconverged)?;
    }
    Ok(())
}

fn cmd_apply(cli: &Cli, a: &ApplyArgs) -> Result<()> {
    require_files(&[&a.model, &a.input])?;
    let file = ModelFile::load(&a.model)?;
    if !file.model.converged() && !a.allow_unconverged {
        return Err(Error::NotConverged(format!(
            "model `{}` did not converge; pass --allow-unconverged to apply it anyway",
            a.model.display()
        )));
    }
    let portfolio = load_split(&a.input, &file.mapping, file.split)?;
    let premium_in = file.input_premium(&portfolio)?;
    let (premium_out, fallbacks) = file.model.apply(&portfolio, &premium_in)?;
    if fallbacks > 0 {
        info!("{fallbacks} records used a fallback correction");
    }
    emit(cli, &a.output, &premiums_csv(&portfolio, &premium_in, &premium_out)?, &[&a.model, &a.input])
}

/// Rows of a premiums CSV aligned with the data portfolio.
struct PremiumTable {
    premium: Vec<f64>,
    groups: Vec<String>,
    split: Vec<SplitTag>,
}

fn read_premiums(path: &Path, column: &str, portfolio: &Portfolio) -> Result<PremiumTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let (id_c, p_c, g_c, s_c) = (col("id")?, col(column)?, col("group")?, col("split")?);
    let mut t = PremiumTable {
        premium: vec![],
        groups: vec![],
        split: vec![],
    };
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if portfolio.ids().get(i).map(String::as_str) != Some(&rec[id_c]) {
            return Err(Error::Row {
                row,
                message: format!("premiums id `{}` does not match the portfolio", &rec[id_c]),
            });
        }
        let p: f64 = rec[p_c].parse().map_err(|_| Error::Row {
            row,
            message: format!("cannot parse premium `{}`", &rec[p_c]),
        })?;
        t.premium.push(p);
        t.groups.push(rec[g_c].to_owned());
        t.split.push(rec[s_c].parse()?);
    }
    if t.premium.len() != portfolio.len() {
        return Err(Error::Validation(format!(
            "premiums file has {} rows, portfolio has {}",
            t.premium.len(),
            portfolio.len()
        )));
    }
    Ok(t)
}

fn report_inputs(r: &ReportArgs) -> Result<(Portfolio, PremiumVector, Grouping)> {
    if r.bins == 0 || r.s_bins == 0 {
        return Err(Error::Config("--bins and --s-bins must be positive".into()));
    }
    let map = mapping(&r.data, None, None)?;
    require_files(&[&r.data.input, &r.premiums])?;
    let all = load_csv(&r.data.input, &map)?;
    let table = read_premiums(&r.premiums, &r.column, &all)?;
    let idx: Vec<usize> = (0..all.len())
        .filter(|&i| match r.fold {
            FoldArg::All => true,
            FoldArg::Train => table.split[i] == SplitTag::Train,
            FoldArg::Validation => table.split[i] == SplitTag::Validation,
            FoldArg::Test => table.split[i] == SplitTag::Test,
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::Validation(format!("fold {:?} is empty", r.fold)));
    }
    let portfolio = all.subset(&idx);
    let premium = PremiumVector::new(pick(&table.premium, &idx))?;
    let groups: Vec<String> = idx.iter().map(|&i| table.groups[i].clone()).collect();
    let numeric: Option<Vec<f64>> = groups.iter().map(|g| g.parse::<f64>().ok()).collect();
    let continuous = match (r.group_kind, &numeric) {
        (GroupKindArg::Categorical, _) => false,
        (GroupKindArg::Continuous, None) => {
            return Err(Error::Validation("group column is not numeric".into()));
        }
        (GroupKindArg::Continuous, Some(_)) => true,
        (GroupKindArg::Auto, Some(v)) => {
            let mut d = v.clone();
            d.sort_by(f64::total_cmp);
            d.dedup();
            d.len() > 50
        }
        (GroupKindArg::Auto, None) => false,
    };
    let grouping = if continuous {
        quantile_grouping(numeric.as_deref().unwrap_or_default(), portfolio.exposure(), r.s_bins)?.0
    } else {
        Grouping::from_labels(&groups)
    };
    Ok((portfolio, premium, grouping))
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let (portfolio, premium, grouping) = report_inputs(&a.report)?;
    let bins = quantile_bins(&premium, portfolio.exposure(), a.report.bins)?;
    let summary = diagnose(&portfolio, &premium, &bins, &grouping, None)?.summary();
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    emit(cli, &a.output, text.as_bytes(), &[&a.report.data.input, &a.report.premiums])
}

fn cmd_diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<()> {
    let (portfolio, premium, grouping) = report_inputs(&a.report)?;
    let trace = match &a.model {
        Some(p) => require_files(&[p]).and_then(|_| ModelFile::load(p))?.model.trace().map(<[f64]>::to_vec),
        None => None,
    };
    let bins = quantile_bins(&premium, portfolio.exposure(), a.report.bins)?;
    let report = diagnose(&portfolio, &premium, &bins, &grouping, trace)?;
    let mut inputs: Vec<&Path> = vec![&a.report.data.input, &a.report.premiums];
    if let Some(p) = &a.model {
        inputs.push(p);
    }
    let mut csv_bytes = Vec::new();
    report.bias_table.write_csv(&mut csv_bytes)?;
    emit(cli, &a.output, &csv_bytes, &inputs)?;
    if let Some(path) = &a.report_json {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        emit(cli, path, text.as_bytes(), &inputs)?;
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        seed: a.seed,
        group_kind: a.group_kind,
        intercept: a.intercept,
        numeric_effects: a.numeric_effects.clone(),
        categorical_effects: a.categorical_effects.0.clone(),
        beta_s: a.beta_s,
    };
    cfg.validate()?;
    let distortion = Distortion {
        drop_features: a.drop_features.clone(),
        ..a.distort.clone()
    };
    let names = cfg.feature_names();
    if let Some(bad) = distortion.drop_features.iter().find(|f| !names.contains(f)) {
        return Err(Error::Config(format!("--drop-features names unknown feature `{bad}`")));
    }
    let synth = generate(&cfg)?;
    let premium = distorted_baseline(&synth, &distortion)?;
    let portfolio = synth
        .portfolio
        .with_baseline(premium)?
        .with_feature(TRUE_MU_COLUMN, ColumnData::Numeric(synth.true_mu.to_vec()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    crate::data::write_portfolio(&portfolio, &mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(cli, &a.output, &bytes, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortion_parsing() {
        let d = parse_distortion("auto,0.5,dropS").unwrap();
        assert_eq!(d.scale, None);
        assert_eq!(d.power, 0.5);
        assert!(d.drop_s);
        assert!(parse_distortion("1,1").is_err());
        assert!(parse_distortion("1,1,maybe").is_err());
    }

    #[test]
    fn group_kind_parsing() {
        assert_eq!(parse_group_kind("categorical:3").unwrap(), GroupKind::Categorical { levels: 3 });
        assert_eq!(parse_group_kind("continuous").unwrap(), GroupKind::Continuous);
        assert!(parse_group_kind("ordinal").is_err());
    }

    #[test]
    fn fractions_parsing() {
        assert_eq!(parse_fractions("0.6,0.2,0.2").unwrap(), [0.6, 0.2, 0.2]);
        assert!(parse_fractions("0.5,0.5").is_err());
    }

    #[test]
    fn categorical_effects_parsing() {
        let e = parse_categorical_effects("0,0.1;0,-0.2,0.3").unwrap();
        assert_eq!(e.0, vec![vec![0.0, 0.1], vec![0.0, -0.2, 0.3]]);
    }

    #[test]
    fn unknown_flag_is_a_validation_error() {
        assert_eq!(run(["multical", "simulate", "--output", "x.csv", "--bogus"]), 1);
        assert_eq!(run(["multical", "frobnicate"]), 1);
    }

    #[test]
    fn invalid_calibration_flags_fail_before_reading_input() {
        let code = run([
            "multical",
            "calibrate",
            "--input",
            "/nonexistent.csv",
            "--premium",
            "p",
            "--mode",
            "multi-iter",
            "--sensitive",
            "S",
            "--eta",
            "1.5",
            "--output",
            "m.json",
            "--premiums-out",
            "p.csv",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path(Path::new("out/p.csv")), PathBuf::from("out/p.csv.manifest.json"));
    }
}
