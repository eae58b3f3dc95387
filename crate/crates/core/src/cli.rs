//! Command implementations behind the `synthlab` binary.
//!
//! Configuration precedence, highest first: command-line flags, the JSON
//! config file, the `SYNTHLAB_CALIBRATION` environment variable (calibration
//! path only), built-in defaults.
//!
//! Every command that writes files also writes a manifest carrying the
//! SHA-256 of the resolved configuration and the master seed. The hash
//! leaves out the output directory and worker count, which do not change
//! results.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dgp::{CalibrationSet, ScenarioConfig, CALIBRATION_ENV};
use crate::error::Error;
use crate::evalx::{
    build_report, fit_method, read_failures, read_panel_sds, read_records, run_experiment, settings_for, write_outputs,
    write_report, CovariateSetting, ExperimentOutput, ExperimentReport, ExperimentSpec, Method, MethodOptions,
    OmissionPolicy, Scenario, DEFAULT_RANK_METHODS, FAILURES_FILE, PANEL_SD_FILE, RECORDS_FILE,
};
use crate::panel::{CompositionalSpec, OmissionChoice, PanelData};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_MANIFEST_FILE: &str = "report_manifest.json";

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FIT: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: Error,
}

impl CliError {
    fn config(error: Error) -> Self {
        Self { code: EXIT_CONFIG, error }
    }

    fn io(error: Error) -> Self {
        Self { code: EXIT_IO, error }
    }

    fn fit(error: Error) -> Self {
        Self { code: EXIT_FIT, error }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> Value {
        json!({"error": {"code": self.code, "kind": error_kind(&self.error), "message": self.error.to_string()}})
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidPanel(_) => "invalid_panel",
        Error::InvalidSpec(_) => "invalid_spec",
        Error::UnknownCategory { .. } => "unknown_category",
        Error::EmptyDonorPool => "empty_donor_pool",
        Error::Singular { .. } => "singular",
        Error::RankDeficient(_) => "rank_deficient",
        Error::NonConvergence { .. } => "non_convergence",
        Error::InvalidInput(_) => "invalid_input",
        Error::Calibration(_) => "calibration",
        Error::Undefined(_) => "undefined",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(e: std::io::Error) -> CliError {
    CliError::io(Error::Io(e))
}

// ---------------------------------------------------------------------------
// configuration

/// The JSON experiment config. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub rank_methods: Vec<Method>,
    pub omission_policy: OmissionPolicy,
    pub replications: u64,
    pub seed: u64,
    pub calibration: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    /// Replaces `t0` in every calibrated scenario.
    pub t0: Option<usize>,
    pub method_options: MethodOptions,
    pub per_period_rmse: bool,
    /// Compositional groups of a panel CSV for `fit`, e.g. `{"race": ["white", "black", "other"]}`.
    pub groups: serde_json::Map<String, Value>,
    pub scalars: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = ExperimentSpec::default();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            scenarios: vec![Scenario::Calibrated(ScenarioConfig::default())],
            methods: spec.methods,
            rank_methods: spec.rank_methods,
            omission_policy: spec.omission_policy,
            replications: spec.replications,
            seed: spec.seed,
            calibration: None,
            output_dir: PathBuf::from("synthlab-out"),
            workers: None,
            t0: None,
            method_options: spec.method_options,
            per_period_rmse: false,
            groups: Default::default(),
            scalars: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::config(e.into()))?;
        Ok(cfg)
    }

    /// File values (or defaults) with flags applied on top.
    pub fn resolve(path: Option<&Path>, flags: &ConfigFlags) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::config(Error::InvalidInput(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ))));
        }
        if self.workers == Some(0) {
            return Err(CliError::config(Error::InvalidInput("workers must be >= 1".into())));
        }
        self.experiment_spec().validate().map_err(CliError::config)?;
        self.compositional_spec().map_err(CliError::config)?;
        Ok(())
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        let scenarios = self
            .scenarios
            .iter()
            .map(|s| match (s, self.t0) {
                (Scenario::Calibrated(c), Some(t0)) => Scenario::Calibrated(ScenarioConfig { t0, ..c.clone() }),
                _ => s.clone(),
            })
            .collect();
        ExperimentSpec {
            scenarios,
            methods: self.methods.clone(),
            rank_methods: self.rank_methods.clone(),
            omission_policy: self.omission_policy,
            replications: self.replications,
            seed: self.seed,
            method_options: self.method_options.clone(),
            per_period_rmse: self.per_period_rmse,
        }
    }

    /// The declared groups, or `None` when the config declares none.
    pub fn compositional_spec(&self) -> crate::error::Result<Option<CompositionalSpec>> {
        if self.groups.is_empty() && self.scalars.is_empty() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_value(json!({"groups": self.groups, "scalars": self.scalars}))?))
    }

    pub fn calibration_set(&self) -> CliResult<CalibrationSet> {
        CalibrationSet::load(self.calibration.as_deref()).map_err(CliError::config)
    }

    /// SHA-256 over the result-relevant part of the config.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
            m.remove("workers");
        }
        sha256_hex(v.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn calibration_source(cfg: &ExperimentConfig) -> Value {
    match (&cfg.calibration, std::env::var_os(CALIBRATION_ENV)) {
        (Some(p), _) => json!(p),
        (None, Some(p)) => json!(PathBuf::from(p)),
        (None, None) => json!("default"),
    }
}

fn calibration_hash(calib: &CalibrationSet) -> String {
    sha256_hex(serde_json::to_string(calib).expect("calibration serializes").as_bytes())
}

/// Flags shared by the config-driven commands. Set flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Calibration set (JSON); falls back to $SYNTHLAB_CALIBRATION, then the shipped default
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<u64>,
    /// Number of pre-treatment periods in every calibrated scenario
    #[arg(long)]
    pub t0: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated method ids
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// SWEEP_ALL, SINGLE, ALL_CATEGORIES or NONE
    #[arg(long)]
    pub policy: Option<OmissionPolicy>,
    #[arg(long, value_delimiter = ',')]
    pub rank_methods: Option<Vec<Method>>,
    /// Also report RMSE over every post-period gap
    #[arg(long)]
    pub per_period_rmse: bool,
    #[arg(skip)]
    pub workers: Option<usize>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = &self.calibration {
            cfg.calibration = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.reps {
            cfg.replications = r;
        }
        if let Some(t) = self.t0 {
            cfg.t0 = Some(t);
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(p) = self.policy {
            cfg.omission_policy = p;
        }
        if let Some(m) = &self.rank_methods {
            cfg.rank_methods = m.clone();
        }
        if self.per_period_rmse {
            cfg.per_period_rmse = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "synthlab", version, about = "Synthetic control estimators and a calibrated simulation harness")]
pub struct Cli {
    /// Only log errors
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for experiments (default: all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated panels and a manifest with seeds and ground truth
    Simulate(ConfigFlags),
    /// Fit one method to a panel CSV and print the fit as JSON
    Fit(FitArgs),
    /// Run a full experiment and write raw records plus report tables
    Experiment(ConfigFlags),
    /// Rebuild the report tables from a raw records directory
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Panel CSV with columns unit,time,outcome,<covariate...>
    #[arg(long)]
    pub panel: PathBuf,
    /// Last pre-treatment time value
    #[arg(long)]
    pub t0: i64,
    #[arg(long)]
    pub method: Method,
    /// Treated unit id (default: first unit in the file)
    #[arg(long)]
    pub treated: Option<String>,
    /// Omitted categories, e.g. `race=white;education=hs`, or ALL
    #[arg(long)]
    pub omit: Option<String>,
    /// Config supplying groups, method options and seed
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the fit here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory holding records.csv (and optionally panel_sd.csv, failures.csv)
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the tables (default: the input directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub rank_methods: Option<Vec<Method>>,
    #[arg(long)]
    pub per_period_rmse: bool,
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let res = match cli.command {
        Command::Simulate(mut f) => {
            f.workers = f.workers.or(cli.workers);
            cmd_simulate(&f).map(|_| ())
        }
        Command::Experiment(mut f) => {
            f.workers = f.workers.or(cli.workers);
            cmd_experiment(&f).map(|out| {
                if !cli.quiet {
                    print_summary(&out.report);
                }
            })
        }
        Command::Fit(a) => cmd_fit(&a).and_then(|v| {
            let text = serde_json::to_string_pretty(&v).expect("fit serializes");
            match &a.out {
                Some(p) => std::fs::write(p, text + "\n").map_err(io_err),
                None => {
                    // a closed pipe on stdout is not worth a panic
                    let _ = writeln!(std::io::stdout(), "{text}");
                    Ok(())
                }
            }
        }),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}

fn print_summary(report: &ExperimentReport) {
    println!(
        "{:<28} {:<8} {:<18} {:>12} {:>14} {:>8} {:>7}",
        "scenario", "kind", "method", "rmse", "mean_abs_bias", "records", "failed"
    );
    for r in &report.fig1 {
        println!(
            "{:<28} {:<8} {:<18} {:>12.6} {:>14.6} {:>8} {:>7}",
            r.scenario,
            r.outcome_kind,
            r.method.id(),
            r.rmse,
            r.mean_abs_bias,
            r.n_records,
            r.n_failed
        );
    }
}

// ---------------------------------------------------------------------------
// commands

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut f = File::create(path).map_err(io_err)?;
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(io_err)
}

fn base_manifest(command: &str, cfg: &ExperimentConfig, calib: &CalibrationSet) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("tool".into(), json!("synthlab"));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("command".into(), json!(command));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("calibration".into(), json!({"source": calibration_source(cfg), "hash": calibration_hash(calib)}));
    let mut recorded = serde_json::to_value(cfg).expect("config serializes");
    if let Value::Object(c) = &mut recorded {
        c.remove("output_dir");
        c.remove("workers");
    }
    m.insert("config".into(), recorded);
    m
}

/// Writes one panel CSV per (scenario, replication) plus `manifest.json`.
/// Returns the panel paths in write order.
pub fn cmd_simulate(flags: &ConfigFlags) -> CliResult<Vec<PathBuf>> {
    let cfg = ExperimentConfig::resolve(flags.config.as_deref(), flags)?;
    let calib = cfg.calibration_set()?;
    let spec = cfg.experiment_spec();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (si, scenario) in spec.scenarios.iter().enumerate() {
        for rep in 0..spec.replications {
            let ds = scenario.generate(&calib, spec.seed, rep).map_err(CliError::config)?;
            let name = format!("panel_s{si}_rep{rep:04}.csv");
            let path = dir.join(&name);
            let f = File::create(&path).map_err(io_err)?;
            ds.panel.write_csv(f).map_err(CliError::io)?;
            log::info!("{}", json!({"event": "panel_written", "scenario": scenario.id(), "rep": rep, "file": name}));
            entries.push(json!({
                "file": name,
                "scenario": scenario.id(),
                "outcome_kind": scenario.outcome_kind(),
                "rep": rep,
                "rng_seed": spec.seed ^ rep,
                "true_tau": ds.true_tau,
                "t0_time": ds.panel.times()[ds.panel.t0() - 1],
                "treated_unit": ds.panel.unit_ids()[0],
                "counterfactual": ds.counterfactual,
                "covariates": ds.spec,
            }));
            files.push(path);
        }
    }
    let mut m = base_manifest("simulate", &cfg, &calib);
    m.insert("status".into(), json!("ok"));
    m.insert("panels".into(), Value::Array(entries));
    write_json(&dir.join(MANIFEST_FILE), &Value::Object(m))?;
    Ok(files)
}

/// Fits one method to a panel CSV. Covariate groups come from the config;
/// without any, every covariate column is a scalar.
pub fn cmd_fit(args: &FitArgs) -> CliResult<Value> {
    let cfg = ExperimentConfig::resolve(args.config.as_deref(), &ConfigFlags::default())?;
    let file = File::open(&args.panel).map_err(io_err)?;
    let panel = PanelData::from_csv_reader(file, args.t0, args.treated.as_deref()).map_err(CliError::io)?;
    let spec = match cfg.compositional_spec().map_err(CliError::config)? {
        Some(s) => s,
        None => CompositionalSpec::new(Vec::new(), panel.covariates().iter().map(|c| c.name.clone()).collect())
            .map_err(CliError::config)?,
    };
    for name in spec.scalars.iter().chain(spec.groups.iter().flat_map(|g| g.categories.iter())) {
        if panel.covariate(name).is_none() {
            return Err(CliError::config(Error::InvalidInput(format!("panel has no covariate column `{name}`"))));
        }
    }
    if !spec.groups.is_empty() {
        panel.validate_composition(&spec).map_err(CliError::io)?;
    }
    let (omission, setting) =
        match (&args.omit, args.method.takes_omission() && cfg.omission_policy != OmissionPolicy::None) {
            (Some(text), true) => {
                let o = OmissionChoice::parse(&spec, text).map_err(CliError::config)?;
                (o.id(&spec), CovariateSetting::Omit(o))
            }
            _ => settings_for(args.method, cfg.omission_policy, &spec).swap_remove(0),
        };
    let fit = fit_method(args.method, &panel, &spec, &setting, &cfg.method_options, cfg.seed).map_err(CliError::fit)?;
    let post_times = &panel.times()[panel.t0()..];
    Ok(json!({
        "method": args.method,
        "omission": omission,
        "treated_unit": panel.unit_ids()[0],
        "n_donors": panel.n_donors(),
        "t0": panel.t0(),
        "att_mean": fit.att_mean,
        "rmspe_pre": fit.rmspe_pre,
        "post_times": post_times,
        "att_series": fit.att_series,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "panel_sha256": sha256_hex(&std::fs::read(&args.panel).map_err(io_err)?),
    }))
}

/// Runs the experiment on a pool of `workers` threads and writes raw
/// records, figure tables and `manifest.json` to the output directory.
pub fn cmd_experiment(flags: &ConfigFlags) -> CliResult<ExperimentOutput> {
    let cfg = ExperimentConfig::resolve(flags.config.as_deref(), flags)?;
    let calib = cfg.calibration_set()?;
    let spec = cfg.experiment_spec();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err)?;
    let mut manifest = base_manifest("experiment", &cfg, &calib);
    manifest.insert("rank_methods".into(), json!(spec.rank_methods));

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::config(Error::InvalidInput(e.to_string())))?;
    let result = pool.install(|| run_experiment(&spec, &calib)).map_err(CliError::fit).and_then(|out| {
        write_outputs(&out, &dir).map_err(CliError::io)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            manifest.insert("status".into(), json!("ok"));
            manifest.insert("records".into(), json!(out.records.len()));
            manifest.insert("failures".into(), json!(out.failures.len()));
            manifest.insert("files".into(), json!(existing_outputs(&dir)));
            write_json(&dir.join(MANIFEST_FILE), &Value::Object(manifest))?;
            Ok(out)
        }
        Err(e) => {
            manifest.insert("status".into(), json!("failed"));
            manifest.insert("error".into(), e.to_json()["error"].clone());
            manifest.insert("files".into(), json!(existing_outputs(&dir)));
            // the original error matters more than a failure to record it
            let _ = write_json(&dir.join(MANIFEST_FILE), &Value::Object(manifest));
            Err(e)
        }
    }
}

const REPORT_FILES: [&str; 5] =
    ["fig1_rmse.csv", "fig2_refcat.csv", "fig4_conditional_bias.csv", "fig6_spearman.csv", "fig8_rankmatrix.csv"];

fn existing_outputs(dir: &Path) -> Vec<&'static str> {
    [RECORDS_FILE, PANEL_SD_FILE, FAILURES_FILE]
        .into_iter()
        .chain(REPORT_FILES)
        .filter(|f| dir.join(f).exists())
        .collect()
}

/// Re-aggregates the report tables from a directory of raw records.
///
/// Rank methods come from the flag, else the experiment manifest in the
/// input directory, else the defaults.
pub fn cmd_report(args: &ReportArgs) -> CliResult<ExperimentReport> {
    let dir = &args.input;
    let records = read_records(File::open(dir.join(RECORDS_FILE)).map_err(io_err)?).map_err(CliError::io)?;
    let panel_sds = match File::open(dir.join(PANEL_SD_FILE)) {
        Ok(f) => read_panel_sds(f).map_err(CliError::io)?,
        Err(_) => Vec::new(),
    };
    let failures = match File::open(dir.join(FAILURES_FILE)) {
        Ok(f) => read_failures(f).map_err(CliError::io)?,
        Err(_) => Vec::new(),
    };
    let manifest: Option<Value> =
        std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let rank_methods: Vec<Method> = match &args.rank_methods {
        Some(m) => m.clone(),
        None => manifest
            .as_ref()
            .and_then(|m| serde_json::from_value(m["rank_methods"].clone()).ok())
            .unwrap_or_else(|| DEFAULT_RANK_METHODS.to_vec()),
    };
    if args.per_period_rmse {
        log::warn!(
            "{}",
            json!({"event": "per_period_unavailable", "reason": "raw records carry replication means only"})
        );
    }
    let report = build_report(&records, &panel_sds, &failures, &rank_methods, false);
    let out = args.out.clone().unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out).map_err(io_err)?;
    write_report(&report, &out).map_err(CliError::io)?;
    let m = json!({
        "tool": "synthlab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "report",
        "status": "ok",
        "records_sha256": sha256_hex(&std::fs::read(dir.join(RECORDS_FILE)).map_err(io_err)?),
        "seed": manifest.as_ref().map(|m| m["seed"].clone()).unwrap_or(Value::Null),
        "config_hash": manifest.as_ref().map(|m| m["config_hash"].clone()).unwrap_or(Value::Null),
        "rank_methods": rank_methods,
        "files": REPORT_FILES,
    });
    write_json(&out.join(REPORT_MANIFEST_FILE), &m)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// logging

/// Writes one JSON object per log line to stderr. Messages that are
/// themselves JSON objects are merged into the line.
pub struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let msg = record.args().to_string();
        let mut obj = match serde_json::from_str::<Value>(&msg) {
            Ok(Value::Object(m)) => m,
            _ => {
                let mut m = serde_json::Map::new();
                m.insert("message".into(), json!(msg));
                m
            }
        };
        obj.insert("level".into(), json!(record.level().as_str()));
        obj.insert("target".into(), json!(record.target()));
        eprintln!("{}", Value::Object(obj));
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

/// Installs [`JsonLogger`]; `quiet` keeps errors only.
pub fn init_logging(quiet: bool) {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(if quiet { log::LevelFilter::Error } else { log::LevelFilter::Info });
    }
}
