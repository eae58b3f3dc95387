//! Experiment orchestration and the metrics behind the report tables.
//!
//! A run fans out over (scenario, replication) tasks. Each task simulates
//! one dataset and fits every configured method under every omission the
//! policy asks for. Tasks run on the rayon pool and are collected in task
//! order, so the raw record CSV does not depend on scheduling.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augmented_fit, AugmentMode, AugmentOptions, PenaltySelection, DEFAULT_DISPERSION_RATIO, DEFAULT_PENALTY_GRID,
};
use crate::dgp::{simulate, toy_overfit_scenario, CalibrationSet, ScenarioConfig, SimulatedDataset};
use crate::error::{Error, Result};
use crate::ife::ife_fit;
use crate::panel::{
    build_design, build_design_with, covariate_names, enumerate_omissions, fmt_f64, sample_sd, CompositionalSpec,
    OmissionChoice, OutcomeSummaries, PanelData,
};
use crate::synth::{fixed_v_fit, nested_fit, regression_v_or_uniform, NestedOptions, VWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    SynthNested,
    SynthRegweights,
    SynthAllcats,
    SynthNocov,
    Augsynth,
    AugsynthAllcats,
    AugsynthNocov,
    AugsynthResid,
    IfeCov,
    IfeNocov,
}

pub const ALL_METHODS: [Method; 10] = [
    Method::SynthNested,
    Method::SynthRegweights,
    Method::SynthAllcats,
    Method::SynthNocov,
    Method::Augsynth,
    Method::AugsynthAllcats,
    Method::AugsynthNocov,
    Method::AugsynthResid,
    Method::IfeCov,
    Method::IfeNocov,
];

/// Methods compared in the rank analysis: with and without covariates for
/// each family, plus the residualized augmented variant.
pub const DEFAULT_RANK_METHODS: [Method; 7] = [
    Method::SynthAllcats,
    Method::SynthNocov,
    Method::IfeCov,
    Method::IfeNocov,
    Method::AugsynthAllcats,
    Method::AugsynthNocov,
    Method::AugsynthResid,
];

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::SynthNested => "SYNTH_NESTED",
            Method::SynthRegweights => "SYNTH_REGWEIGHTS",
            Method::SynthAllcats => "SYNTH_ALLCATS",
            Method::SynthNocov => "SYNTH_NOCOV",
            Method::Augsynth => "AUGSYNTH",
            Method::AugsynthAllcats => "AUGSYNTH_ALLCATS",
            Method::AugsynthNocov => "AUGSYNTH_NOCOV",
            Method::AugsynthResid => "AUGSYNTH_RESID",
            Method::IfeCov => "IFE_COV",
            Method::IfeNocov => "IFE_NOCOV",
        }
    }

    /// Whether the estimate depends on an omission choice at all.
    pub fn takes_omission(&self) -> bool {
        matches!(
            self,
            Method::SynthNested | Method::SynthRegweights | Method::Augsynth | Method::AugsynthResid | Method::IfeCov
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .find(|m| m.id().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OmissionPolicy {
    /// Every omission combination for methods that take one.
    SweepAll,
    /// The first category of each group.
    #[default]
    Single,
    /// Keep every category.
    AllCategories,
    /// Run every method without covariates.
    None,
}

impl FromStr for OmissionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_uppercase()))
            .map_err(|_| Error::InvalidInput(format!("unknown omission policy `{s}`")))
    }
}

/// Which covariates a single fit sees.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateSetting {
    Omit(OmissionChoice),
    Without,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodOptions {
    pub nested_restarts: usize,
    pub nested_max_inner_solves: usize,
    pub penalty_grid: Vec<f64>,
    pub dispersion_ratio: f64,
    pub ife_factors: usize,
}

impl Default for MethodOptions {
    fn default() -> Self {
        let n = NestedOptions::default();
        Self {
            nested_restarts: n.restarts,
            nested_max_inner_solves: n.max_inner_solves,
            penalty_grid: DEFAULT_PENALTY_GRID.to_vec(),
            dispersion_ratio: DEFAULT_DISPERSION_RATIO,
            ife_factors: 0,
        }
    }
}

/// What a single fit reports back.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub att_mean: f64,
    pub rmspe_pre: f64,
    pub att_series: Vec<f64>,
}

fn lagged_outcome_design(panel: &PanelData) -> Result<crate::panel::DesignMatrices> {
    let blocks = (0..panel.t0()).map(|t| t..t + 1).collect();
    build_design_with(
        panel,
        &CompositionalSpec::default(),
        &OmissionChoice(vec![]),
        &OutcomeSummaries::BlockMeans(blocks),
    )
}

/// Fits `method` on `panel`. `seed` drives the nested optimizer's restarts.
pub fn fit_method(
    method: Method,
    panel: &PanelData,
    spec: &CompositionalSpec,
    setting: &CovariateSetting,
    opts: &MethodOptions,
    seed: u64,
) -> Result<FitSummary> {
    let nested = NestedOptions { restarts: opts.nested_restarts, max_inner_solves: opts.nested_max_inner_solves, seed };
    let augment = |mode: AugmentMode, omit: Option<&OmissionChoice>| -> Result<FitSummary> {
        let design = match omit {
            Some(o) => build_design(panel, spec, o)?,
            None => build_design(panel, &CompositionalSpec::default(), &OmissionChoice(vec![]))?,
        };
        let o = AugmentOptions {
            mode,
            penalty: PenaltySelection::CrossValidated(opts.penalty_grid.clone()),
            dispersion_ratio: opts.dispersion_ratio,
            per_period: false,
        };
        let f = augmented_fit(panel, &design, &o)?;
        Ok(FitSummary { att_mean: f.att_mean, rmspe_pre: f.rmspe_pre, att_series: f.att_series })
    };
    let synth_nocov = || -> Result<FitSummary> {
        let design = lagged_outcome_design(panel)?;
        let f = fixed_v_fit(panel, &design, &VWeights::uniform(design.n_features()))?;
        Ok(FitSummary { att_mean: f.att_mean, rmspe_pre: f.rmspe_pre, att_series: f.att_series })
    };
    let ife = |names: Vec<String>| -> Result<FitSummary> {
        let f = ife_fit(panel, &names, opts.ife_factors)?;
        Ok(FitSummary { att_mean: f.att_mean, rmspe_pre: f.rmspe_pre, att_series: f.att_series })
    };
    let omit = match setting {
        CovariateSetting::Omit(o) => o.clone(),
        CovariateSetting::Without => {
            return match method {
                Method::SynthNested | Method::SynthRegweights | Method::SynthAllcats | Method::SynthNocov => {
                    synth_nocov()
                }
                Method::Augsynth | Method::AugsynthAllcats | Method::AugsynthNocov | Method::AugsynthResid => {
                    augment(AugmentMode::NoCovariates, None)
                }
                Method::IfeCov | Method::IfeNocov => ife(Vec::new()),
            };
        }
    };
    let synth =
        |design: crate::panel::DesignMatrices, init: Option<VWeights>, nested_search: bool| -> Result<FitSummary> {
            let design = design.standardized();
            let v = init.unwrap_or_else(|| regression_v_or_uniform(&design, panel).0);
            let f =
                if nested_search { nested_fit(panel, &design, &v, &nested)? } else { fixed_v_fit(panel, &design, &v)? };
            Ok(FitSummary { att_mean: f.att_mean, rmspe_pre: f.rmspe_pre, att_series: f.att_series })
        };
    match method {
        Method::SynthNested => synth(build_design(panel, spec, &omit)?, None, true),
        Method::SynthRegweights => synth(build_design(panel, spec, &omit)?, None, false),
        Method::SynthAllcats => {
            let d = build_design(panel, spec, &OmissionChoice::all_categories(spec))?;
            let k = d.n_features();
            synth(d, Some(VWeights::uniform(k)), true)
        }
        Method::SynthNocov => synth_nocov(),
        Method::Augsynth => augment(AugmentMode::AllCovariates, Some(&omit)),
        Method::AugsynthAllcats => augment(AugmentMode::AllCovariates, Some(&OmissionChoice::all_categories(spec))),
        Method::AugsynthNocov => augment(AugmentMode::NoCovariates, None),
        Method::AugsynthResid => augment(AugmentMode::Residualized, Some(&omit)),
        Method::IfeCov => ife(covariate_names(spec, &omit)?),
        Method::IfeNocov => ife(Vec::new()),
    }
}

/// Omission settings `method` runs under, with their record ids.
pub fn settings_for(
    method: Method,
    policy: OmissionPolicy,
    spec: &CompositionalSpec,
) -> Vec<(String, CovariateSetting)> {
    let none = || vec![("NONE".to_string(), CovariateSetting::Without)];
    if policy == OmissionPolicy::None {
        return none();
    }
    match method {
        Method::SynthNocov | Method::AugsynthNocov | Method::IfeNocov => none(),
        Method::SynthAllcats | Method::AugsynthAllcats => {
            vec![("ALL".to_string(), CovariateSetting::Omit(OmissionChoice::all_categories(spec)))]
        }
        _ => {
            let choices = match policy {
                OmissionPolicy::SweepAll => enumerate_omissions(spec),
                OmissionPolicy::Single => vec![OmissionChoice::first(spec)],
                OmissionPolicy::AllCategories => vec![OmissionChoice::all_categories(spec)],
                OmissionPolicy::None => unreachable!(),
            };
            choices.into_iter().map(|o| (o.id(spec), CovariateSetting::Omit(o))).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_controls: usize,
    pub t_post: usize,
}

/// A simulated setting: the calibrated simulator or the one-pre-period toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scenario {
    Toy { toy_overfit: ToyConfig },
    Calibrated(ScenarioConfig),
}

impl Scenario {
    pub fn id(&self) -> String {
        match self {
            Scenario::Toy { .. } => "TOY_OVERFIT".into(),
            Scenario::Calibrated(c) => c.id(),
        }
    }

    pub fn outcome_kind(&self) -> &'static str {
        match self {
            Scenario::Toy { .. } => "TOY",
            Scenario::Calibrated(c) => c.outcome_kind.id(),
        }
    }

    pub fn generate(&self, calib: &CalibrationSet, master_seed: u64, rep: u64) -> Result<SimulatedDataset> {
        match self {
            Scenario::Toy { toy_overfit } => {
                let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ rep);
                rng.set_stream(5);
                toy_overfit_scenario(toy_overfit.n_controls, toy_overfit.t_post, &mut rng)
            }
            Scenario::Calibrated(c) => simulate(c, calib, master_seed, rep),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub rank_methods: Vec<Method>,
    pub omission_policy: OmissionPolicy,
    pub replications: u64,
    pub seed: u64,
    pub method_options: MethodOptions,
    /// Also report RMSE over every post-period gap.
    pub per_period_rmse: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenarios: Vec::new(),
            methods: ALL_METHODS.to_vec(),
            rank_methods: DEFAULT_RANK_METHODS.to_vec(),
            omission_policy: OmissionPolicy::default(),
            replications: 100,
            seed: 0,
            method_options: MethodOptions::default(),
            per_period_rmse: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be >= 1".into()));
        }
        if self.scenarios.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidInput("need at least one scenario and one method".into()));
        }
        for s in &self.scenarios {
            if let Scenario::Calibrated(c) = s {
                c.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub scenario: String,
    pub outcome_kind: String,
    pub rep: u64,
    pub method: Method,
    pub omission: String,
    pub att_mean: f64,
    pub rmspe_pre: f64,
    pub bias: f64,
    /// Mean squared post-period gap error; in-memory only.
    #[serde(skip)]
    pub post_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub scenario: String,
    pub outcome_kind: String,
    pub rep: u64,
    pub method: Method,
    pub omission: String,
    pub error: String,
}

/// Outcome SD over the whole simulated panel of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSd {
    pub scenario: String,
    pub outcome_kind: String,
    pub rep: u64,
    pub outcome_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<EstimateRecord>,
    pub failures: Vec<FitFailure>,
    pub panel_sds: Vec<PanelSd>,
    pub report: ExperimentReport,
}

struct TaskOutput {
    records: Vec<EstimateRecord>,
    failures: Vec<FitFailure>,
    panel_sd: PanelSd,
}

fn run_task(spec: &ExperimentSpec, calib: &CalibrationSet, scenario: &Scenario, rep: u64) -> Result<TaskOutput> {
    let ds = scenario.generate(calib, spec.seed, rep)?;
    let (sid, kind) = (scenario.id(), scenario.outcome_kind().to_string());
    let y = ds.panel.outcome();
    let panel_sd =
        PanelSd { scenario: sid.clone(), outcome_kind: kind.clone(), rep, outcome_sd: sample_sd(y.iter().copied()) };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &method in &spec.methods {
        for (omission, setting) in settings_for(method, spec.omission_policy, &ds.spec) {
            match fit_method(method, &ds.panel, &ds.spec, &setting, &spec.method_options, spec.seed ^ rep) {
                Ok(fit) if fit.att_mean.is_finite() && fit.rmspe_pre.is_finite() => {
                    let post_mse = fit.att_series.iter().map(|g| (g - ds.true_tau).powi(2)).sum::<f64>()
                        / fit.att_series.len() as f64;
                    records.push(EstimateRecord {
                        scenario: sid.clone(),
                        outcome_kind: kind.clone(),
                        rep,
                        method,
                        omission,
                        att_mean: fit.att_mean,
                        rmspe_pre: fit.rmspe_pre,
                        bias: fit.att_mean - ds.true_tau,
                        post_mse: Some(post_mse),
                    });
                }
                Ok(_) => failures.push(FitFailure {
                    scenario: sid.clone(),
                    outcome_kind: kind.clone(),
                    rep,
                    method,
                    omission,
                    error: "non-finite estimate".into(),
                }),
                Err(e) => {
                    log::warn!(
                        "{}",
                        serde_json::json!({"event": "fit_failed", "scenario": sid, "rep": rep, "method": method.id(), "omission": omission, "error": e.to_string()})
                    );
                    failures.push(FitFailure {
                        scenario: sid.clone(),
                        outcome_kind: kind.clone(),
                        rep,
                        method,
                        omission,
                        error: e.to_string(),
                    })
                }
            }
        }
    }
    log::info!(
        "{}",
        serde_json::json!({"event": "replication_done", "scenario": sid, "outcome_kind": kind, "rep": rep, "records": records.len(), "failures": failures.len()})
    );
    Ok(TaskOutput { records, failures, panel_sd })
}

/// Runs every (scenario, replication) task on the current rayon pool.
pub fn run_experiment(spec: &ExperimentSpec, calib: &CalibrationSet) -> Result<ExperimentOutput> {
    spec.validate()?;
    let tasks: Vec<(usize, u64)> =
        (0..spec.scenarios.len()).flat_map(|s| (0..spec.replications).map(move |r| (s, r))).collect();
    let outputs: Vec<Result<TaskOutput>> =
        tasks.par_iter().map(|&(s, rep)| run_task(spec, calib, &spec.scenarios[s], rep)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut panel_sds = Vec::new();
    for o in outputs {
        let o = o?;
        records.extend(o.records);
        failures.extend(o.failures);
        panel_sds.push(o.panel_sd);
    }
    let report = build_report(&records, &panel_sds, &failures, &spec.rank_methods, spec.per_period_rmse);
    Ok(ExperimentOutput { records, failures, panel_sds, report })
}

// ---------------------------------------------------------------------------
// metrics

/// `√(mean bias²)` over the given records.
pub fn rmse_over_reps<'a>(records: impl IntoIterator<Item = &'a EstimateRecord>) -> Result<f64> {
    let (mut n, mut ss) = (0usize, 0.0);
    for r in records {
        n += 1;
        ss += r.bias * r.bias;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no records".into()));
    }
    Ok((ss / n as f64).sqrt())
}

/// Sample SD of the estimates across omissions over the outcome SD.
pub fn refcat_sd_ratio(att_means: &[f64], expected_omissions: usize, outcome_sd: f64) -> Result<f64> {
    if att_means.len() != expected_omissions {
        return Err(Error::InvalidInput(format!("expected {expected_omissions} omissions, got {}", att_means.len())));
    }
    if att_means.len() < 2 {
        return Err(Error::InvalidInput("need at least two omissions".into()));
    }
    if !(outcome_sd > 0.0) {
        return Err(Error::Undefined("outcome SD is zero".into()));
    }
    Ok(sample_sd(att_means.iter().copied()) / outcome_sd)
}

/// Average (mid) ranks, 1-based.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of mid-ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("need two equal-length samples of size >= 2".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in rank correlation input".into()));
    }
    let (rx, ry) = (mid_ranks(x), mid_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero rank variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ordinal ranks (0-based), ties broken by position.
fn ordinal_ranks(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; x.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Entry `(i, j)`: share of replications in which the method ranked `i`-th
/// by imbalance ranked `j`-th by absolute bias. Each replication is a list
/// of `(rmspe_pre, |bias|)` in method order; ties go to the earlier method.
pub fn rank_matrix(replications: &[Vec<(f64, f64)>]) -> Result<Vec<Vec<f64>>> {
    let m = replications.first().map(|r| r.len()).ok_or_else(|| Error::InvalidInput("no replications".into()))?;
    if m == 0 || replications.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("every replication needs one record per method".into()));
    }
    let mut counts = vec![vec![0usize; m]; m];
    for rep in replications {
        let imb: Vec<f64> = rep.iter().map(|p| p.0).collect();
        let bias: Vec<f64> = rep.iter().map(|p| p.1).collect();
        let (ri, rb) = (ordinal_ranks(&imb), ordinal_ranks(&bias));
        for k in 0..m {
            counts[ri[k]][rb[k]] += 1;
        }
    }
    let n = replications.len() as f64;
    Ok(counts.into_iter().map(|row| row.into_iter().map(|c| c as f64 / n).collect()).collect())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1Row {
    pub scenario: String,
    pub outcome_kind: String,
    pub method: Method,
    /// Mean over omissions of the RMSE over replications.
    pub rmse: f64,
    pub mean_abs_bias: f64,
    pub per_period_rmse: Option<f64>,
    pub n_records: usize,
    pub n_omissions: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Row {
    pub scenario: String,
    pub outcome_kind: String,
    pub method: Method,
    pub rep: u64,
    pub n_omissions: usize,
    pub sd_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig4Row {
    pub scenario: String,
    pub outcome_kind: String,
    pub family: String,
    /// Method with the lowest pre-period imbalance in these replications.
    pub lowest_imbalance: Method,
    pub share: f64,
    pub method: Method,
    pub mean_abs_bias: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig6Row {
    pub scenario: String,
    pub outcome_kind: String,
    pub method: Method,
    pub n: usize,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig8Row {
    pub scenario: String,
    pub outcome_kind: String,
    pub imbalance_rank: usize,
    pub bias_rank: usize,
    pub proportion: f64,
    pub n_replications: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExperimentReport {
    pub fig1: Vec<Fig1Row>,
    pub fig2: Vec<Fig2Row>,
    pub fig4: Vec<Fig4Row>,
    pub fig6: Vec<Fig6Row>,
    pub fig8: Vec<Fig8Row>,
    pub rank_methods: Vec<Method>,
    pub n_failed: usize,
}

impl ExperimentReport {
    pub fn rmse(&self, scenario: &str, outcome_kind: &str, method: Method) -> Option<f64> {
        self.fig1
            .iter()
            .find(|r| r.scenario == scenario && r.outcome_kind == outcome_kind && r.method == method)
            .map(|r| r.rmse)
    }
}

/// Covariate-handling families compared in the conditional-bias table.
const FAMILIES: [(&str, &[Method]); 3] = [
    ("SYNTH", &[Method::SynthAllcats, Method::SynthNocov]),
    ("AUGSYNTH", &[Method::AugsynthAllcats, Method::AugsynthNocov, Method::AugsynthResid]),
    ("IFE", &[Method::IfeCov, Method::IfeNocov]),
];

fn unique_in_order<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// First record per replication for one method, in replication order.
fn primary<'a>(records: &[&'a EstimateRecord], method: Method) -> Vec<&'a EstimateRecord> {
    let mut out: Vec<&EstimateRecord> = Vec::new();
    for r in records.iter().filter(|r| r.method == method) {
        if !out.iter().any(|o| o.rep == r.rep) {
            out.push(r);
        }
    }
    out.sort_by_key(|r| r.rep);
    out
}

/// Aggregates raw records into the report tables.
pub fn build_report(
    records: &[EstimateRecord],
    panel_sds: &[PanelSd],
    failures: &[FitFailure],
    rank_methods: &[Method],
    per_period: bool,
) -> ExperimentReport {
    let groups = unique_in_order(records.iter().map(|r| (r.scenario.clone(), r.outcome_kind.clone())));
    let mut report =
        ExperimentReport { rank_methods: rank_methods.to_vec(), n_failed: failures.len(), ..Default::default() };
    let mut pooled_ranks: Vec<Vec<(f64, f64)>> = Vec::new();
    for (scenario, kind) in &groups {
        let in_group: Vec<&EstimateRecord> =
            records.iter().filter(|r| &r.scenario == scenario && &r.outcome_kind == kind).collect();
        let methods = unique_in_order(in_group.iter().map(|r| r.method));

        for &m in &methods {
            let recs: Vec<&EstimateRecord> = in_group.iter().copied().filter(|r| r.method == m).collect();
            let omissions = unique_in_order(recs.iter().map(|r| r.omission.clone()));
            let per_omission: Vec<f64> = omissions
                .iter()
                .map(|o| rmse_over_reps(recs.iter().copied().filter(|r| &r.omission == o)).unwrap())
                .collect();
            let per_period_rmse = if per_period {
                let v: Vec<f64> = recs.iter().filter_map(|r| r.post_mse).collect();
                (v.len() == recs.len() && !v.is_empty()).then(|| (v.iter().sum::<f64>() / v.len() as f64).sqrt())
            } else {
                None
            };
            let n_failed =
                failures.iter().filter(|f| &f.scenario == scenario && &f.outcome_kind == kind && f.method == m).count();
            report.fig1.push(Fig1Row {
                scenario: scenario.clone(),
                outcome_kind: kind.clone(),
                method: m,
                rmse: per_omission.iter().sum::<f64>() / per_omission.len() as f64,
                mean_abs_bias: recs.iter().map(|r| r.bias.abs()).sum::<f64>() / recs.len() as f64,
                per_period_rmse,
                n_records: recs.len(),
                n_omissions: omissions.len(),
                n_failed,
            });

            // reference-category spread, only when the method was swept
            if omissions.len() > 1 {
                let reps = unique_in_order(recs.iter().map(|r| r.rep));
                for rep in reps {
                    let atts: Vec<f64> = recs.iter().filter(|r| r.rep == rep).map(|r| r.att_mean).collect();
                    let sd = panel_sds
                        .iter()
                        .find(|p| &p.scenario == scenario && &p.outcome_kind == kind && p.rep == rep)
                        .map(|p| p.outcome_sd);
                    if let Some(ratio) = sd.and_then(|sd| refcat_sd_ratio(&atts, omissions.len(), sd).ok()) {
                        report.fig2.push(Fig2Row {
                            scenario: scenario.clone(),
                            outcome_kind: kind.clone(),
                            method: m,
                            rep,
                            n_omissions: atts.len(),
                            sd_ratio: ratio,
                        });
                    }
                }
            }

            let prim = primary(&in_group, m);
            let xs: Vec<f64> = prim.iter().map(|r| r.rmspe_pre).collect();
            let ys: Vec<f64> = prim.iter().map(|r| r.bias.abs()).collect();
            report.fig6.push(Fig6Row {
                scenario: scenario.clone(),
                outcome_kind: kind.clone(),
                method: m,
                n: prim.len(),
                rho: spearman_rho(&xs, &ys).ok(),
            });
        }

        // conditional bias by lowest-imbalance implementation
        for (family, members) in FAMILIES {
            let present: Vec<Method> = members.iter().copied().filter(|m| methods.contains(m)).collect();
            if present.len() < 2 {
                continue;
            }
            let by_method: Vec<Vec<&EstimateRecord>> = present.iter().map(|&m| primary(&in_group, m)).collect();
            let reps: Vec<u64> = by_method[0]
                .iter()
                .map(|r| r.rep)
                .filter(|rep| by_method.iter().all(|v| v.iter().any(|r| r.rep == *rep)))
                .collect();
            if reps.is_empty() {
                continue;
            }
            let rec = |mi: usize, rep: u64| by_method[mi].iter().find(|r| r.rep == rep).unwrap();
            for (wi, &winner) in present.iter().enumerate() {
                let won: Vec<u64> = reps
                    .iter()
                    .copied()
                    .filter(|&rep| {
                        let imb: Vec<f64> = (0..present.len()).map(|mi| rec(mi, rep).rmspe_pre).collect();
                        ordinal_ranks(&imb)[wi] == 0
                    })
                    .collect();
                if won.is_empty() {
                    continue;
                }
                for (mi, &m) in present.iter().enumerate() {
                    report.fig4.push(Fig4Row {
                        scenario: scenario.clone(),
                        outcome_kind: kind.clone(),
                        family: family.to_string(),
                        lowest_imbalance: winner,
                        share: won.len() as f64 / reps.len() as f64,
                        method: m,
                        mean_abs_bias: won.iter().map(|&rep| rec(mi, rep).bias.abs()).sum::<f64>() / won.len() as f64,
                        n: won.len(),
                    });
                }
            }
        }

        // rank matrix over the rank methods
        if !rank_methods.is_empty() && rank_methods.iter().all(|m| methods.contains(m)) {
            let by_method: Vec<Vec<&EstimateRecord>> = rank_methods.iter().map(|&m| primary(&in_group, m)).collect();
            let reps = unique_in_order(in_group.iter().map(|r| r.rep));
            let rows: Vec<Vec<(f64, f64)>> = reps
                .iter()
                .filter_map(|&rep| {
                    by_method
                        .iter()
                        .map(|v| v.iter().find(|r| r.rep == rep).map(|r| (r.rmspe_pre, r.bias.abs())))
                        .collect::<Option<Vec<_>>>()
                })
                .collect();
            if let Ok(mat) = rank_matrix(&rows) {
                push_rank_rows(&mut report.fig8, scenario, kind, &mat, rows.len());
                pooled_ranks.extend(rows);
            }
        }
    }
    if groups.len() > 1 {
        if let Ok(mat) = rank_matrix(&pooled_ranks) {
            push_rank_rows(&mut report.fig8, "ALL", "ALL", &mat, pooled_ranks.len());
        }
    }
    report
}

fn push_rank_rows(out: &mut Vec<Fig8Row>, scenario: &str, kind: &str, mat: &[Vec<f64>], n: usize) {
    for (i, row) in mat.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            out.push(Fig8Row {
                scenario: scenario.to_string(),
                outcome_kind: kind.to_string(),
                imbalance_rank: i + 1,
                bias_rank: j + 1,
                proportion: p,
                n_replications: n,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// CSV i/o

pub const RECORDS_FILE: &str = "records.csv";
pub const PANEL_SD_FILE: &str = "panel_sd.csv";
pub const FAILURES_FILE: &str = "failures.csv";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

pub fn write_records<W: Write>(records: &[EstimateRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "outcome_kind", "rep", "method", "omission", "att_mean", "rmspe_pre", "bias"])?;
    for r in records {
        out.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            &r.rep.to_string(),
            r.method.id(),
            &r.omission,
            &fmt_f64(r.att_mean),
            &fmt_f64(r.rmspe_pre),
            &fmt_f64(r.bias),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn parse_num<T: FromStr>(s: &str, line: usize, column: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse { line, column: column.into(), message: format!("cannot parse `{s}`") })
}

/// Reads a raw record CSV written by [`write_records`].
pub fn read_records<R: Read>(r: R) -> Result<Vec<EstimateRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != 8 {
            return Err(Error::Parse {
                line,
                column: "*".into(),
                message: format!("expected 8 fields, got {}", row.len()),
            });
        }
        out.push(EstimateRecord {
            scenario: row[0].to_string(),
            outcome_kind: row[1].to_string(),
            rep: parse_num(&row[2], line, "rep")?,
            method: row[3].parse().map_err(|e: Error| Error::Parse {
                line,
                column: "method".into(),
                message: e.to_string(),
            })?,
            omission: row[4].to_string(),
            att_mean: parse_num(&row[5], line, "att_mean")?,
            rmspe_pre: parse_num(&row[6], line, "rmspe_pre")?,
            bias: parse_num(&row[7], line, "bias")?,
            post_mse: None,
        });
    }
    Ok(out)
}

pub fn write_panel_sds<W: Write>(rows: &[PanelSd], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "outcome_kind", "rep", "outcome_sd"])?;
    for r in rows {
        out.write_record([r.scenario.as_str(), &r.outcome_kind, &r.rep.to_string(), &fmt_f64(r.outcome_sd)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_panel_sds<R: Read>(r: R) -> Result<Vec<PanelSd>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        out.push(PanelSd {
            scenario: row[0].to_string(),
            outcome_kind: row[1].to_string(),
            rep: parse_num(&row[2], line, "rep")?,
            outcome_sd: parse_num(&row[3], line, "outcome_sd")?,
        });
    }
    Ok(out)
}

pub fn write_failures<W: Write>(rows: &[FitFailure], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "outcome_kind", "rep", "method", "omission", "error"])?;
    for r in rows {
        out.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            &r.rep.to_string(),
            r.method.id(),
            &r.omission,
            &r.error,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_failures<R: Read>(r: R) -> Result<Vec<FitFailure>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        out.push(FitFailure {
            scenario: row[0].to_string(),
            outcome_kind: row[1].to_string(),
            rep: parse_num(&row[2], line, "rep")?,
            method: row[3].parse().map_err(|e: Error| Error::Parse {
                line,
                column: "method".into(),
                message: e.to_string(),
            })?,
            omission: row[4].to_string(),
            error: row[5].to_string(),
        });
    }
    Ok(out)
}

/// Writes `fig1_rmse.csv` … `fig8_rankmatrix.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let file = |name: &str| -> Result<csv::Writer<std::fs::File>> { Ok(csv::Writer::from_path(dir.join(name))?) };

    let mut w = file("fig1_rmse.csv")?;
    w.write_record([
        "scenario",
        "outcome_kind",
        "method",
        "rmse",
        "mean_abs_bias",
        "per_period_rmse",
        "n_records",
        "n_omissions",
        "n_failed",
    ])?;
    for r in &report.fig1 {
        w.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            r.method.id(),
            &fmt_f64(r.rmse),
            &fmt_f64(r.mean_abs_bias),
            &opt(r.per_period_rmse),
            &r.n_records.to_string(),
            &r.n_omissions.to_string(),
            &r.n_failed.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = file("fig2_refcat.csv")?;
    w.write_record(["scenario", "outcome_kind", "method", "rep", "n_omissions", "sd_ratio"])?;
    for r in &report.fig2 {
        w.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            r.method.id(),
            &r.rep.to_string(),
            &r.n_omissions.to_string(),
            &fmt_f64(r.sd_ratio),
        ])?;
    }
    w.flush()?;

    let mut w = file("fig4_conditional_bias.csv")?;
    w.write_record([
        "scenario",
        "outcome_kind",
        "family",
        "lowest_imbalance",
        "share",
        "method",
        "mean_abs_bias",
        "n",
    ])?;
    for r in &report.fig4 {
        w.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            &r.family,
            r.lowest_imbalance.id(),
            &fmt_f64(r.share),
            r.method.id(),
            &fmt_f64(r.mean_abs_bias),
            &r.n.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = file("fig6_spearman.csv")?;
    w.write_record(["scenario", "outcome_kind", "method", "n", "rho"])?;
    for r in &report.fig6 {
        w.write_record([r.scenario.as_str(), &r.outcome_kind, r.method.id(), &r.n.to_string(), &opt(r.rho)])?;
    }
    w.flush()?;

    let mut w = file("fig8_rankmatrix.csv")?;
    w.write_record([
        "scenario",
        "outcome_kind",
        "imbalance_rank",
        "bias_rank",
        "proportion",
        "n_replications",
        "methods",
    ])?;
    let methods: Vec<&str> = report.rank_methods.iter().map(|m| m.id()).collect();
    let methods = methods.join(";");
    for r in &report.fig8 {
        w.write_record([
            r.scenario.as_str(),
            &r.outcome_kind,
            &r.imbalance_rank.to_string(),
            &r.bias_rank.to_string(),
            &fmt_f64(r.proportion),
            &r.n_replications.to_string(),
            &methods,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes raw records, panel SDs, failures and the report tables into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records(&out.records, std::fs::File::create(dir.join(RECORDS_FILE))?)?;
    write_panel_sds(&out.panel_sds, std::fs::File::create(dir.join(PANEL_SD_FILE))?)?;
    write_failures(&out.failures, std::fs::File::create(dir.join(FAILURES_FILE))?)?;
    write_report(&out.report, dir)
}
