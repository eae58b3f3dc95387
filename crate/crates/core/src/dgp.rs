//! Calibrated panel simulator.
//!
//! Covariates follow a regression chain: industry | year, education |
//! industry, year, race | industry, education, year, and wage | all of
//! those. Compositional links are Dirichlet with `ln α = Xβ + λ_s`; wage is
//! linear-normal. Two outcome models sit on top: LINEAR (contemporaneous
//! covariates) and FACTOR (state pre-treatment covariate means, alone and
//! interacted with year). Year enters every regression rescaled to `[0, 1]`
//! over the simulated horizon.
//!
//! Every replication owns four ChaCha8 streams (coefficients, state
//! offsets, compositions, outcome) seeded from `master_seed ^ rep`, so the
//! LINEAR and FACTOR datasets of one replication share covariate values.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CompositionalSpec, Covariate, PanelData};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming a calibration file to use instead of the
/// built-in default.
pub const CALIBRATION_ENV: &str = "SYNTHLAB_CALIBRATION";

/// The shipped calibration.
pub const DEFAULT_CALIBRATION_JSON: &str = include_str!("../data/default_calibration.json");

/// Tolerance below zero accepted for covariance eigenvalues.
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    /// Diagonal variances.
    Diag(Vec<f64>),
    /// Full symmetric matrix, row-major.
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diag(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Covariance::Full(rows) => {
                DMatrix::from_fn(rows.len(), rows.len(), |r, c| rows[r].get(c).copied().unwrap_or(f64::NAN))
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Covariance::Diag(d) => d.len(),
            Covariance::Full(rows) => rows.len(),
        }
    }

    fn zero(&self) -> Self {
        Covariance::Diag(vec![0.0; self.dim()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Dirichlet,
    Linear,
}

/// One regression in the covariate chain.
///
/// `coef_mean` is `k × p` (categories × predictors); `coef_cov` covers the
/// same coefficients flattened category by category. `state_effects` is
/// `n_states × k`; row 0 belongs to the treated state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateFamily {
    pub name: String,
    pub link: Link,
    /// Output names: the categories, or the single scalar for a linear link.
    pub outputs: Vec<String>,
    pub predictors: Vec<String>,
    pub coef_mean: Vec<Vec<f64>>,
    pub coef_cov: Covariance,
    pub state_effects: Vec<Vec<f64>>,
    pub sigma_lambda: f64,
    #[serde(default)]
    pub residual_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub predictors: Vec<String>,
    pub coef_mean: Vec<f64>,
    pub coef_cov: Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCalibration {
    pub linear: OutcomeModel,
    pub factor: OutcomeModel,
    pub residual_sd: f64,
    /// Outcome SD that scales `TreatmentEffect::SdMultiple`.
    pub reference_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub schema_version: u32,
    #[serde(default)]
    pub description: String,
    pub spec: CompositionalSpec,
    /// Families in simulation order.
    pub families: Vec<CovariateFamily>,
    pub outcome: OutcomeCalibration,
    /// When false, compositions are set to their Dirichlet means.
    #[serde(default = "yes")]
    pub dirichlet_noise: bool,
}

fn yes() -> bool {
    true
}

/// Parsed predictor name: `intercept`, `year`, `<cov>`, `mean:<cov>`, `year*mean:<cov>`.
#[derive(Debug, Clone, PartialEq)]
enum Predictor {
    Intercept,
    Year,
    Current(String),
    Mean(String),
    YearMean(String),
}

impl Predictor {
    fn parse(s: &str) -> Self {
        if s == "intercept" {
            Predictor::Intercept
        } else if s == "year" {
            Predictor::Year
        } else if let Some(c) = s.strip_prefix("year*mean:") {
            Predictor::YearMean(c.to_string())
        } else if let Some(c) = s.strip_prefix("mean:") {
            Predictor::Mean(c.to_string())
        } else {
            Predictor::Current(s.to_string())
        }
    }

    fn covariate(&self) -> Option<&str> {
        match self {
            Predictor::Current(c) | Predictor::Mean(c) | Predictor::YearMean(c) => Some(c),
            _ => None,
        }
    }
}

impl CalibrationSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let calib: Self = serde_json::from_str(text)?;
        calib.validate()?;
        Ok(calib)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// The shipped calibration.
    pub fn default_set() -> Self {
        Self::from_json(DEFAULT_CALIBRATION_JSON).expect("shipped calibration is valid")
    }

    /// `path` if given, else the file named by [`CALIBRATION_ENV`], else the default.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_path(p),
            None => match std::env::var_os(CALIBRATION_ENV) {
                Some(p) => Self::from_path(Path::new(&p)),
                None => Ok(Self::default_set()),
            },
        }
    }

    pub fn n_states(&self) -> usize {
        self.families.iter().map(|f| f.state_effects.len()).min().unwrap_or(0)
    }

    /// Same means, no randomness: zero coefficient covariances, zero
    /// residual SDs, compositions at their Dirichlet means.
    pub fn noiseless(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.families {
            f.coef_cov = f.coef_cov.zero();
            f.residual_sd = 0.0;
        }
        out.outcome.linear.coef_cov = out.outcome.linear.coef_cov.zero();
        out.outcome.factor.coef_cov = out.outcome.factor.coef_cov.zero();
        out.outcome.residual_sd = 0.0;
        out.dirichlet_noise = false;
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Calibration(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let mut known: Vec<String> = Vec::new();
        for f in &self.families {
            let k = f.outputs.len();
            let p = f.predictors.len();
            match f.link {
                Link::Dirichlet => {
                    let Some(g) = self.spec.groups.iter().find(|g| g.name == f.name) else {
                        return bad(format!("family `{}` is not a group of the spec", f.name));
                    };
                    if g.categories != f.outputs {
                        return bad(format!("family `{}` categories differ from the spec", f.name));
                    }
                }
                Link::Linear => {
                    if k != 1 || !self.spec.scalars.contains(&f.outputs[0]) {
                        return bad(format!("linear family `{}` must produce one spec scalar", f.name));
                    }
                    if !(f.residual_sd >= 0.0) {
                        return bad(format!("family `{}`: residual_sd must be >= 0", f.name));
                    }
                }
            }
            for pred in &f.predictors {
                match Predictor::parse(pred) {
                    Predictor::Intercept | Predictor::Year => {}
                    Predictor::Current(c) if known.contains(&c) => {}
                    _ => return bad(format!("family `{}`: predictor `{pred}` is not yet simulated", f.name)),
                }
            }
            if f.coef_mean.len() != k || f.coef_mean.iter().any(|r| r.len() != p) {
                return bad(format!("family `{}`: coef_mean must be {k}x{p}", f.name));
            }
            check_cov(&f.coef_cov, k * p, &f.name)?;
            if f.state_effects.iter().any(|r| r.len() != k) {
                return bad(format!("family `{}`: state_effects rows must have {k} entries", f.name));
            }
            if !(f.sigma_lambda >= 0.0) {
                return bad(format!("family `{}`: sigma_lambda must be >= 0", f.name));
            }
            known.extend(f.outputs.iter().cloned());
        }
        let declared: usize = self.spec.n_categories() + self.spec.scalars.len();
        if known.len() != declared {
            return bad(format!("families produce {} covariates, spec declares {declared}", known.len()));
        }
        for (label, m) in [("linear", &self.outcome.linear), ("factor", &self.outcome.factor)] {
            for pred in &m.predictors {
                let parsed = Predictor::parse(pred);
                if let Some(c) = parsed.covariate() {
                    if !known.iter().any(|k| k == c) {
                        return bad(format!("{label} outcome predictor `{pred}` names an unknown covariate"));
                    }
                }
            }
            if m.coef_mean.len() != m.predictors.len() {
                return bad(format!("{label} outcome: coef_mean length mismatch"));
            }
            check_cov(&m.coef_cov, m.predictors.len(), label)?;
        }
        if !(self.outcome.residual_sd >= 0.0 && self.outcome.reference_sd >= 0.0) {
            return bad("outcome SDs must be >= 0".into());
        }
        Ok(())
    }
}

fn check_cov(cov: &Covariance, dim: usize, label: &str) -> Result<()> {
    if cov.dim() != dim {
        return Err(Error::Calibration(format!("`{label}`: covariance must be {dim}x{dim}")));
    }
    if let Covariance::Full(rows) = cov {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Calibration(format!("`{label}`: covariance rows must have {dim} entries")));
        }
        for r in 0..dim {
            for c in 0..r {
                if (rows[r][c] - rows[c][r]).abs() > 1e-12 * (1.0 + rows[r][c].abs()) {
                    return Err(Error::Calibration(format!("`{label}`: covariance is not symmetric")));
                }
            }
        }
    }
    factor_covariance(&cov.to_matrix()).map(|_| ()).map_err(|e| Error::Calibration(format!("`{label}`: {e}")))
}

/// `L` with `L L' = Σ`, from the symmetric eigen-decomposition.
fn factor_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("covariance must be a finite square matrix".into()));
    }
    let eig = sigma.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -PSD_TOL * scale) {
        return Err(Error::InvalidInput("covariance is not positive semidefinite".into()));
    }
    let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// One multivariate normal draw `η̂ + L z`. A zero covariance returns `η̂` exactly.
pub fn draw_coefficients<R: Rng + ?Sized>(eta_hat: &[f64], sigma: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    if sigma.nrows() != eta_hat.len() {
        return Err(Error::InvalidInput("covariance dimension differs from mean".into()));
    }
    let l = factor_covariance(sigma)?;
    let z = DVector::from_fn(eta_hat.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let shift = l * z;
    Ok(eta_hat.iter().zip(shift.iter()).map(|(m, s)| if *s == 0.0 { *m } else { m + s }).collect())
}

/// One Dirichlet draw via normalized Gamma variates.
pub fn sample_composition<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.len() < 2 || alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidInput(format!("Dirichlet parameters must be finite and positive: {alpha:?}")));
    }
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map(|d| d.sample(rng)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("gamma: {e}")))?;
    let total: f64 = g.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Calibration(format!("degenerate Dirichlet draw for alpha {alpha:?}")));
    }
    g.iter_mut().for_each(|v| *v /= total);
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Overlap {
    FullOverlap,
    TreatmentOffset,
    StateOffset,
    RandomOffset,
}

impl Overlap {
    pub fn id(&self) -> &'static str {
        match self {
            Overlap::FullOverlap => "FULL_OVERLAP",
            Overlap::TreatmentOffset => "TREATMENT_OFFSET",
            Overlap::StateOffset => "STATE_OFFSET",
            Overlap::RandomOffset => "RANDOM_OFFSET",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeKind {
    Linear,
    Factor,
}

impl OutcomeKind {
    pub fn id(&self) -> &'static str {
        match self {
            OutcomeKind::Linear => "LINEAR",
            OutcomeKind::Factor => "FACTOR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentEffect {
    Fixed(f64),
    /// Multiple of the calibration's reference outcome SD.
    SdMultiple(f64),
}

impl Default for TreatmentEffect {
    fn default() -> Self {
        TreatmentEffect::Fixed(0.017)
    }
}

impl TreatmentEffect {
    pub fn resolve(&self, calib: &CalibrationSet) -> f64 {
        match *self {
            TreatmentEffect::Fixed(t) => t,
            TreatmentEffect::SdMultiple(m) => m * calib.outcome.reference_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub overlap: Overlap,
    pub outcome_kind: OutcomeKind,
    pub n_units: usize,
    pub n_periods: usize,
    pub t0: usize,
    pub treatment: TreatmentEffect,
    /// Simulate from [`CalibrationSet::noiseless`].
    pub zero_noise: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            overlap: Overlap::StateOffset,
            outcome_kind: OutcomeKind::Factor,
            n_units: 51,
            n_periods: 100,
            t0: 50,
            treatment: TreatmentEffect::default(),
            zero_noise: false,
        }
    }
}

impl ScenarioConfig {
    pub fn new(overlap: Overlap, outcome_kind: OutcomeKind) -> Self {
        Self { overlap, outcome_kind, ..Self::default() }
    }

    pub fn id(&self) -> String {
        let mut s = self.overlap.id().to_string();
        if self.zero_noise {
            s.push_str("+ZERO_NOISE");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::InvalidInput("n_units must be >= 2".into()));
        }
        if self.t0 == 0 || self.t0 >= self.n_periods {
            return Err(Error::InvalidInput(format!("need 0 < t0 < T, got t0={} T={}", self.t0, self.n_periods)));
        }
        Ok(())
    }
}

/// Independent per-purpose streams for one replication.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub coefficients: ChaCha8Rng,
    pub offsets: ChaCha8Rng,
    pub compositions: ChaCha8Rng,
    pub outcome: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { coefficients: stream(1), offsets: stream(2), compositions: stream(3), outcome: stream(4) }
    }

    pub fn for_replication(master_seed: u64, rep: u64) -> Self {
        Self::new(master_seed ^ rep)
    }
}

/// Simulated covariates plus the drawn regression coefficients and state effects.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDraw {
    pub covariates: Vec<Covariate>,
    pub coefficients: BTreeMap<String, Vec<f64>>,
    pub state_effects: BTreeMap<String, Vec<Vec<f64>>>,
}

fn year_grid(n_periods: usize) -> Vec<f64> {
    if n_periods == 1 {
        return vec![0.0];
    }
    (0..n_periods).map(|t| t as f64 / (n_periods - 1) as f64).collect()
}

fn state_effects_for(
    family: &CovariateFamily,
    scenario: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let k = family.outputs.len();
    let n = scenario.n_units;
    let calibrated = |s: usize| -> Result<Vec<f64>> {
        family.state_effects.get(s).cloned().ok_or_else(|| {
            Error::Calibration(format!(
                "family `{}` has {} state effects, scenario needs {n}",
                family.name,
                family.state_effects.len()
            ))
        })
    };
    Ok(match scenario.overlap {
        Overlap::FullOverlap => vec![vec![0.0; k]; n],
        Overlap::TreatmentOffset => {
            let mut v = vec![vec![0.0; k]; n];
            v[0] = calibrated(0)?;
            v
        }
        Overlap::StateOffset => (0..n).map(calibrated).collect::<Result<_>>()?,
        Overlap::RandomOffset => {
            let sd = family.sigma_lambda / 3.0;
            (0..n).map(|_| (0..k).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        }
    })
}

/// Runs the covariate chain for every unit and period.
pub fn simulate_covariates(
    scenario: &ScenarioConfig,
    calib: &CalibrationSet,
    rng: &mut RngStreams,
) -> Result<CovariateDraw> {
    scenario.validate()?;
    let (n, tt) = (scenario.n_units, scenario.n_periods);
    let years = year_grid(tt);
    let mut values: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    let mut coefficients = BTreeMap::new();
    let mut effects = BTreeMap::new();
    for family in &calib.families {
        let k = family.outputs.len();
        let p = family.predictors.len();
        let mean: Vec<f64> = family.coef_mean.iter().flatten().copied().collect();
        let beta = draw_coefficients(&mean, &family.coef_cov.to_matrix(), &mut rng.coefficients)?;
        let lambda = state_effects_for(family, scenario, &mut rng.offsets)?;
        let preds: Vec<Predictor> = family.predictors.iter().map(|s| Predictor::parse(s)).collect();
        let mut out: Vec<DMatrix<f64>> = vec![DMatrix::zeros(tt, n); k];
        for s in 0..n {
            for t in 0..tt {
                let x: Vec<f64> = preds
                    .iter()
                    .map(|pr| match pr {
                        Predictor::Intercept => 1.0,
                        Predictor::Year => years[t],
                        Predictor::Current(c) => values[c][(t, s)],
                        _ => unreachable!("validated"),
                    })
                    .collect();
                let eta: Vec<f64> =
                    (0..k).map(|c| (0..p).map(|q| beta[c * p + q] * x[q]).sum::<f64>() + lambda[s][c]).collect();
                match family.link {
                    Link::Dirichlet => {
                        let alpha: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
                        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
                            return Err(Error::Calibration(format!(
                                "family `{}`: exp overflow at unit {s}, period {t} (log-alpha {eta:?})",
                                family.name
                            )));
                        }
                        let shares = if calib.dirichlet_noise {
                            sample_composition(&alpha, &mut rng.compositions)?
                        } else {
                            let total: f64 = alpha.iter().sum();
                            alpha.iter().map(|a| a / total).collect()
                        };
                        for c in 0..k {
                            out[c][(t, s)] = shares[c];
                        }
                    }
                    Link::Linear => {
                        let noise = if family.residual_sd > 0.0 {
                            family.residual_sd * rng.compositions.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        out[0][(t, s)] = eta[0] + noise;
                    }
                }
            }
        }
        for (name, m) in family.outputs.iter().zip(out) {
            values.insert(name.clone(), m);
        }
        coefficients.insert(family.name.clone(), beta);
        effects.insert(family.name.clone(), lambda);
    }
    // spec order: scalars, then groups
    let mut covariates = Vec::new();
    for s in &calib.spec.scalars {
        covariates.push(Covariate { name: s.clone(), values: values[s].clone() });
    }
    for g in &calib.spec.groups {
        for c in &g.categories {
            covariates.push(Covariate { name: c.clone(), values: values[c].clone() });
        }
    }
    Ok(CovariateDraw { covariates, coefficients, state_effects: effects })
}

/// Untreated outcomes with their coefficient and noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDraw {
    /// `T × N`.
    pub outcome: DMatrix<f64>,
    pub coefficients: Vec<f64>,
    /// `T × N` residuals added to the linear predictor.
    pub noise: DMatrix<f64>,
}

/// Value of every outcome predictor for one unit and period.
pub fn outcome_predictors(
    model: &OutcomeModel,
    covariates: &[Covariate],
    t0: usize,
    unit: usize,
    t: usize,
    year: f64,
) -> Result<Vec<f64>> {
    let find = |c: &str| -> Result<&DMatrix<f64>> {
        covariates
            .iter()
            .find(|cv| cv.name == c)
            .map(|cv| &cv.values)
            .ok_or_else(|| Error::InvalidPanel(format!("missing covariate `{c}`")))
    };
    let pre_mean = |m: &DMatrix<f64>| (0..t0).map(|r| m[(r, unit)]).sum::<f64>() / t0 as f64;
    model
        .predictors
        .iter()
        .map(|p| {
            Ok(match Predictor::parse(p) {
                Predictor::Intercept => 1.0,
                Predictor::Year => year,
                Predictor::Current(c) => find(&c)?[(t, unit)],
                Predictor::Mean(c) => pre_mean(find(&c)?),
                Predictor::YearMean(c) => year * pre_mean(find(&c)?),
            })
        })
        .collect()
}

pub fn simulate_outcome(
    covariates: &[Covariate],
    kind: OutcomeKind,
    calib: &CalibrationSet,
    t0: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OutcomeDraw> {
    let (tt, n) =
        covariates.first().map(|c| c.values.shape()).ok_or_else(|| Error::InvalidInput("no covariates".into()))?;
    if t0 == 0 || t0 > tt {
        return Err(Error::InvalidInput(format!("t0 {t0} outside 1..={tt}")));
    }
    let model = match kind {
        OutcomeKind::Linear => &calib.outcome.linear,
        OutcomeKind::Factor => &calib.outcome.factor,
    };
    let beta = draw_coefficients(&model.coef_mean, &model.coef_cov.to_matrix(), rng)?;
    let years = year_grid(tt);
    let sd = calib.outcome.residual_sd;
    let mut outcome = DMatrix::zeros(tt, n);
    let mut noise = DMatrix::zeros(tt, n);
    for s in 0..n {
        for t in 0..tt {
            let x = outcome_predictors(model, covariates, t0, s, t, years[t])?;
            let e = if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            noise[(t, s)] = e;
            outcome[(t, s)] = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + e;
        }
    }
    Ok(OutcomeDraw { outcome, coefficients: beta, noise })
}

/// A simulated panel with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub panel: PanelData,
    pub spec: CompositionalSpec,
    pub true_tau: f64,
    /// Treated unit's untreated outcome path.
    pub counterfactual: Vec<f64>,
    /// Drawn coefficient realizations, keyed by family (`outcome` for the outcome model).
    pub coefficients: BTreeMap<String, Vec<f64>>,
}

/// Adds `tau` to the treated unit after `t0`; the counterfactual is left untouched.
pub fn inject_treatment(dataset: &SimulatedDataset, tau: f64) -> Result<SimulatedDataset> {
    if !tau.is_finite() {
        return Err(Error::InvalidInput("treatment effect must be finite".into()));
    }
    let p = &dataset.panel;
    let mut y = p.outcome().clone();
    for t in p.t0()..p.n_periods() {
        y[(t, 0)] = dataset.counterfactual[t] + tau;
    }
    Ok(SimulatedDataset { panel: p.with_outcome(y)?, true_tau: tau, ..dataset.clone() })
}

fn unit_ids(n: usize) -> Vec<String> {
    std::iter::once("treated".to_string()).chain((1..n).map(|i| format!("donor{i:02}"))).collect()
}

/// Full dataset for one scenario and replication.
pub fn simulate(
    scenario: &ScenarioConfig,
    calib: &CalibrationSet,
    master_seed: u64,
    rep: u64,
) -> Result<SimulatedDataset> {
    let noiseless;
    let calib = if scenario.zero_noise {
        noiseless = calib.noiseless();
        &noiseless
    } else {
        calib
    };
    let mut rng = RngStreams::for_replication(master_seed, rep);
    let cov = simulate_covariates(scenario, calib, &mut rng)?;
    let out = simulate_outcome(&cov.covariates, scenario.outcome_kind, calib, scenario.t0, &mut rng.outcome)?;
    let panel = PanelData::new(
        unit_ids(scenario.n_units),
        (1..=scenario.n_periods as i64).collect(),
        out.outcome.clone(),
        scenario.t0,
        cov.covariates,
    )?;
    let counterfactual = (0..scenario.n_periods).map(|t| out.outcome[(t, 0)]).collect();
    let mut coefficients = cov.coefficients;
    coefficients.insert("outcome".into(), out.coefficients);
    let base = SimulatedDataset { panel, spec: calib.spec.clone(), true_tau: 0.0, counterfactual, coefficients };
    inject_treatment(&base, scenario.treatment.resolve(calib))
}

/// One pre-period; treated level 1, donors level 0, unit-variance noise, no effect.
pub fn toy_overfit_scenario<R: Rng + ?Sized>(
    n_controls: usize,
    t_post: usize,
    rng: &mut R,
) -> Result<SimulatedDataset> {
    if n_controls == 0 || t_post == 0 {
        return Err(Error::InvalidInput("need at least one control and one post period".into()));
    }
    let tt = 1 + t_post;
    let n = n_controls + 1;
    let mut y = DMatrix::zeros(tt, n);
    for s in 0..n {
        let level = if s == 0 { 1.0 } else { 0.0 };
        for t in 0..tt {
            y[(t, s)] = level + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let counterfactual = (0..tt).map(|t| y[(t, 0)]).collect();
    let panel = PanelData::new(unit_ids(n), (0..tt as i64).collect(), y, 1, vec![])?;
    Ok(SimulatedDataset {
        panel,
        spec: CompositionalSpec::default(),
        true_tau: 0.0,
        counterfactual,
        coefficients: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eta = [0.3, -1.25, 7.0];
        let d = draw_coefficients(&eta, &DMatrix::zeros(3, 3), &mut rng).unwrap();
        assert_eq!(d, eta.to_vec());
    }

    #[test]
    fn coefficient_draws_have_the_right_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eta = [1.0, -2.0];
        let var = [0.25, 4.0];
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&var));
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let d = draw_coefficients(&eta, &sigma, &mut rng).unwrap();
            sum[0] += d[0];
            sum[1] += d[1];
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            assert!((mean - eta[k]).abs() <= 4.0 * var[k].sqrt() / (n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn coefficient_draws_are_seeded() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let a = draw_coefficients(&[0.0, 0.0], &sigma, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = draw_coefficients(&[0.0, 0.0], &sigma, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(draw_coefficients(&[0.0, 0.0], &sigma, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        // rank-deficient but PSD is fine
        let psd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(draw_coefficients(&[0.0, 0.0], &psd, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn symmetric_dirichlet_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let s = sample_composition(&[1.0, 1.0, 1.0], &mut rng).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(s.iter().all(|v| *v > 0.0));
            for k in 0..3 {
                sum[k] += s[k];
            }
        }
        for v in sum {
            assert!((v / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn lopsided_dirichlet_concentrates() {
        // first share ~ Beta(1000, 1): P(X <= 0.98) = 0.98^1000 ≈ 1.7e-9
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hits = (0..10_000).filter(|_| sample_composition(&[1000.0, 1.0], &mut rng).unwrap()[0] > 0.98).count();
        assert!(hits as f64 / 10_000.0 > 0.99);
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_composition(&[1.0, 0.0], &mut rng).is_err());
        assert!(sample_composition(&[1.0, -1.0], &mut rng).is_err());
        assert!(sample_composition(&[f64::NAN, 1.0], &mut rng).is_err());
    }

    #[test]
    fn shipped_calibration_is_valid() {
        let c = CalibrationSet::default_set();
        let sizes: Vec<usize> = c.spec.groups.iter().map(|g| g.categories.len()).collect();
        assert_eq!(sizes, vec![3, 4, 5]);
        assert_eq!(c.spec.scalars, vec!["wage".to_string()]);
        assert!(c.n_states() >= 51);
        let back: CalibrationSet = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn calibration_validation_catches_shape_errors() {
        let mut c = CalibrationSet::default_set();
        c.families[0].coef_mean[0].pop();
        assert!(matches!(c.validate(), Err(Error::Calibration(_))));
        let mut c = CalibrationSet::default_set();
        c.schema_version = 99;
        assert!(c.validate().is_err());
        let mut c = CalibrationSet::default_set();
        c.outcome.linear.predictors[1] = "no_such".into();
        assert!(c.validate().is_err());
    }

    fn small(overlap: Overlap) -> ScenarioConfig {
        ScenarioConfig { n_units: 8, n_periods: 12, t0: 6, ..ScenarioConfig::new(overlap, OutcomeKind::Linear) }
    }

    #[test]
    fn compositions_close_and_runs_repeat() {
        let calib = CalibrationSet::default_set();
        let a = simulate(&small(Overlap::RandomOffset), &calib, 42, 3).unwrap();
        a.panel.validate_composition(&a.spec).unwrap();
        let b = simulate(&small(Overlap::RandomOffset), &calib, 42, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate(&small(Overlap::RandomOffset), &calib, 42, 4).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn paired_outcomes_share_covariates() {
        let calib = CalibrationSet::default_set();
        let lin = simulate(&small(Overlap::StateOffset), &calib, 9, 0).unwrap();
        let fac_cfg = ScenarioConfig { outcome_kind: OutcomeKind::Factor, ..small(Overlap::StateOffset) };
        let fac = simulate(&fac_cfg, &calib, 9, 0).unwrap();
        assert_eq!(lin.panel.covariates(), fac.panel.covariates());
        assert_ne!(lin.panel.outcome(), fac.panel.outcome());
    }

    #[test]
    fn treatment_offset_without_treated_effect_matches_full_overlap() {
        let mut calib = CalibrationSet::default_set();
        for f in &mut calib.families {
            f.state_effects[0].iter_mut().for_each(|v| *v = 0.0);
        }
        let a = simulate(&small(Overlap::TreatmentOffset), &calib, 5, 1).unwrap();
        let b = simulate(&small(Overlap::FullOverlap), &calib, 5, 1).unwrap();
        assert_eq!(a.panel, b.panel);
    }

    #[test]
    fn random_offsets_have_a_third_of_sigma_lambda() {
        let calib = CalibrationSet::default_set();
        let fam = &calib.families[0];
        let scenario = ScenarioConfig { n_units: 2, ..small(Overlap::RandomOffset) };
        let mut draws = Vec::new();
        for seed in 0..5_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = state_effects_for(fam, &scenario, &mut rng).unwrap();
            draws.extend(e.into_iter().flatten());
        }
        let sd = crate::panel::sample_sd(draws.iter().copied());
        let target = fam.sigma_lambda / 3.0;
        assert!((sd / target - 1.0).abs() < 0.02, "{sd} vs {target}");
    }

    #[test]
    fn full_overlap_treated_and_donors_share_a_law() {
        let calib = CalibrationSet::default_set();
        let cfg = ScenarioConfig { n_units: 6, n_periods: 4, t0: 2, ..small(Overlap::FullOverlap) };
        let names: Vec<String> = calib
            .spec
            .scalars
            .iter()
            .cloned()
            .chain(calib.spec.groups.iter().flat_map(|g| g.categories.clone()))
            .collect();
        for name in &names {
            let (mut t, mut d) = (Vec::new(), Vec::new());
            for rep in 0..200 {
                let ds = simulate(&cfg, &calib, 77, rep).unwrap();
                let m = ds.panel.covariate(name).unwrap();
                t.push(m[(0, 0)]);
                d.push(m[(0, 1)]);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let se = ((crate::panel::sample_sd(t.iter().copied()).powi(2)
                + crate::panel::sample_sd(d.iter().copied()).powi(2))
                / 200.0)
                .sqrt();
            assert!((mean(&t) - mean(&d)).abs() <= 4.0 * se + 1e-15, "{name}");
        }
    }

    #[test]
    fn noiseless_full_overlap_gives_one_path() {
        let calib = CalibrationSet::default_set();
        let cfg =
            ScenarioConfig { zero_noise: true, treatment: TreatmentEffect::Fixed(0.0), ..small(Overlap::FullOverlap) };
        let ds = simulate(&cfg, &calib, 1, 0).unwrap();
        let y = ds.panel.outcome();
        for t in 0..y.nrows() {
            for s in 1..y.ncols() {
                assert_eq!(y[(t, s)], y[(t, 0)]);
            }
        }
    }

    #[test]
    fn factor_without_interactions_gives_parallel_paths() {
        let mut calib = CalibrationSet::default_set();
        let m = &mut calib.outcome.factor;
        for (p, b) in m.predictors.iter().zip(m.coef_mean.iter_mut()) {
            if p.starts_with("year*") {
                *b = 0.0;
            }
        }
        m.coef_cov = m.coef_cov.zero();
        calib.outcome.residual_sd = 0.0;
        let cfg = ScenarioConfig { outcome_kind: OutcomeKind::Factor, ..small(Overlap::StateOffset) };
        let ds = simulate(&cfg, &calib, 2, 0).unwrap();
        let y = ds.panel.outcome();
        for s in 1..y.ncols() {
            let gap0 = y[(0, s)] - y[(0, 1)];
            for t in 1..y.nrows() {
                assert!((y[(t, s)] - y[(t, 1)] - gap0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_outcome_recomputes_from_logged_draws() {
        let calib = CalibrationSet::default_set();
        let cfg = small(Overlap::StateOffset);
        let mut rng = RngStreams::new(13);
        let cov = simulate_covariates(&cfg, &calib, &mut rng).unwrap();
        let out = simulate_outcome(&cov.covariates, OutcomeKind::Linear, &calib, cfg.t0, &mut rng.outcome).unwrap();
        // hand-computed linear predictor from named covariates
        let model = &calib.outcome.linear;
        let years = year_grid(cfg.n_periods);
        for s in 0..cfg.n_units {
            for t in 0..cfg.n_periods {
                let mut xb = 0.0;
                for (name, b) in model.predictors.iter().zip(&out.coefficients) {
                    let x = match name.as_str() {
                        "intercept" => 1.0,
                        "year" => years[t],
                        c => cov.covariates.iter().find(|cv| cv.name == c).unwrap().values[(t, s)],
                    };
                    xb += x * b;
                }
                assert!((out.outcome[(t, s)] - xb - out.noise[(t, s)]).abs() < 1e-14);
            }
        }
        // noise reproduces from the same stream
        let mut again = RngStreams::new(13);
        let cov2 = simulate_covariates(&cfg, &calib, &mut again).unwrap();
        let out2 = simulate_outcome(&cov2.covariates, OutcomeKind::Linear, &calib, cfg.t0, &mut again.outcome).unwrap();
        assert_eq!(out.noise, out2.noise);
    }

    #[test]
    fn treatment_injection_identity() {
        let calib = CalibrationSet::default_set();
        let ds = simulate(&small(Overlap::StateOffset), &calib, 3, 0).unwrap();
        assert_eq!(ds.true_tau, 0.017);
        let p = &ds.panel;
        for t in 0..p.n_periods() {
            let gap = p.outcome()[(t, 0)] - ds.counterfactual[t];
            let expect = if t >= p.t0() { 0.017 } else { 0.0 };
            assert!((gap - expect).abs() < 1e-15);
        }
        let zero = inject_treatment(&ds, 0.0).unwrap();
        for t in 0..p.n_periods() {
            assert_eq!(zero.panel.outcome()[(t, 0)], ds.counterfactual[t]);
        }
        assert!(inject_treatment(&ds, f64::NAN).is_err());
    }

    #[test]
    fn sd_multiple_resolves_against_reference_sd() {
        let mut calib = CalibrationSet::default_set();
        calib.outcome.reference_sd = 0.009;
        assert!((TreatmentEffect::SdMultiple(2.0).resolve(&calib) - 0.018).abs() < 1e-15);
    }

    #[test]
    fn toy_scenario_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = toy_overfit_scenario(20, 5, &mut rng).unwrap();
        assert_eq!(ds.panel.t0(), 1);
        assert_eq!(ds.panel.n_units(), 21);
        assert_eq!(ds.panel.n_periods(), 6);
        assert_eq!(ds.true_tau, 0.0);
        assert_eq!(ds.counterfactual, ds.panel.treated_path());
    }

    #[test]
    fn toy_scenario_treated_minus_donors_is_one() {
        // mean over many draws of treated minus a fixed donor mix, post period
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reps = 20_000;
        let mut total = 0.0;
        for _ in 0..reps {
            let ds = toy_overfit_scenario(3, 1, &mut rng).unwrap();
            let y = ds.panel.outcome();
            total += y[(1, 0)] - (0.5 * y[(1, 1)] + 0.25 * y[(1, 2)] + 0.25 * y[(1, 3)]);
        }
        let mean = total / reps as f64;
        // sd of the difference is sqrt(1 + 0.375)
        assert!((mean - 1.0).abs() < 4.0 * (1.375f64 / reps as f64).sqrt());
    }
}
