//! Panel data model, compositional covariate bookkeeping and the
//! treated/donor predictor matrices consumed by every estimator.
//!
//! Layout conventions:
//!
//! - outcomes and covariates are stored as `T × N` matrices (rows are
//!   periods, columns are units);
//! - the treated unit is always column 0, donors are columns `1..N`;
//! - `t0` counts pre-treatment periods, so rows `0..t0` are pre-treatment.
//!
//! Design columns are ordered as scalar covariates, then the categories of
//! each compositional group (in declaration order, minus the omitted one),
//! then the pre-treatment outcome summaries. V-weight vectors therefore line
//! up across runs that share a spec.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the "categories sum to one" closure check.
pub const CLOSURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    /// `T × N` values.
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    unit_ids: Vec<String>,
    times: Vec<i64>,
    outcome: DMatrix<f64>,
    t0: usize,
    covariates: Vec<Covariate>,
}

impl PanelData {
    /// Builds a panel, treating the first unit as the treated one.
    pub fn new(
        unit_ids: Vec<String>,
        times: Vec<i64>,
        outcome: DMatrix<f64>,
        t0: usize,
        covariates: Vec<Covariate>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t = times.len();
        if n < 2 {
            return Err(Error::EmptyDonorPool);
        }
        if outcome.nrows() != t || outcome.ncols() != n {
            return Err(Error::InvalidPanel(format!(
                "outcome is {}x{}, expected {t}x{n}",
                outcome.nrows(),
                outcome.ncols()
            )));
        }
        if t0 < 1 || t0 >= t {
            return Err(Error::InvalidPanel(format!("t0 = {t0} must satisfy 1 <= t0 < T = {t}")));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPanel("times must be strictly increasing".into()));
        }
        let mut seen = HashSet::new();
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate unit id `{id}`")));
            }
        }
        if outcome.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPanel("outcome contains missing or non-finite values".into()));
        }
        let mut names = HashSet::new();
        for c in &covariates {
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate covariate `{}`", c.name)));
            }
            if c.values.nrows() != t || c.values.ncols() != n {
                return Err(Error::InvalidPanel(format!("covariate `{}` has wrong shape", c.name)));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPanel(format!("covariate `{}` has missing values", c.name)));
            }
        }
        Ok(Self { unit_ids, times, outcome, t0, covariates })
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_donors(&self) -> usize {
        self.unit_ids.len() - 1
    }

    pub fn n_periods(&self) -> usize {
        self.times.len()
    }

    pub fn n_post(&self) -> usize {
        self.times.len() - self.t0
    }

    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.covariates.iter().find(|c| c.name == name).map(|c| &c.values)
    }

    pub fn treated_path(&self) -> Vec<f64> {
        self.outcome.column(0).iter().copied().collect()
    }

    /// Same panel with a different outcome matrix (used for treatment injection).
    pub fn with_outcome(&self, outcome: DMatrix<f64>) -> Result<Self> {
        Self::new(self.unit_ids.clone(), self.times.clone(), outcome, self.t0, self.covariates.clone())
    }

    /// Same data with a different last pre-treatment period.
    pub fn with_t0(&self, t0: usize) -> Result<Self> {
        Self::new(self.unit_ids.clone(), self.times.clone(), self.outcome.clone(), t0, self.covariates.clone())
    }

    /// Checks that every group in `spec` is present and closed for every (unit, time).
    pub fn validate_composition(&self, spec: &CompositionalSpec) -> Result<()> {
        for name in &spec.scalars {
            if self.covariate(name).is_none() {
                return Err(Error::InvalidPanel(format!("missing scalar covariate `{name}`")));
            }
        }
        for g in &spec.groups {
            let cols = g
                .categories
                .iter()
                .map(|c| self.covariate(c).ok_or_else(|| Error::InvalidPanel(format!("missing category column `{c}`"))))
                .collect::<Result<Vec<_>>>()?;
            for t in 0..self.n_periods() {
                for i in 0..self.n_units() {
                    let total: f64 = cols.iter().map(|m| m[(t, i)]).sum();
                    if (total - 1.0).abs() > CLOSURE_TOL {
                        return Err(Error::InvalidPanel(format!(
                            "group `{}` sums to {total} for unit `{}` at time {}",
                            g.name, self.unit_ids[i], self.times[t]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the long CSV layout `unit,time,outcome,<covariate...>`.
    ///
    /// The first unit to appear is the treated unit unless `treated` names
    /// another one. `t0` is the last pre-treatment *time value*.
    pub fn from_csv_reader<R: Read>(reader: R, t0: i64, treated: Option<&str>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expect = ["unit", "time", "outcome"];
        for (i, name) in expect.iter().enumerate() {
            if headers.get(i) != Some(*name) {
                return Err(Error::Parse {
                    line: 1,
                    column: headers.get(i).unwrap_or("").to_string(),
                    message: format!("header column {} must be `{name}`", i + 1),
                });
            }
        }
        let cov_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();

        let mut units: Vec<String> = Vec::new();
        let mut unit_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut cells: BTreeMap<(usize, i64), (f64, Vec<f64>)> = BTreeMap::new();
        let mut time_set = std::collections::BTreeSet::new();

        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            let unit = rec[0].to_string();
            let time: i64 = rec[1].parse().map_err(|_| Error::Parse {
                line,
                column: "time".into(),
                message: format!("`{}` is not an integer", &rec[1]),
            })?;
            let parse = |idx: usize| -> Result<f64> {
                let raw = &rec[idx];
                raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    column: headers[idx].to_string(),
                    message: format!("`{raw}` is not a finite number"),
                })
            };
            let y = parse(2)?;
            let covs = (3..rec.len()).map(parse).collect::<Result<Vec<_>>>()?;
            let idx = *unit_index.entry(unit.clone()).or_insert_with(|| {
                units.push(unit.clone());
                units.len() - 1
            });
            time_set.insert(time);
            if cells.insert((idx, time), (y, covs)).is_some() {
                return Err(Error::Parse {
                    line,
                    column: "time".into(),
                    message: format!("duplicate row for unit `{unit}` at time {time}"),
                });
            }
        }

        if let Some(label) = treated {
            let pos = units
                .iter()
                .position(|u| u == label)
                .ok_or_else(|| Error::InvalidInput(format!("treated unit `{label}` not found")))?;
            let u = units.remove(pos);
            units.insert(0, u);
        }
        let order: Vec<usize> = units.iter().map(|u| unit_index[u]).collect();
        let times: Vec<i64> = time_set.into_iter().collect();
        let (t, n) = (times.len(), units.len());
        let mut outcome = DMatrix::zeros(t, n);
        let mut cov_vals = vec![DMatrix::zeros(t, n); cov_names.len()];
        for (col, &src) in order.iter().enumerate() {
            for (row, &time) in times.iter().enumerate() {
                let (y, covs) = cells.get(&(src, time)).ok_or_else(|| {
                    Error::InvalidPanel(format!("unbalanced panel: unit `{}` has no row at time {time}", units[col]))
                })?;
                outcome[(row, col)] = *y;
                for (k, v) in covs.iter().enumerate() {
                    cov_vals[k][(row, col)] = *v;
                }
            }
        }
        let t0_count = times.iter().filter(|&&x| x <= t0).count();
        let covariates = cov_names.into_iter().zip(cov_vals).map(|(name, values)| Covariate { name, values }).collect();
        Self::new(units, times, outcome, t0_count, covariates)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string(), "time".to_string(), "outcome".to_string()];
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (i, unit) in self.unit_ids.iter().enumerate() {
            for (t, time) in self.times.iter().enumerate() {
                let mut row = vec![unit.clone(), time.to_string(), fmt_f64(self.outcome[(t, i)])];
                row.extend(self.covariates.iter().map(|c| fmt_f64(c.values[(t, i)])));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionalGroup {
    pub name: String,
    pub categories: Vec<String>,
}

/// Which covariates are compositional groups and which are plain scalars.
///
/// JSON form: `{"groups": {"race": ["white", "black", "other"]}, "scalars": ["wage"]}`.
/// Group order in the file is preserved.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "SpecFile", into = "SpecFile")]
pub struct CompositionalSpec {
    pub groups: Vec<CompositionalGroup>,
    pub scalars: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    #[serde(default)]
    groups: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    scalars: Vec<String>,
}

impl TryFrom<SpecFile> for CompositionalSpec {
    type Error = Error;

    fn try_from(file: SpecFile) -> Result<Self> {
        let groups = file
            .groups
            .into_iter()
            .map(|(name, cats)| {
                let categories: Vec<String> =
                    serde_json::from_value(cats).map_err(|e| Error::InvalidSpec(format!("group `{name}`: {e}")))?;
                Ok(CompositionalGroup { name, categories })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups, file.scalars)
    }
}

impl From<CompositionalSpec> for SpecFile {
    fn from(spec: CompositionalSpec) -> Self {
        let groups = spec.groups.into_iter().map(|g| (g.name, serde_json::Value::from(g.categories))).collect();
        SpecFile { groups, scalars: spec.scalars }
    }
}

impl CompositionalSpec {
    pub fn new(groups: Vec<CompositionalGroup>, scalars: Vec<String>) -> Result<Self> {
        let mut all = HashSet::new();
        for s in &scalars {
            if !all.insert(s.clone()) {
                return Err(Error::InvalidSpec(format!("duplicate covariate `{s}`")));
            }
        }
        for g in &groups {
            if g.categories.len() < 2 {
                return Err(Error::InvalidSpec(format!("group `{}` needs at least 2 categories", g.name)));
            }
            for c in &g.categories {
                if !all.insert(c.clone()) {
                    return Err(Error::InvalidSpec(format!("duplicate category `{c}` in group `{}`", g.name)));
                }
            }
        }
        Ok(Self { groups, scalars })
    }

    /// Convenience constructor from string slices.
    pub fn from_parts(groups: &[(&str, &[&str])], scalars: &[&str]) -> Result<Self> {
        Self::new(
            groups
                .iter()
                .map(|(name, cats)| CompositionalGroup {
                    name: name.to_string(),
                    categories: cats.iter().map(|c| c.to_string()).collect(),
                })
                .collect(),
            scalars.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty() && self.scalars.is_empty()
    }

    /// Total number of compositional categories.
    pub fn n_categories(&self) -> usize {
        self.groups.iter().map(|g| g.categories.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Omission {
    Category(String),
    AllCategories,
}

/// One omission decision per group of a [`CompositionalSpec`], in group order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OmissionChoice(pub Vec<Omission>);

impl OmissionChoice {
    /// Keep every category of every group.
    pub fn all_categories(spec: &CompositionalSpec) -> Self {
        Self(vec![Omission::AllCategories; spec.groups.len()])
    }

    /// Omit the first category of every group.
    pub fn first(spec: &CompositionalSpec) -> Self {
        Self(spec.groups.iter().map(|g| Omission::Category(g.categories[0].clone())).collect())
    }

    pub fn validate(&self, spec: &CompositionalSpec) -> Result<()> {
        if self.0.len() != spec.groups.len() {
            return Err(Error::InvalidInput(format!(
                "omission choice has {} entries for {} groups",
                self.0.len(),
                spec.groups.len()
            )));
        }
        for (g, o) in spec.groups.iter().zip(&self.0) {
            if let Omission::Category(c) = o {
                if !g.categories.contains(c) {
                    return Err(Error::UnknownCategory { group: g.name.clone(), category: c.clone() });
                }
            }
        }
        Ok(())
    }

    /// Stable text id, e.g. `race=white;education=hs`, or `ALL` when nothing is omitted.
    pub fn id(&self, spec: &CompositionalSpec) -> String {
        if self.0.iter().all(|o| *o == Omission::AllCategories) {
            return "ALL".to_string();
        }
        spec.groups
            .iter()
            .zip(&self.0)
            .map(|(g, o)| match o {
                Omission::Category(c) => format!("{}={c}", g.name),
                Omission::AllCategories => format!("{}=*", g.name),
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Inverse of [`OmissionChoice::id`]. Groups not mentioned keep all categories.
    pub fn parse(spec: &CompositionalSpec, text: &str) -> Result<Self> {
        let mut out = Self::all_categories(spec);
        if text.trim() == "ALL" || text.trim().is_empty() {
            return Ok(out);
        }
        for part in text.split([';', ',']) {
            let (group, cat) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("omission `{part}` is not group=category")))?;
            let gi = spec
                .groups
                .iter()
                .position(|g| g.name == group.trim())
                .ok_or_else(|| Error::InvalidInput(format!("unknown group `{group}`")))?;
            out.0[gi] = match cat.trim() {
                "*" => Omission::AllCategories,
                c => Omission::Category(c.to_string()),
            };
        }
        out.validate(spec)?;
        Ok(out)
    }
}

/// Every combination of one omitted category per group, first group varying slowest.
pub fn enumerate_omissions(spec: &CompositionalSpec) -> Vec<OmissionChoice> {
    let mut out = vec![Vec::new()];
    for g in &spec.groups {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<Omission>| {
                g.categories.iter().map(move |c| {
                    let mut next = prefix.clone();
                    next.push(Omission::Category(c.clone()));
                    next
                })
            })
            .collect();
    }
    out.into_iter().map(OmissionChoice).collect()
}

/// Names of the covariates kept under `omit`, in design-column order.
pub fn covariate_names(spec: &CompositionalSpec, omit: &OmissionChoice) -> Result<Vec<String>> {
    omit.validate(spec)?;
    let mut names = spec.scalars.clone();
    for (g, o) in spec.groups.iter().zip(&omit.0) {
        for c in &g.categories {
            if *o != Omission::Category(c.clone()) {
                names.push(c.clone());
            }
        }
    }
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Scalar,
    Category { group: String },
    OutcomeSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Which linear combinations of pre-treatment outcomes enter the design.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutcomeSummaries {
    /// Mean over all pre-treatment periods.
    #[default]
    PreMean,
    /// Means over zero-based, half-open blocks of pre-treatment periods.
    BlockMeans(Vec<Range<usize>>),
}

/// Treated predictor vector `x1` (k) and donor predictor matrix `x0` (k × J).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x1: DVector<f64>,
    pub x0: DMatrix<f64>,
    pub columns: Vec<DesignColumn>,
}

impl DesignMatrices {
    pub fn new(x1: DVector<f64>, x0: DMatrix<f64>, columns: Vec<DesignColumn>) -> Result<Self> {
        if x0.ncols() == 0 {
            return Err(Error::EmptyDonorPool);
        }
        if x1.len() != x0.nrows() || columns.len() != x1.len() {
            return Err(Error::InvalidInput(format!(
                "design shape mismatch: x1 {}, x0 {}x{}, {} column names",
                x1.len(),
                x0.nrows(),
                x0.ncols(),
                columns.len()
            )));
        }
        Ok(Self { x1, x0, columns })
    }

    /// Unnamed scalar columns, handy for small hand-built problems.
    pub fn from_rows(x1: &[f64], x0_rows: &[&[f64]]) -> Result<Self> {
        let k = x1.len();
        let j = x0_rows.first().map_or(0, |r| r.len());
        if x0_rows.len() != k || x0_rows.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidInput("ragged design rows".into()));
        }
        let x0 = DMatrix::from_fn(k, j, |r, c| x0_rows[r][c]);
        let columns = (0..k).map(|i| DesignColumn { name: format!("x{}", i + 1), kind: ColumnKind::Scalar }).collect();
        Self::new(DVector::from_column_slice(x1), x0, columns)
    }

    pub fn n_features(&self) -> usize {
        self.x1.len()
    }

    pub fn n_donors(&self) -> usize {
        self.x0.ncols()
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// `k × N` matrix of all units, treated first.
    pub fn all_units(&self) -> DMatrix<f64> {
        let (k, j) = self.x0.shape();
        DMatrix::from_fn(k, j + 1, |r, c| if c == 0 { self.x1[r] } else { self.x0[(r, c - 1)] })
    }

    /// Indices of the non-outcome columns.
    pub fn covariate_rows(&self) -> Vec<usize> {
        self.columns.iter().enumerate().filter(|(_, c)| c.kind != ColumnKind::OutcomeSummary).map(|(i, _)| i).collect()
    }

    /// Each variable divided by its sample SD across all units (treated and
    /// donors). Constant variables are left unscaled.
    pub fn standardized(&self) -> Self {
        let all = self.all_units();
        let mut out = self.clone();
        for r in 0..all.nrows() {
            let sd = sample_sd(all.row(r).iter().copied());
            if sd > 0.0 && sd.is_finite() {
                out.x1[r] /= sd;
                for c in 0..out.x0.ncols() {
                    out.x0[(r, c)] /= sd;
                }
            }
        }
        out
    }
}

/// Sample standard deviation with the `n − 1` denominator.
pub fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Mean of the treated or donor unit's outcome over the pre-treatment periods.
pub fn pre_outcome_summary(panel: &PanelData, unit: usize) -> f64 {
    column_mean(panel.outcome(), unit, 0..panel.t0())
}

fn column_mean(m: &DMatrix<f64>, col: usize, rows: Range<usize>) -> f64 {
    let n = rows.len() as f64;
    rows.map(|r| m[(r, col)]).sum::<f64>() / n
}

pub fn build_design(panel: &PanelData, spec: &CompositionalSpec, omit: &OmissionChoice) -> Result<DesignMatrices> {
    build_design_with(panel, spec, omit, &OutcomeSummaries::PreMean)
}

pub fn build_design_with(
    panel: &PanelData,
    spec: &CompositionalSpec,
    omit: &OmissionChoice,
    summaries: &OutcomeSummaries,
) -> Result<DesignMatrices> {
    omit.validate(spec)?;
    if panel.n_donors() == 0 {
        return Err(Error::EmptyDonorPool);
    }
    let t0 = panel.t0();
    let mut columns = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let covariate_mean = |name: &str| -> Result<Vec<f64>> {
        let m = panel.covariate(name).ok_or_else(|| Error::InvalidPanel(format!("missing covariate `{name}`")))?;
        Ok((0..panel.n_units()).map(|i| column_mean(m, i, 0..t0)).collect())
    };

    for s in &spec.scalars {
        rows.push(covariate_mean(s)?);
        columns.push(DesignColumn { name: s.clone(), kind: ColumnKind::Scalar });
    }
    for (g, o) in spec.groups.iter().zip(&omit.0) {
        for c in &g.categories {
            if *o == Omission::Category(c.clone()) {
                continue;
            }
            rows.push(covariate_mean(c)?);
            columns.push(DesignColumn { name: c.clone(), kind: ColumnKind::Category { group: g.name.clone() } });
        }
    }
    match summaries {
        OutcomeSummaries::PreMean => {
            rows.push((0..panel.n_units()).map(|i| pre_outcome_summary(panel, i)).collect());
            columns.push(DesignColumn { name: "pre_mean".into(), kind: ColumnKind::OutcomeSummary });
        }
        OutcomeSummaries::BlockMeans(blocks) => {
            for b in blocks {
                if b.is_empty() || b.end > t0 {
                    return Err(Error::InvalidInput(format!(
                        "outcome block {}..{} outside pre-treatment range 0..{t0}",
                        b.start, b.end
                    )));
                }
                rows.push((0..panel.n_units()).map(|i| column_mean(panel.outcome(), i, b.clone())).collect());
                columns.push(DesignColumn {
                    name: format!("pre_mean[{}..{}]", b.start, b.end),
                    kind: ColumnKind::OutcomeSummary,
                });
            }
        }
    }
    let k = rows.len();
    let n = panel.n_units();
    let x1 = DVector::from_fn(k, |r, _| rows[r][0]);
    let x0 = DMatrix::from_fn(k, n - 1, |r, c| rows[r][c + 1]);
    DesignMatrices::new(x1, x0, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec345() -> CompositionalSpec {
        CompositionalSpec::from_parts(
            &[
                ("race", &["white", "black", "other"]),
                ("education", &["lths", "hs", "sc", "mtc"]),
                ("industry", &["ind0", "ind1", "ind2", "ind3", "ind4"]),
            ],
            &["wage"],
        )
        .unwrap()
    }

    /// Three units, four periods, closed compositions that vary by unit and time.
    fn toy_panel(spec: &CompositionalSpec) -> PanelData {
        let (t, n) = (4, 3);
        let outcome = DMatrix::from_fn(t, n, |r, c| (r + 2 * c) as f64 * 0.1);
        let mut covariates = vec![Covariate {
            name: "wage".into(),
            values: DMatrix::from_fn(t, n, |r, c| 2.0 + 0.1 * r as f64 + c as f64),
        }];
        for g in &spec.groups {
            let k = g.categories.len();
            for (j, cat) in g.categories.iter().enumerate() {
                covariates.push(Covariate {
                    name: cat.clone(),
                    values: DMatrix::from_fn(t, n, |r, c| {
                        let raw: Vec<f64> = (0..k).map(|q| 1.0 + ((q + r + c) % k) as f64).collect();
                        raw[j] / raw.iter().sum::<f64>()
                    }),
                });
            }
        }
        PanelData::new(vec!["a".into(), "b".into(), "c".into()], vec![1, 2, 3, 4], outcome, 2, covariates).unwrap()
    }

    #[test]
    fn omitting_one_race_category_keeps_two_columns() {
        let spec = CompositionalSpec::from_parts(&[("race", &["white", "black", "other"])], &[]).unwrap();
        let panel = toy_panel(&spec);
        let omit = OmissionChoice(vec![Omission::Category("white".into())]);
        let d = build_design(&panel, &spec, &omit).unwrap();
        let race_cols = d.columns.iter().filter(|c| matches!(c.kind, ColumnKind::Category { .. })).count();
        assert_eq!(race_cols, 2);
        assert_eq!(d.column_names(), vec!["black", "other", "pre_mean"]);
    }

    #[test]
    fn no_omission_keeps_all_twelve_categories() {
        let spec = spec345();
        let panel = toy_panel(&spec);
        let d = build_design(&panel, &spec, &OmissionChoice::all_categories(&spec)).unwrap();
        let cats = d.columns.iter().filter(|c| matches!(c.kind, ColumnKind::Category { .. })).count();
        assert_eq!(cats, 12);
        assert_eq!(d.n_features(), 1 + 12 + 1);
    }

    #[test]
    fn omission_enumeration_counts() {
        let one = CompositionalSpec::from_parts(&[("race", &["w", "b", "o"])], &[]).unwrap();
        assert_eq!(enumerate_omissions(&one).len(), 3);
        assert_eq!(enumerate_omissions(&spec345()).len(), 60);
        let empty = CompositionalSpec::default();
        let all = enumerate_omissions(&empty);
        assert_eq!(all, vec![OmissionChoice(vec![])]);
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let spec = CompositionalSpec::from_parts(&[("a", &["a1", "a2"]), ("b", &["b1", "b2", "b3"])], &[]).unwrap();
        let ids: Vec<String> = enumerate_omissions(&spec).iter().map(|o| o.id(&spec)).collect();
        assert_eq!(ids, ["a=a1;b=b1", "a=a1;b=b2", "a=a1;b=b3", "a=a2;b=b1", "a=a2;b=b2", "a=a2;b=b3"]);
        for id in &ids {
            assert_eq!(OmissionChoice::parse(&spec, id).unwrap().id(&spec), *id);
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        let spec = spec345();
        let panel = toy_panel(&spec);
        let mut omit = OmissionChoice::first(&spec);
        omit.0[1] = Omission::Category("phd".into());
        assert!(matches!(build_design(&panel, &spec, &omit), Err(Error::UnknownCategory { .. })));
    }

    #[test]
    fn one_column_removed_per_group_and_shared_columns_identical() {
        let spec = spec345();
        let panel = toy_panel(&spec);
        let full = build_design(&panel, &spec, &OmissionChoice::all_categories(&spec)).unwrap();
        let omissions = enumerate_omissions(&spec);
        let first = build_design(&panel, &spec, &omissions[0]).unwrap();
        for o in &omissions {
            let d = build_design(&panel, &spec, o).unwrap();
            assert_eq!(full.n_features() - d.n_features(), spec.groups.len());
            // scalar block and outcome summary are bit-identical
            assert_eq!(d.x0.row(0), first.x0.row(0));
            let last = d.n_features() - 1;
            assert_eq!(d.x0.row(last), first.x0.row(first.n_features() - 1));
            assert_eq!(d.x1[last], first.x1[first.n_features() - 1]);
        }
    }

    #[test]
    fn pre_outcome_summary_is_mean() {
        let outcome = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 100.0, 5.0]);
        let p = PanelData::new(vec!["t".into(), "d".into()], vec![1, 2, 3, 4], outcome, 3, vec![]).unwrap();
        assert_eq!(pre_outcome_summary(&p, 0), 2.0);
        assert_eq!(pre_outcome_summary(&p, 1), 5.0);
    }

    #[test]
    fn pre_outcome_summary_matches_naive_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let outcome = DMatrix::from_fn(12, 2, |_, _| rng.random::<f64>());
        let p = PanelData::new(vec!["t".into(), "d".into()], (1..=12).collect(), outcome.clone(), 10, vec![]).unwrap();
        let mut naive = 0.0;
        for t in 0..10 {
            naive += outcome[(t, 0)];
        }
        assert!((pre_outcome_summary(&p, 0) - naive / 10.0).abs() < 1e-15);
    }

    #[test]
    fn block_means_design() {
        let spec = CompositionalSpec::default();
        let outcome = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 3.0, 0.0, 5.0, 1.0, 9.0, 1.0]);
        let p = PanelData::new(vec!["t".into(), "d".into()], vec![1, 2, 3, 4], outcome, 3, vec![]).unwrap();
        let d = build_design_with(&p, &spec, &OmissionChoice(vec![]), &OutcomeSummaries::BlockMeans(vec![0..2, 2..3]))
            .unwrap();
        assert_eq!(d.x1.as_slice(), &[2.0, 5.0]);
        assert_eq!(d.x0.column(0).as_slice(), &[0.0, 1.0]);
        let bad = build_design_with(&p, &spec, &OmissionChoice(vec![]), &OutcomeSummaries::BlockMeans(vec![2..4]));
        assert!(bad.is_err());
    }

    #[test]
    fn closure_validation() {
        let spec = spec345();
        let panel = toy_panel(&spec);
        panel.validate_composition(&spec).unwrap();
        let mut covs = panel.covariates().to_vec();
        covs[1].values[(0, 0)] += 1e-6;
        let broken =
            PanelData::new(panel.unit_ids().to_vec(), panel.times().to_vec(), panel.outcome().clone(), 2, covs)
                .unwrap();
        assert!(broken.validate_composition(&spec).is_err());
    }

    #[test]
    fn rejects_bad_t0_and_single_unit() {
        let y = DMatrix::zeros(3, 2);
        assert!(PanelData::new(vec!["a".into(), "b".into()], vec![1, 2, 3], y.clone(), 3, vec![]).is_err());
        assert!(PanelData::new(vec!["a".into(), "b".into()], vec![1, 2, 3], y.clone(), 0, vec![]).is_err());
        assert!(matches!(
            PanelData::new(vec!["a".into()], vec![1, 2, 3], DMatrix::zeros(3, 1), 1, vec![]),
            Err(Error::EmptyDonorPool)
        ));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let spec = spec345();
        let panel = toy_panel(&spec);
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let back = PanelData::from_csv_reader(buf.as_slice(), 2, None).unwrap();
        assert_eq!(back, panel);

        let bad = "unit,time,outcome\na,1,0.5\na,2,oops\nb,1,0\nb,2,0\n";
        match PanelData::from_csv_reader(bad.as_bytes(), 1, None) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "outcome");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_treated_override() {
        let text = "unit,time,outcome\na,1,0\na,2,0\nb,1,1\nb,2,2\n";
        let p = PanelData::from_csv_reader(text.as_bytes(), 1, Some("b")).unwrap();
        assert_eq!(p.unit_ids(), &["b".to_string(), "a".to_string()]);
        assert_eq!(p.treated_path(), vec![1.0, 2.0]);
    }

    #[test]
    fn spec_json_preserves_group_order() {
        let text = r#"{"groups": {"race": ["white","black","other"], "education": ["a","b"]}, "scalars": ["wage"]}"#;
        let spec: CompositionalSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.groups[0].name, "race");
        assert_eq!(spec.groups[1].name, "education");
        let again: CompositionalSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        assert!(serde_json::from_str::<CompositionalSpec>(r#"{"groups": {"g": ["only"]}}"#).is_err());
    }

    #[test]
    fn standardized_design_has_unit_sd() {
        let d = DesignMatrices::from_rows(&[1.0, 10.0], &[&[2.0, 3.0, 5.0], &[20.0, 40.0, 80.0]]).unwrap();
        let s = d.standardized();
        for r in 0..2 {
            let sd = sample_sd(s.all_units().row(r).iter().copied());
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }
}
