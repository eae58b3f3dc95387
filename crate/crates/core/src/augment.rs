//! Ridge-augmented synthetic control and its residualized variant.
//!
//! Predictors are the full pre-treatment outcome vector plus (optionally)
//! the covariate rows of the design. Base weights come from the simplex
//! solver with uniform V and a small dispersion penalty toward uniform
//! weights. A ridge regression fitted on donors only then corrects the
//! remaining imbalance:
//!
//! ```text
//! Ŷ₁ₜ(0) = Σ_j w_j Y_jt + (p₁ − P₀w)' β̂_t
//! ```
//!
//! Because the ridge fit is linear in the donor outcomes the estimator can
//! be written as `Σ_j γ_j Y_jt` with `γ = w + P̃₀' M⁻¹ (p₁ − P₀w)`, where `P̃₀`
//! is the donor-centred predictor matrix and `M = P̃₀P̃₀' + Λ`. The residualized
//! mode puts a zero penalty on the covariate block, which makes `γ` balance
//! the covariates exactly and removes any dependence on which reference
//! category was dropped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::simplex_least_squares;
use crate::panel::{sample_sd, DesignMatrices, PanelData};
use crate::synth::{gaps_after, pre_rmspe_of, DonorWeights, VWeights};

/// Dispersion penalty coefficient, as a fraction of the ridge scale.
pub const DEFAULT_DISPERSION_RATIO: f64 = 1e-2;

/// Default cross-validation grid, as multiples of the ridge scale.
pub const DEFAULT_PENALTY_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AugmentMode {
    AllCovariates,
    NoCovariates,
    Residualized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PenaltySelection {
    /// Absolute penalty on the outcome block (and on covariates unless residualized).
    /// `f64::INFINITY` shrinks those coefficients to exactly zero.
    Fixed(f64),
    /// Leave-one-donor-out CV over multiples of the ridge scale.
    CrossValidated(Vec<f64>),
}

impl Default for PenaltySelection {
    fn default() -> Self {
        Self::CrossValidated(DEFAULT_PENALTY_GRID.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub mode: AugmentMode,
    pub penalty: PenaltySelection,
    pub dispersion_ratio: f64,
    /// One ridge fit per period instead of a single fit on the post-period mean.
    pub per_period: bool,
}

impl AugmentOptions {
    pub fn new(mode: AugmentMode) -> Self {
        Self {
            mode,
            penalty: PenaltySelection::default(),
            dispersion_ratio: DEFAULT_DISPERSION_RATIO,
            per_period: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub outcomes: f64,
    pub covariates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedFit {
    pub mode: AugmentMode,
    /// Base (simplex) donor weights.
    pub w: DonorWeights,
    pub v: VWeights,
    /// Implied augmented weights; sum to one but may be negative.
    pub augmented_weights: Vec<f64>,
    pub synthetic_path: Vec<f64>,
    pub rmspe_pre: f64,
    pub att_series: Vec<f64>,
    pub att_mean: f64,
    pub base_att_mean: f64,
    pub optimizer_trace: Vec<f64>,
    pub predictor_names: Vec<String>,
    /// Ridge coefficients for the post-period mean outcome.
    pub ridge_coefficients: Vec<f64>,
    /// `(p₁ − P₀W)'β̂` per post period.
    pub correction_series: Vec<f64>,
    pub penalty: Penalty,
    pub dispersion: f64,
    pub per_period: bool,
}

/// Donor-side ridge problem: `predictors` is `p × J`, `response` has one
/// entry per donor, and `penalized[r]` says whether row `r` is shrunk.
#[derive(Debug, Clone)]
pub struct DonorRidgeData {
    pub predictors: DMatrix<f64>,
    pub response: DVector<f64>,
    pub penalized: Vec<bool>,
}

impl DonorRidgeData {
    /// Mean nonzero eigenvalue of the centred Gram matrix of the penalized
    /// rows, the unit in which penalties are expressed.
    pub fn scale(&self) -> f64 {
        let rows: Vec<usize> = (0..self.predictors.nrows()).filter(|&r| self.penalized[r]).collect();
        let c = centre_rows(&self.predictors.select_rows(&rows));
        let p = c.nrows();
        let j = c.ncols();
        let denom = p.min(j.saturating_sub(1)).max(1);
        (c.norm_squared() / denom as f64).max(f64::MIN_POSITIVE)
    }
}

fn centre_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

/// Solves `M β = rhs` for `M = P̃P̃' + Λ`. Rows with infinite penalty are
/// dropped (their coefficients are zero).
fn ridge_solve(centred: &DMatrix<f64>, penalized: &[bool], lambda: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = centred.nrows();
    let keep: Vec<usize> = (0..p).filter(|&r| !(penalized[r] && lambda.is_infinite())).collect();
    let mut out = DMatrix::zeros(p, rhs.ncols());
    if keep.is_empty() {
        return Ok(out);
    }
    let sub = centred.select_rows(&keep);
    let mut m = &sub * sub.transpose();
    for (i, &r) in keep.iter().enumerate() {
        if penalized[r] {
            m[(i, i)] += lambda;
        }
    }
    let rhs_sub = rhs.select_rows(&keep);
    let chol = m.cholesky().ok_or_else(|| {
        Error::RankDeficient("covariate block is collinear or has more columns than donors allow".into())
    })?;
    let sol = chol.solve(&rhs_sub);
    for (i, &r) in keep.iter().enumerate() {
        out.set_row(r, &sol.row(i));
    }
    Ok(out)
}

/// Leave-one-donor-out squared prediction error of the ridge fit at `lambda`.
pub fn ridge_cv_error(data: &DonorRidgeData, lambda: f64) -> Result<f64> {
    let j = data.predictors.ncols();
    if j < 3 {
        return Err(Error::InvalidInput("cross-validation needs at least 3 donors".into()));
    }
    let mut total = 0.0;
    for out in 0..j {
        let idx: Vec<usize> = (0..j).filter(|&c| c != out).collect();
        let x = data.predictors.select_columns(&idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&c| data.response[c]));
        let xmean = x.column_mean();
        let ymean = y.mean();
        let xc = centre_rows(&x);
        let yc = y.add_scalar(-ymean);
        let beta =
            ridge_solve(&xc, &data.penalized, lambda, &(&xc * DMatrix::from_column_slice(yc.len(), 1, yc.as_slice())))?;
        let pred = ymean + (data.predictors.column(out) - &xmean).dot(&beta.column(0));
        total += (data.response[out] - pred).powi(2);
    }
    Ok(total / j as f64)
}

/// Grid point with the smallest leave-one-donor-out error; ties go to the
/// larger penalty.
pub fn select_penalty(data: &DonorRidgeData, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let err = ridge_cv_error(data, lambda)?;
        best = match best {
            None => Some((lambda, err)),
            Some((bl, be)) => {
                let tie = (err - be).abs() <= 1e-12 * be.abs().max(f64::MIN_POSITIVE);
                if err < be && !tie {
                    Some((lambda, err))
                } else if tie && lambda > bl {
                    Some((lambda, be.min(err)))
                } else {
                    Some((bl, be))
                }
            }
        };
    }
    Ok(best.map(|b| b.0).unwrap())
}

struct Predictors {
    /// `p × N`, treated first.
    all: DMatrix<f64>,
    names: Vec<String>,
    /// Rows belonging to the covariate block.
    covariate: Vec<bool>,
}

fn build_predictors(panel: &PanelData, design: &DesignMatrices, mode: AugmentMode) -> Predictors {
    let t0 = panel.t0();
    let n = panel.n_units();
    let y = panel.outcome();
    let mut rows: Vec<Vec<f64>> = (0..t0).map(|t| (0..n).map(|i| y[(t, i)]).collect()).collect();
    let mut names: Vec<String> = (0..t0).map(|t| format!("y[{}]", panel.times()[t])).collect();
    let mut covariate = vec![false; t0];
    if mode != AugmentMode::NoCovariates {
        let all = design.all_units();
        let y_sd = sample_sd((0..t0).flat_map(|t| (0..n).map(move |i| y[(t, i)])));
        for r in design.covariate_rows() {
            let sd = sample_sd(all.row(r).iter().copied());
            let factor = if sd > 0.0 && y_sd > 0.0 { y_sd / sd } else { 1.0 };
            rows.push(all.row(r).iter().map(|v| v * factor).collect());
            names.push(design.columns[r].name.clone());
            covariate.push(true);
        }
    }
    let all = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    Predictors { all, names, covariate }
}

/// Swaps the covariate rows for coordinates in an orthonormal basis of their
/// donor-centred span, so a collinear block (every category kept, or
/// covariates identical across donors) still gives an invertible system.
fn reduce_covariates(preds: Predictors, j: usize) -> Result<Predictors> {
    let zrows: Vec<usize> = (0..preds.all.nrows()).filter(|&r| preds.covariate[r]).collect();
    let q = zrows.len();
    if q == 0 {
        return Ok(preds);
    }
    if q + 1 > j {
        return Err(Error::RankDeficient(format!("cannot balance {q} covariates exactly with {j} donors")));
    }
    let z = preds.all.select_rows(&zrows);
    let zc = centre_rows(&z.columns(1, j).into_owned());
    let svd = zc.svd(true, false);
    let sv = &svd.singular_values;
    // relative to the raw covariate size, so spread that is pure rounding
    // (covariates identical across donors) counts as no spread at all
    let tol = sv.max().max(z.columns(1, j).amax() * (j as f64).sqrt()) * 1e-9;
    let keep: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] > tol && sv[k] > 0.0).collect();
    if keep.len() < q {
        log::warn!("covariate block has rank {} of {q}; balancing its span", keep.len());
    }
    let basis = svd.u.as_ref().unwrap().select_columns(&keep);
    let reduced = basis.transpose() * &z;
    let outcome_rows: Vec<usize> = (0..preds.all.nrows()).filter(|&r| !preds.covariate[r]).collect();
    let n_out = outcome_rows.len();
    let n = preds.all.ncols();
    let all = DMatrix::from_fn(n_out + keep.len(), n, |r, c| {
        if r < n_out {
            preds.all[(outcome_rows[r], c)]
        } else {
            reduced[(r - n_out, c)]
        }
    });
    let mut names: Vec<String> = outcome_rows.iter().map(|&r| preds.names[r].clone()).collect();
    names.extend((0..keep.len()).map(|k| format!("covariate_basis[{k}]")));
    let covariate = (0..all.nrows()).map(|r| r >= n_out).collect();
    Ok(Predictors { all, names, covariate })
}

/// Residualizes every period's outcome on `[1, Z]` fitted over donors.
fn residualize(panel: &PanelData, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = panel.n_units();
    let q = z.nrows();
    let j = n - 1;
    let mut design = DMatrix::from_element(n, q + 1, 1.0);
    for i in 0..n {
        for r in 0..q {
            design[(i, r + 1)] = z[(r, i)];
        }
    }
    let donors = design.rows(1, j).into_owned();
    let sv = donors.clone().singular_values();
    let tol = sv.max() * 1e-10 * (j.max(q + 1) as f64);
    if j < q + 1 || sv.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient(format!(
            "cannot balance {q} covariates exactly with {j} donors (collinear or too many columns)"
        )));
    }
    let y = panel.outcome();
    let ydon = DMatrix::from_fn(j, panel.n_periods(), |i, t| y[(t, i + 1)]);
    let coef = donors
        .svd(true, true)
        .solve(&ydon, 0.0)
        .map_err(|e| Error::RankDeficient(format!("covariate regression: {e}")))?;
    let fitted = &design * coef;
    Ok(DMatrix::from_fn(panel.n_periods(), n, |t, i| y[(t, i)] - fitted[(i, t)]))
}

pub fn augmented_fit(panel: &PanelData, design: &DesignMatrices, opts: &AugmentOptions) -> Result<AugmentedFit> {
    if design.n_donors() != panel.n_donors() {
        return Err(Error::InvalidInput("design and panel disagree on donors".into()));
    }
    let j = panel.n_donors();
    let t0 = panel.t0();
    let tt = panel.n_periods();
    let residual_mode = opts.mode == AugmentMode::Residualized;
    let mut preds = build_predictors(panel, design, opts.mode);
    if residual_mode {
        preds = reduce_covariates(preds, j)?;
    }
    let p = preds.all.nrows();
    let p0 = preds.all.columns(1, j).into_owned();
    let p1 = preds.all.column(0).into_owned();
    let centred = centre_rows(&p0);
    let penalized: Vec<bool> = preds.covariate.iter().map(|&c| !(c && residual_mode)).collect();
    let y = panel.outcome();

    // base weights
    let (base_a, base_b) = if residual_mode {
        let zrows: Vec<usize> = (0..p).filter(|&r| preds.covariate[r]).collect();
        let z = preds.all.select_rows(&zrows);
        let resid = residualize(panel, &z)?;
        (DMatrix::from_fn(t0, j, |t, c| resid[(t, c + 1)]), DVector::from_fn(t0, |t, _| resid[(t, 0)]))
    } else {
        (p0.clone(), p1.clone())
    };
    let base_scale = {
        let c = centre_rows(&base_a);
        (c.norm_squared() / base_a.nrows().min(j.saturating_sub(1)).max(1) as f64).max(f64::MIN_POSITIVE)
    };
    let dispersion = opts.dispersion_ratio * base_scale;
    let base = simplex_least_squares(&base_a, &base_b, dispersion)?;
    let w = base.w.clone();

    // ridge
    let post_mean = DVector::from_fn(j, |c, _| (t0..tt).map(|t| y[(t, c + 1)]).sum::<f64>() / (tt - t0) as f64);
    let data = DonorRidgeData { predictors: p0.clone(), response: post_mean.clone(), penalized: penalized.clone() };
    let lambda = match &opts.penalty {
        PenaltySelection::Fixed(l) => {
            if !(*l >= 0.0) {
                return Err(Error::InvalidInput(format!("penalty must be >= 0, got {l}")));
            }
            *l
        }
        PenaltySelection::CrossValidated(mult) => {
            let s = data.scale();
            let grid: Vec<f64> = mult.iter().map(|m| m * s).collect();
            select_penalty(&data, &grid)?
        }
    };

    let d = &p1 - &p0 * &w;
    // M⁻¹ d gives both the implied weights and, dotted with P̃₀y, every period's correction.
    let md = ridge_solve(&centred, &penalized, lambda, &DMatrix::from_column_slice(p, 1, d.as_slice()))?;
    let gamma: DVector<f64> = &w + centred.transpose() * md.column(0);

    let yc_post = post_mean.add_scalar(-post_mean.mean());
    let beta =
        ridge_solve(&centred, &penalized, lambda, &(&centred * DMatrix::from_column_slice(j, 1, yc_post.as_slice())))?;
    let pooled_correction = d.dot(&beta.column(0));

    let donor_path = |weights: &DVector<f64>, t: usize| -> f64 { (0..j).map(|c| weights[c] * y[(t, c + 1)]).sum() };
    let base_path: Vec<f64> = (0..tt).map(|t| donor_path(&w, t)).collect();
    let implied_path: Vec<f64> = (0..tt).map(|t| donor_path(&gamma, t)).collect();
    let synthetic_path: Vec<f64> = (0..tt)
        .map(|t| if t < t0 || opts.per_period { implied_path[t] } else { base_path[t] + pooled_correction })
        .collect();
    let correction_series: Vec<f64> = (t0..tt).map(|t| synthetic_path[t] - base_path[t]).collect();
    let (att_series, att_mean) = gaps_after(panel, &synthetic_path);
    let (_, base_att_mean) = gaps_after(panel, &base_path);
    let rmspe_pre = pre_rmspe_of(panel, &synthetic_path);

    Ok(AugmentedFit {
        mode: opts.mode,
        w: DonorWeights(w.iter().copied().collect()),
        v: VWeights::uniform(base_a.nrows().max(1)),
        augmented_weights: gamma.iter().copied().collect(),
        synthetic_path,
        rmspe_pre,
        att_series,
        att_mean,
        base_att_mean,
        optimizer_trace: vec![base.objective],
        predictor_names: preds.names,
        ridge_coefficients: beta.column(0).iter().copied().collect(),
        correction_series,
        penalty: Penalty { outcomes: lambda, covariates: if residual_mode { 0.0 } else { lambda } },
        dispersion,
        per_period: opts.per_period,
    })
}

/// `max_r |Z₁ − Z₀γ|` over the covariate rows of `design`.
pub fn covariate_imbalance(design: &DesignMatrices, weights: &[f64]) -> f64 {
    design
        .covariate_rows()
        .into_iter()
        .map(|r| {
            let synth: f64 = weights.iter().enumerate().map(|(c, w)| w * design.x0[(r, c)]).sum();
            (design.x1[r] - synth).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_design, CompositionalSpec, Covariate, OmissionChoice};
    use crate::synth::{solve_w_given_v, VWeights};

    fn panel(y: DMatrix<f64>, t0: usize, covs: Vec<Covariate>) -> PanelData {
        let n = y.ncols();
        let t = y.nrows();
        PanelData::new((0..n).map(|i| format!("u{i}")).collect(), (1..=t as i64).collect(), y, t0, covs).unwrap()
    }

    fn wavy(t: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(t, n, |r, c| {
            0.1 + 0.01 * c as f64 + 0.002 * r as f64 + 0.01 * ((r * (c + 2)) as f64 * 0.7).sin()
        })
    }

    fn scalar_covs(t: usize, n: usize, q: usize) -> (Vec<Covariate>, CompositionalSpec) {
        let covs: Vec<Covariate> = (0..q)
            .map(|k| Covariate {
                name: format!("z{k}"),
                values: DMatrix::from_fn(t, n, |r, c| ((c * (k + 3) + r) % 7) as f64 + (c as f64 * 0.3).cos()),
            })
            .collect();
        let names: Vec<String> = (0..q).map(|k| format!("z{k}")).collect();
        let spec = CompositionalSpec::new(vec![], names).unwrap();
        (covs, spec)
    }

    #[test]
    fn infinite_penalty_removes_correction() {
        let (covs, spec) = scalar_covs(10, 8, 2);
        let p = panel(wavy(10, 8), 6, covs);
        let d = build_design(&p, &spec, &OmissionChoice(vec![])).unwrap();
        let mut opts = AugmentOptions::new(AugmentMode::AllCovariates);
        opts.penalty = PenaltySelection::Fixed(f64::INFINITY);
        let fit = augmented_fit(&p, &d, &opts).unwrap();
        assert!(fit.correction_series.iter().all(|c| *c == 0.0));
        assert_eq!(fit.att_mean, fit.base_att_mean);
    }

    #[test]
    fn no_covariates_with_infinite_penalty_is_plain_synth_on_pre_outcomes() {
        let y = wavy(9, 7);
        let p = panel(y.clone(), 5, vec![]);
        let d = build_design(&p, &CompositionalSpec::default(), &OmissionChoice(vec![])).unwrap();
        let opts = AugmentOptions {
            mode: AugmentMode::NoCovariates,
            penalty: PenaltySelection::Fixed(f64::INFINITY),
            dispersion_ratio: 0.0,
            per_period: false,
        };
        let fit = augmented_fit(&p, &d, &opts).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|t| (1..7).map(|c| y[(t, c)]).collect()).collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x1: Vec<f64> = (0..5).map(|t| y[(t, 0)]).collect();
        let sc = DesignMatrices::from_rows(&x1, &row_refs).unwrap();
        let w = solve_w_given_v(&sc, &VWeights::uniform(5)).unwrap();
        for (a, b) in fit.w.0.iter().zip(&w.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_imbalance_means_zero_correction() {
        // treated is an exact convex combination of donors in every predictor
        let n = 7;
        let donors = wavy(10, n - 1);
        let mix = [0.2, 0.3, 0.0, 0.5, 0.0, 0.0];
        let y = DMatrix::from_fn(10, n, |r, c| {
            if c == 0 {
                (0..n - 1).map(|j| mix[j] * donors[(r, j)]).sum()
            } else {
                donors[(r, c - 1)]
            }
        });
        let p = panel(y, 6, vec![]);
        let d = build_design(&p, &CompositionalSpec::default(), &OmissionChoice(vec![])).unwrap();
        let mut opts = AugmentOptions::new(AugmentMode::NoCovariates);
        opts.dispersion_ratio = 0.0;
        let fit = augmented_fit(&p, &d, &opts).unwrap();
        for c in &fit.correction_series {
            assert!(c.abs() < 1e-8, "{c}");
        }
    }

    #[test]
    fn residualized_balances_covariates_exactly() {
        let (covs, spec) = scalar_covs(12, 11, 3);
        let p = panel(wavy(12, 11), 8, covs);
        let d = build_design(&p, &spec, &OmissionChoice(vec![])).unwrap();
        let fit = augmented_fit(&p, &d, &AugmentOptions::new(AugmentMode::Residualized)).unwrap();
        assert!(covariate_imbalance(&d, &fit.augmented_weights) <= 1e-8);
        assert!((fit.augmented_weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert_eq!(fit.penalty.covariates, 0.0);
        // the plain augmented fit does not balance covariates exactly
        let plain = augmented_fit(&p, &d, &AugmentOptions::new(AugmentMode::AllCovariates)).unwrap();
        assert!(covariate_imbalance(&d, &plain.augmented_weights) > 1e-6);
    }

    #[test]
    fn residualized_reports_rank_failure() {
        let (covs, spec) = scalar_covs(8, 4, 3);
        let p = panel(wavy(8, 4), 5, covs);
        let d = build_design(&p, &spec, &OmissionChoice(vec![])).unwrap();
        let r = augmented_fit(&p, &d, &AugmentOptions::new(AugmentMode::Residualized));
        assert!(matches!(r, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn augmented_path_can_leave_the_hull() {
        // treated sits below every donor; the ridge correction extrapolates
        let t = 10;
        let y = DMatrix::from_fn(t, 6, |r, c| {
            let trend = 0.01 * r as f64;
            if c == 0 {
                0.05 + trend
            } else {
                0.1 + 0.02 * c as f64 + trend + 0.001 * ((r + c) % 3) as f64
            }
        });
        let p = panel(y.clone(), 6, vec![]);
        let d = build_design(&p, &CompositionalSpec::default(), &OmissionChoice(vec![])).unwrap();
        let mut opts = AugmentOptions::new(AugmentMode::NoCovariates);
        opts.penalty = PenaltySelection::Fixed(1e-6);
        opts.per_period = true;
        let fit = augmented_fit(&p, &d, &opts).unwrap();
        let below = (6..t).any(|r| {
            let min_donor = (1..6).map(|c| y[(r, c)]).fold(f64::INFINITY, f64::min);
            fit.synthetic_path[r] < min_donor
        });
        assert!(below, "{:?}", fit.synthetic_path);
        assert!(fit.augmented_weights.iter().any(|g| *g < 0.0));
    }

    #[test]
    fn pooled_and_per_period_share_att_mean() {
        let (covs, spec) = scalar_covs(12, 9, 2);
        let p = panel(wavy(12, 9), 7, covs);
        let d = build_design(&p, &spec, &OmissionChoice(vec![])).unwrap();
        let mut opts = AugmentOptions::new(AugmentMode::AllCovariates);
        let pooled = augmented_fit(&p, &d, &opts).unwrap();
        opts.per_period = true;
        let per = augmented_fit(&p, &d, &opts).unwrap();
        assert!((pooled.att_mean - per.att_mean).abs() < 1e-12);
        assert!(pooled.correction_series.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn penalty_selection_rules() {
        let data = DonorRidgeData {
            predictors: DMatrix::from_fn(2, 6, |r, c| (r + 1) as f64 * c as f64 + ((c * 7) % 3) as f64),
            response: DVector::from_fn(6, |c, _| c as f64 * 0.5 + ((c * 5) % 4) as f64 * 0.1),
            penalized: vec![true, true],
        };
        assert_eq!(select_penalty(&data, &[3.0]).unwrap(), 3.0);
        assert_eq!(select_penalty(&data, &[2.0, 2.0]).unwrap(), 2.0);
        // with an unpenalized design the penalty is irrelevant: every score ties
        let free = DonorRidgeData { penalized: vec![false, false], ..data.clone() };
        assert_eq!(select_penalty(&free, &[0.1, 5.0, 1.0]).unwrap(), 5.0);
        assert!(select_penalty(&data, &[]).is_err());
    }

    #[test]
    fn penalty_selection_matches_exhaustive_grid() {
        // noiseless linear donors
        let j = 9;
        let predictors = DMatrix::from_fn(3, j, |r, c| ((c * (r + 2)) % 5) as f64 + 0.1 * c as f64);
        let response = DVector::from_fn(j, |c, _| 0.5 * predictors[(0, c)] - 0.2 * predictors[(1, c)] + 0.1);
        let data = DonorRidgeData { predictors, response, penalized: vec![true; 3] };
        let grid = [1e-6, 1e-3, 1e-1, 1.0, 10.0];
        let chosen = select_penalty(&data, &grid).unwrap();
        let errs: Vec<f64> = grid.iter().map(|&l| naive_loo(&data, l)).collect();
        let min = errs.iter().copied().fold(f64::INFINITY, f64::min);
        let chosen_err = naive_loo(&data, chosen);
        assert!((chosen_err - min).abs() < 1e-6);
    }

    /// Independent LOO via explicit normal equations with an unpenalized intercept.
    fn naive_loo(data: &DonorRidgeData, lambda: f64) -> f64 {
        let (p, j) = data.predictors.shape();
        let mut total = 0.0;
        for out in 0..j {
            let rows: Vec<usize> = (0..j).filter(|&c| c != out).collect();
            let x = DMatrix::from_fn(
                rows.len(),
                p + 1,
                |i, k| if k == 0 { 1.0 } else { data.predictors[(k - 1, rows[i])] },
            );
            let y = DVector::from_fn(rows.len(), |i, _| data.response[rows[i]]);
            let mut m = x.transpose() * &x;
            for k in 1..=p {
                m[(k, k)] += lambda;
            }
            let b = m.lu().solve(&(x.transpose() * y)).unwrap();
            let pred = b[0] + (0..p).map(|k| b[k + 1] * data.predictors[(k, out)]).sum::<f64>();
            total += (data.response[out] - pred).powi(2);
        }
        total / j as f64
    }

    #[test]
    fn residualized_handles_collinear_categories() {
        // a closed composition kept whole is collinear with the intercept
        let (t, n) = (10, 9);
        let share = |i: usize, r: usize| 0.2 + 0.05 * ((i * 3 + r) % 5) as f64;
        let covs = vec![
            Covariate { name: "a".into(), values: DMatrix::from_fn(t, n, |r, i| share(i, r)) },
            Covariate { name: "b".into(), values: DMatrix::from_fn(t, n, |r, i| 1.0 - share(i, r)) },
        ];
        let spec = CompositionalSpec::from_parts(&[("g", &["a", "b"])], &[]).unwrap();
        let p = panel(wavy(t, n), 6, covs);
        let whole = build_design(&p, &spec, &OmissionChoice::all_categories(&spec)).unwrap();
        let dropped = build_design(&p, &spec, &OmissionChoice::first(&spec)).unwrap();
        let opts = AugmentOptions::new(AugmentMode::Residualized);
        let a = augmented_fit(&p, &whole, &opts).unwrap();
        let b = augmented_fit(&p, &dropped, &opts).unwrap();
        assert!((a.att_mean - b.att_mean).abs() <= 1e-10);
        assert!(covariate_imbalance(&whole, &a.augmented_weights) <= 1e-8);
    }
}
