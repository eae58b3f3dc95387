//! Linear (interactive) fixed-effects counterfactual estimated on donors only.
//!
//! Donor model: `Y_jt = α_j + δ_t + X_jt'γ + l_j'F_t + ε_jt`, with
//! `Σ_j α_j = 0` so that `δ_t` is the donor average of the covariate- and
//! factor-adjusted outcome. The treated unit contributes only its
//! pre-treatment outcomes, through its own intercept (and loadings).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::synth::{gaps_after, pre_rmspe_of};

const MAX_ITER: usize = 500;
const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IfeCovariates {
    All,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfeFit {
    pub covariate_names: Vec<String>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    /// Donor intercepts, summing to zero.
    pub unit_effects: Vec<f64>,
    pub treated_effect: f64,
    pub r: usize,
    /// `T × r`, row-major by period.
    pub factors: Vec<Vec<f64>>,
    /// `J × r`.
    pub donor_loadings: Vec<Vec<f64>>,
    pub treated_loadings: Vec<f64>,
    pub counterfactual_path: Vec<f64>,
    pub att_series: Vec<f64>,
    pub att_mean: f64,
    pub rmspe_pre: f64,
    /// Donor residual sum of squares.
    pub rss: f64,
    pub iterations: usize,
    /// Whether the covariate block was rank deficient (pseudo-inverse used).
    pub collinear: bool,
}

/// Subtracts row and column means (two-way within transformation).
fn double_demean(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (j, t) = m.shape();
    let rows: Vec<f64> = (0..j).map(|i| m.row(i).mean()).collect();
    let cols: Vec<f64> = (0..t).map(|s| m.column(s).mean()).collect();
    let all = m.mean();
    DMatrix::from_fn(j, t, |i, s| m[(i, s)] - rows[i] - cols[s] + all)
}

struct CovBlock {
    /// Per covariate, `J × T` donor values.
    donor: Vec<DMatrix<f64>>,
    pinv: DMatrix<f64>,
    collinear: bool,
}

impl CovBlock {
    fn new(donor: Vec<DMatrix<f64>>) -> Result<Self> {
        let q = donor.len();
        let nobs = donor.first().map_or(0, |m| m.len());
        let mut within = DMatrix::zeros(nobs, q);
        for (k, m) in donor.iter().enumerate() {
            let w = double_demean(m);
            within.set_column(k, &DVector::from_column_slice(w.as_slice()));
        }
        let (pinv, collinear) = if q == 0 {
            (DMatrix::zeros(0, nobs), false)
        } else {
            let gram = within.tr_mul(&within);
            let svd = gram.clone().svd(true, true);
            let tol = svd.singular_values.max() * 1e-10 * q as f64;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            let gi = svd
                .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::InvalidInput(format!("covariate pseudo-inverse: {e}")))?;
            (gi * within.transpose(), rank < q)
        };
        Ok(Self { donor, pinv, collinear })
    }

    fn gamma(&self, target_within: &DMatrix<f64>) -> DVector<f64> {
        if self.donor.is_empty() {
            return DVector::zeros(0);
        }
        &self.pinv * DVector::from_column_slice(target_within.as_slice())
    }

    fn apply(&self, gamma: &DVector<f64>, j: usize, t: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(j, t);
        for (k, m) in self.donor.iter().enumerate() {
            out += m * gamma[k];
        }
        out
    }
}

struct DonorSolution {
    gamma: DVector<f64>,
    common: DMatrix<f64>,
    rss: f64,
    iterations: usize,
}

/// Alternates covariate OLS and a rank-`r` SVD of the double-demeaned
/// residual, starting from `gamma`.
fn alternate(y: &DMatrix<f64>, cov: &CovBlock, r: usize, gamma: DVector<f64>) -> DonorSolution {
    let (j, t) = y.shape();
    let low_rank = |resid: &DMatrix<f64>| -> DMatrix<f64> {
        if r == 0 {
            return DMatrix::zeros(j, t);
        }
        let svd = resid.clone().svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut c = DMatrix::zeros(j, t);
        for &k in order.iter().take(r) {
            c += u.column(k) * vt.row(k) * svd.singular_values[k];
        }
        c
    };
    if r == 0 {
        let gamma = cov.gamma(&double_demean(y));
        let rss = double_demean(&(y - cov.apply(&gamma, j, t))).norm_squared();
        return DonorSolution { gamma, common: DMatrix::zeros(j, t), rss, iterations: 1 };
    }
    let mut gamma = gamma;
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let resid = double_demean(&(y - cov.apply(&gamma, j, t)));
        let common = low_rank(&resid);
        let rss = (&resid - &common).norm_squared();
        let converged = prev.is_finite() && (prev - rss).abs() <= REL_TOL * prev.max(f64::MIN_POSITIVE);
        if converged || cov.donor.is_empty() || iterations >= MAX_ITER {
            return DonorSolution { gamma, common, rss, iterations };
        }
        prev = rss;
        gamma = cov.gamma(&double_demean(&(y - &common)));
    }
}

/// Fits the donor model with `r` factors and projects the treated unit.
/// `covariates` names panel covariates; pass an empty slice for none.
pub fn ife_fit(panel: &PanelData, covariates: &[String], r: usize) -> Result<IfeFit> {
    let j = panel.n_donors();
    let t0 = panel.t0();
    let tt = panel.n_periods();
    if r > 0 && r >= j.min(t0) {
        return Err(Error::InvalidInput(format!("factor count {r} must be below min(donors {j}, pre-periods {t0})")));
    }
    let y_all = panel.outcome();
    let y = DMatrix::from_fn(j, tt, |i, t| y_all[(t, i + 1)]);
    let mut donor_cov = Vec::with_capacity(covariates.len());
    let mut treated_cov = Vec::with_capacity(covariates.len());
    for name in covariates {
        let m = panel.covariate(name).ok_or_else(|| Error::InvalidPanel(format!("missing covariate `{name}`")))?;
        donor_cov.push(DMatrix::from_fn(j, tt, |i, t| m[(t, i + 1)]));
        treated_cov.push((0..tt).map(|t| m[(t, 0)]).collect::<Vec<f64>>());
    }
    let cov = CovBlock::new(donor_cov)?;
    if cov.collinear {
        log::warn!("collinear covariates in fixed-effects fit; using pseudo-inverse");
    }

    // r = 0 first, then warm-start each additional factor from the previous fit.
    let mut sol = alternate(&y, &cov, 0, DVector::zeros(covariates.len()));
    let mut iterations = sol.iterations;
    for k in 1..=r {
        sol = alternate(&y, &cov, k, sol.gamma.clone());
        iterations += sol.iterations;
    }

    let adjusted = &y - cov.apply(&sol.gamma, j, tt) - &sol.common;
    let delta: Vec<f64> = (0..tt).map(|t| adjusted.column(t).mean()).collect();
    let grand = adjusted.mean();
    let unit_effects: Vec<f64> = (0..j).map(|i| adjusted.row(i).mean() - grand).collect();

    // factors and donor loadings from the low-rank part
    let (factors, donor_loadings) = if r == 0 {
        (vec![Vec::new(); tt], vec![Vec::new(); j])
    } else {
        let svd = sol.common.clone().svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let keep = &order[..r];
        let f: Vec<Vec<f64>> =
            (0..tt).map(|t| keep.iter().map(|&k| vt[(k, t)] * svd.singular_values[k]).collect()).collect();
        let l: Vec<Vec<f64>> = (0..j).map(|i| keep.iter().map(|&k| u[(i, k)]).collect()).collect();
        (f, l)
    };

    let x_gamma = |t: usize| -> f64 { treated_cov.iter().zip(sol.gamma.iter()).map(|(x, g)| x[t] * g).sum() };
    let base: Vec<f64> = (0..tt).map(|t| delta[t] + x_gamma(t)).collect();
    let pre_resid: Vec<f64> = (0..t0).map(|t| y_all[(t, 0)] - base[t]).collect();
    let (treated_effect, treated_loadings) = if r == 0 {
        (pre_resid.iter().sum::<f64>() / t0 as f64, Vec::new())
    } else {
        let design = DMatrix::from_fn(t0, r + 1, |t, k| if k == 0 { 1.0 } else { factors[t][k - 1] });
        let coef = design
            .svd(true, true)
            .solve(&DVector::from_column_slice(&pre_resid), 1e-12)
            .map_err(|e| Error::InvalidInput(format!("treated loadings: {e}")))?;
        (coef[0], coef.iter().skip(1).copied().collect())
    };
    let counterfactual_path: Vec<f64> = (0..tt)
        .map(|t| treated_effect + base[t] + factors[t].iter().zip(&treated_loadings).map(|(f, l)| f * l).sum::<f64>())
        .collect();
    let (att_series, att_mean) = gaps_after(panel, &counterfactual_path);
    let rmspe_pre = pre_rmspe_of(panel, &counterfactual_path);

    Ok(IfeFit {
        covariate_names: covariates.to_vec(),
        gamma: sol.gamma.iter().copied().collect(),
        delta,
        unit_effects,
        treated_effect,
        r,
        factors,
        donor_loadings,
        treated_loadings,
        counterfactual_path,
        att_series,
        att_mean,
        rmspe_pre,
        rss: sol.rss,
        iterations,
        collinear: cov.collinear,
    })
}
