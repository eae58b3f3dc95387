//! Standard synthetic control: donor weights on the simplex for a given
//! variable-importance vector V, the nested outer search over V, and the
//! regression-based V initialization.

use std::collections::BTreeMap;
use std::ops::{Add, Div, Mul};

use nalgebra::{DMatrix, DVector};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, simplex_least_squares, NelderMeadOptions, SimplexSolution};
use crate::panel::{sample_sd, DesignMatrices, PanelData};

/// Condition number of `X*'X*` above which the regression V is refused.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Nonnegative variable-importance weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VWeights(Vec<f64>);

impl VWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("V must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("V entries must be finite and nonnegative".into()));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("V must have a positive entry".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / total).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Donor weights, one per donor in panel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DonorWeights(pub Vec<f64>);

impl DonorWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.0.iter().all(|w| *w >= -1e-12) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFit {
    pub w: DonorWeights,
    pub v: VWeights,
    /// `Σ_j w_j Y_{j,t}` for every period.
    pub synthetic_path: Vec<f64>,
    pub rmspe_pre: f64,
    pub att_series: Vec<f64>,
    pub att_mean: f64,
    /// Best outer objective (pre-treatment MSPE) after each outer iteration.
    pub optimizer_trace: Vec<f64>,
    /// Final outer objective; equals `rmspe_pre²`.
    pub outer_objective: f64,
    /// `(X₁ − X₀W)' diag(V) (X₁ − X₀W)` at the returned weights.
    pub predictor_loss: f64,
}

/// Shares of the summed squared coefficients, `Σ c_v² / Σ_all c²`.
///
/// Generic so the arithmetic can be checked exactly with rationals.
pub fn contribution_shares<T>(coefficients: &BTreeMap<String, Vec<T>>) -> Result<BTreeMap<String, T>>
where
    T: Copy + Zero + PartialEq + Add<Output = T> + Mul<Output = T> + Div<Output = T>,
{
    let sums: BTreeMap<String, T> =
        coefficients.iter().map(|(k, cs)| (k.clone(), cs.iter().fold(T::zero(), |acc, &c| acc + c * c))).collect();
    let total = sums.values().fold(T::zero(), |acc, &s| acc + s);
    if total == T::zero() {
        return Err(Error::InvalidInput("all coefficients are zero".into()));
    }
    Ok(sums.into_iter().map(|(k, s)| (k, s / total)).collect())
}

/// Floating-point [`contribution_shares`].
pub fn v_contribution_shares(coefficients: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, f64>> {
    contribution_shares(coefficients)
}

/// Sum of squared coefficients over every variable.
pub fn sum_of_squares(coefficients: &[f64]) -> f64 {
    coefficients.iter().map(|c| c * c).sum()
}

/// Per-period OLS coefficients of `Y_t` on the standardized design (intercept
/// first), for `t` in the pre-treatment window. Rows: `k + 1`, columns: `T₀`.
pub fn regression_coefficients(design: &DesignMatrices, panel: &PanelData) -> Result<DMatrix<f64>> {
    let all = design.all_units();
    let (k, n) = all.shape();
    if n != panel.n_units() {
        return Err(Error::InvalidInput("design and panel disagree on the number of units".into()));
    }
    let mut xs = DMatrix::from_element(n, k + 1, 1.0);
    for c in 0..k {
        let sd = sample_sd(all.row(c).iter().copied());
        if !(sd > 0.0) {
            return Err(Error::Singular { condition: f64::INFINITY });
        }
        for i in 0..n {
            xs[(i, c + 1)] = all[(c, i)] / sd;
        }
    }
    let xtx = xs.tr_mul(&xs);
    let sv = xs.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if n < k + 1 || !(condition <= SINGULAR_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let chol = xtx.cholesky().ok_or(Error::Singular { condition })?;
    let t0 = panel.t0();
    let y = panel.outcome();
    let rhs = DMatrix::from_fn(n, t0, |i, t| y[(t, i)]);
    Ok(chol.solve(&xs.tr_mul(&rhs)))
}

/// Standardized summed squared regression coefficients (intercept excluded).
pub fn regression_v_init(design: &DesignMatrices, panel: &PanelData) -> Result<VWeights> {
    let beta = regression_coefficients(design, panel)?;
    let k = design.n_features();
    let sums: Vec<f64> = (1..=k).map(|r| beta.row(r).iter().map(|b| b * b).sum()).collect();
    VWeights::new(sums).map_err(|_| Error::Undefined("all regression coefficients are zero".into()))
}

/// Regression V, or uniform V when the regression is not estimable.
pub fn regression_v_or_uniform(design: &DesignMatrices, panel: &PanelData) -> (VWeights, bool) {
    match regression_v_init(design, panel) {
        Ok(v) => (v, true),
        Err(_) => (VWeights::uniform(design.n_features()), false),
    }
}

fn weighted_problem(design: &DesignMatrices, v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (k, j) = design.x0.shape();
    let a = DMatrix::from_fn(k, j, |r, c| v[r].sqrt() * design.x0[(r, c)]);
    let b = DVector::from_fn(k, |r, _| v[r].sqrt() * design.x1[r]);
    (a, b)
}

/// Full inner solve, including objective and optimality gap.
pub fn solve_inner(design: &DesignMatrices, v: &VWeights) -> Result<SimplexSolution> {
    if v.len() != design.n_features() {
        return Err(Error::InvalidInput(format!(
            "V has {} entries for {} design columns",
            v.len(),
            design.n_features()
        )));
    }
    let (a, b) = weighted_problem(design, v.as_slice());
    simplex_least_squares(&a, &b, 0.0)
}

/// `W*(V) = argmin (X₁ − X₀W)' diag(V) (X₁ − X₀W)` over the simplex.
pub fn solve_w_given_v(design: &DesignMatrices, v: &VWeights) -> Result<DonorWeights> {
    solve_inner(design, v).map(|s| DonorWeights(s.w.iter().copied().collect()))
}

/// Pre-treatment root mean squared gap between treated and synthetic paths.
pub fn rmspe(panel: &PanelData, w: &DonorWeights) -> f64 {
    let path = synthetic_path(panel, w);
    let y = panel.outcome();
    let t0 = panel.t0();
    let ss: f64 = (0..t0).map(|t| (y[(t, 0)] - path[t]).powi(2)).sum();
    (ss / t0 as f64).sqrt()
}

/// Post-period gaps `Y₁ₜ − Σ w_j Y_jt` and their mean.
pub fn att(panel: &PanelData, w: &DonorWeights) -> (Vec<f64>, f64) {
    let path = synthetic_path(panel, w);
    gaps_after(panel, &path)
}

pub(crate) fn gaps_after(panel: &PanelData, counterfactual: &[f64]) -> (Vec<f64>, f64) {
    let y = panel.outcome();
    let series: Vec<f64> = (panel.t0()..panel.n_periods()).map(|t| y[(t, 0)] - counterfactual[t]).collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    (series, mean)
}

pub(crate) fn pre_rmspe_of(panel: &PanelData, counterfactual: &[f64]) -> f64 {
    let y = panel.outcome();
    let t0 = panel.t0();
    ((0..t0).map(|t| (y[(t, 0)] - counterfactual[t]).powi(2)).sum::<f64>() / t0 as f64).sqrt()
}

pub fn synthetic_path(panel: &PanelData, w: &DonorWeights) -> Vec<f64> {
    let y = panel.outcome();
    (0..panel.n_periods()).map(|t| w.0.iter().enumerate().map(|(j, wj)| wj * y[(t, j + 1)]).sum()).collect()
}

fn pre_mspe(panel: &PanelData, w: &DVector<f64>) -> f64 {
    let y = panel.outcome();
    let t0 = panel.t0();
    let mut ss = 0.0;
    for t in 0..t0 {
        let synth: f64 = w.iter().enumerate().map(|(j, wj)| wj * y[(t, j + 1)]).sum();
        ss += (y[(t, 0)] - synth).powi(2);
    }
    ss / t0 as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedOptions {
    /// Random restarts in addition to the supplied start.
    pub restarts: usize,
    /// Inner solves allowed per restart.
    pub max_inner_solves: usize,
    pub seed: u64,
}

impl Default for NestedOptions {
    fn default() -> Self {
        Self { restarts: 3, max_inner_solves: 500, seed: 0 }
    }
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn assemble(
    panel: &PanelData,
    design: &DesignMatrices,
    v: VWeights,
    sol: SimplexSolution,
    trace: Vec<f64>,
) -> SynthFit {
    let w = DonorWeights(sol.w.iter().copied().collect());
    let synthetic_path = synthetic_path(panel, &w);
    let rmspe_pre = pre_rmspe_of(panel, &synthetic_path);
    let (att_series, att_mean) = gaps_after(panel, &synthetic_path);
    let predictor_loss = {
        let (a, b) = weighted_problem(design, v.as_slice());
        (a * &sol.w - b).norm_squared()
    };
    SynthFit {
        w,
        v,
        synthetic_path,
        rmspe_pre,
        att_series,
        att_mean,
        optimizer_trace: trace,
        outer_objective: rmspe_pre * rmspe_pre,
        predictor_loss,
    }
}

fn check_shapes(panel: &PanelData, design: &DesignMatrices) -> Result<()> {
    if design.n_donors() != panel.n_donors() {
        return Err(Error::InvalidInput(format!(
            "design has {} donors, panel has {}",
            design.n_donors(),
            panel.n_donors()
        )));
    }
    Ok(())
}

/// Single inner solve at the supplied V.
pub fn fixed_v_fit(panel: &PanelData, design: &DesignMatrices, v: &VWeights) -> Result<SynthFit> {
    check_shapes(panel, design)?;
    let sol = solve_inner(design, v)?;
    let obj = pre_mspe(panel, &sol.w);
    Ok(assemble(panel, design, v.clone(), sol, vec![obj]))
}

/// Nested fit: Nelder–Mead over a softmax parameterization of V, each
/// evaluation solving for W*(V) and scoring the pre-treatment MSPE.
///
/// The supplied `init` is scored exactly first, so the result is never worse
/// than [`fixed_v_fit`] at `init`.
pub fn nested_fit(
    panel: &PanelData,
    design: &DesignMatrices,
    init: &VWeights,
    opts: &NestedOptions,
) -> Result<SynthFit> {
    check_shapes(panel, design)?;
    let k = design.n_features();
    if init.len() != k {
        return Err(Error::InvalidInput(format!("init V has {} entries for {k} columns", init.len())));
    }
    let start = solve_inner(design, init)?;
    let mut best_obj = pre_mspe(panel, &start.w);
    let mut best_val = best_obj;
    let mut best = (init.clone(), start);
    let mut trace = vec![best_obj];
    if k == 1 {
        return Ok(assemble(panel, design, best.0, best.1, trace));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let floor = 1e-8_f64;
    let theta0: Vec<f64> = init.as_slice().iter().map(|v| v.max(floor).ln()).collect();
    let mut starts = vec![theta0];
    for _ in 0..opts.restarts {
        starts.push((0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect());
    }

    let nm_opts = NelderMeadOptions { max_evals: opts.max_inner_solves, step: 1.0, ftol: 1e-14 };
    for theta in starts {
        let mut local_best: Option<(f64, VWeights, SimplexSolution)> = None;
        let res = nelder_mead(
            |th| {
                let v = VWeights::new(softmax(th))?;
                let sol = match solve_inner(design, &v) {
                    Ok(sol) => sol,
                    // an unsolvable candidate V is simply a bad point for the outer search
                    Err(Error::NonConvergence { .. }) => return Ok(f64::INFINITY),
                    Err(e) => return Err(e),
                };
                let obj = pre_mspe(panel, &sol.w);
                if local_best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
                    local_best = Some((obj, v, sol));
                }
                Ok(obj)
            },
            &theta,
            &nm_opts,
        )?;
        for f in res.trace {
            best_obj = best_obj.min(f);
            trace.push(best_obj);
        }
        if let Some((obj, v, sol)) = local_best {
            if obj < best_val {
                best_val = obj;
                best = (v, sol);
            }
        }
    }
    let mut fit = assemble(panel, design, best.0, best.1, trace);
    if let Some(last) = fit.optimizer_trace.last_mut() {
        *last = last.min(fit.outer_objective);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_design, CompositionalSpec, Covariate, OmissionChoice};

    fn map(items: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn contribution_arithmetic() {
        let s1 = sum_of_squares(&[15.0, 6.0]);
        let s2 = sum_of_squares(&[9.0, -6.0]);
        let s3 = sum_of_squares(&[-9.0, -15.0]);
        assert_eq!((s1, s2, s3), (261.0, 117.0, 306.0));

        let shares = v_contribution_shares(&map(&[("alpha", &[10.0]), ("x", &[15.0, 6.0])])).unwrap();
        assert_eq!(shares["alpha"], 100.0 / 361.0);
        let shares = v_contribution_shares(&map(&[("alpha", &[10.0]), ("x", &[9.0, -6.0])])).unwrap();
        assert_eq!(shares["alpha"], 100.0 / 217.0);
        let shares = v_contribution_shares(&map(&[("alpha", &[10.0]), ("x", &[-9.0, -15.0])])).unwrap();
        assert_eq!(shares["alpha"], 100.0 / 406.0);
        assert!(v_contribution_shares(&map(&[("a", &[0.0])])).is_err());
    }

    fn panel_from(y: DMatrix<f64>, t0: usize, covs: Vec<Covariate>) -> PanelData {
        let n = y.ncols();
        let t = y.nrows();
        PanelData::new((0..n).map(|i| format!("u{i}")).collect(), (1..=t as i64).collect(), y, t0, covs).unwrap()
    }

    #[test]
    fn regression_v_concentrates_on_the_predictive_covariate() {
        // y_{i,t} = (t+1) * x_i exactly; z is unrelated noise
        let n = 12;
        let t = 6;
        let xs: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let zs: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let y = DMatrix::from_fn(t, n, |r, c| (r + 1) as f64 * xs[c]);
        let panel = panel_from(y, 4, vec![]);
        let design = DesignMatrices::from_rows(&[xs[0], zs[0]], &[&xs[1..], &zs[1..]]).unwrap();
        let v = regression_v_init(&design, &panel).unwrap();
        assert!(v.as_slice()[0] > 1.0 - 1e-12, "{:?}", v);
        assert!(v.as_slice()[1] < 1e-12);
    }

    #[test]
    fn regression_v_single_column_is_one() {
        let y = DMatrix::from_fn(3, 5, |r, c| (r * c) as f64 + (c as f64).sqrt());
        let panel = panel_from(y, 2, vec![]);
        let design = DesignMatrices::from_rows(&[1.0], &[&[2.0, 3.0, 5.0, 4.0]]).unwrap();
        assert_eq!(regression_v_init(&design, &panel).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn regression_v_rejects_collinear_categories() {
        let spec = CompositionalSpec::from_parts(&[("g", &["a", "b"])], &[]).unwrap();
        let n = 6;
        let a = DMatrix::from_fn(4, n, |r, c| 0.2 + 0.1 * ((r + c) % 3) as f64);
        let b = a.map(|v| 1.0 - v);
        let y = DMatrix::from_fn(4, n, |r, c| (r + c) as f64);
        let panel = panel_from(
            y,
            3,
            vec![Covariate { name: "a".into(), values: a }, Covariate { name: "b".into(), values: b }],
        );
        let design = build_design(&panel, &spec, &OmissionChoice::all_categories(&spec)).unwrap();
        assert!(matches!(regression_v_init(&design, &panel), Err(Error::Singular { .. })));
        let (v, ok) = regression_v_or_uniform(&design, &panel);
        assert!(!ok);
        assert_eq!(v, VWeights::uniform(3));
    }

    #[test]
    fn inner_solve_exact_donor_and_midpoint() {
        let d = DesignMatrices::from_rows(&[3.0, 4.0], &[&[1.0, 3.0, 0.0], &[1.0, 4.0, 9.0]]).unwrap();
        let s = solve_inner(&d, &VWeights::uniform(2)).unwrap();
        assert!((s.w[1] - 1.0).abs() < 1e-10);
        assert!(s.objective < 1e-18);

        let d = DesignMatrices::from_rows(&[0.5], &[&[0.0, 1.0]]).unwrap();
        let w = solve_w_given_v(&d, &VWeights::uniform(1)).unwrap();
        assert!((w.0[0] - 0.5).abs() < 1e-10 && (w.0[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn v_normalization_and_validation() {
        assert_eq!(VWeights::new(vec![2.0, 6.0]).unwrap().as_slice(), &[0.25, 0.75]);
        assert!(VWeights::new(vec![-1.0, 2.0]).is_err());
        assert!(VWeights::new(vec![0.0, 0.0]).is_err());
        assert!(VWeights::new(vec![]).is_err());
    }

    #[test]
    fn rmspe_and_att_basics() {
        // donor path = treated − 0.3 in every period
        let y = DMatrix::from_fn(5, 2, |r, c| r as f64 + if c == 0 { 0.3 } else { 0.0 });
        let panel = panel_from(y, 3, vec![]);
        let w = DonorWeights(vec![1.0]);
        assert!((rmspe(&panel, &w) - 0.3).abs() < 1e-12);
        let (series, mean) = att(&panel, &w);
        assert_eq!(series.len(), 2);
        assert!((mean - 0.3).abs() < 1e-12);
    }

    #[test]
    fn att_of_constant_effect() {
        let mut y = DMatrix::from_fn(6, 3, |r, c| 0.09 + 0.001 * r as f64 + 0.002 * c as f64);
        for t in 0..6 {
            y[(t, 0)] = 0.5 * (y[(t, 1)] + y[(t, 2)]) + if t >= 3 { 0.017 } else { 0.0 };
        }
        let panel = panel_from(y, 3, vec![]);
        let (_, mean) = att(&panel, &DonorWeights(vec![0.5, 0.5]));
        assert!((mean - 0.017).abs() < 1e-12);
    }

    #[test]
    fn nested_fit_perfect_donor() {
        let n = 5;
        let y = DMatrix::from_fn(8, n, |r, c| {
            let base = if c == 0 { 1 } else { c };
            (base as f64).sin() + 0.1 * r as f64 * base as f64 + if c == 0 && r >= 5 { 2.0 } else { 0.0 }
        });
        let z = DMatrix::from_fn(8, n, |_, c| if c == 0 { 1.0 } else { c as f64 });
        let spec = CompositionalSpec::from_parts(&[], &["z"]).unwrap();
        let panel = panel_from(y, 5, vec![Covariate { name: "z".into(), values: z }]);
        let design = build_design(&panel, &spec, &OmissionChoice(vec![])).unwrap();
        let fit = nested_fit(&panel, &design, &VWeights::uniform(2), &NestedOptions::default()).unwrap();
        assert!(fit.rmspe_pre < 1e-6);
        for a in &fit.att_series {
            assert!((a - 2.0).abs() < 1e-6);
        }
        assert!(fit.optimizer_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((fit.outer_objective - fit.rmspe_pre.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn nested_never_worse_than_its_start() {
        let n = 8;
        let y = DMatrix::from_fn(10, n, |r, c| ((r * 3 + c * 5) % 7) as f64 * 0.1 + c as f64 * 0.05);
        let z1 = DMatrix::from_fn(10, n, |r, c| ((c * 13 + r) % 5) as f64);
        let z2 = DMatrix::from_fn(10, n, |_, c| (c as f64 * 1.7).cos());
        let spec = CompositionalSpec::from_parts(&[], &["z1", "z2"]).unwrap();
        let panel = panel_from(
            y,
            6,
            vec![Covariate { name: "z1".into(), values: z1 }, Covariate { name: "z2".into(), values: z2 }],
        );
        let design = build_design(&panel, &spec, &OmissionChoice(vec![])).unwrap().standardized();
        let init = VWeights::new(vec![0.7, 0.2, 0.1]).unwrap();
        let fixed = fixed_v_fit(&panel, &design, &init).unwrap();
        let nested = nested_fit(&panel, &design, &init, &NestedOptions::default()).unwrap();
        assert!(nested.outer_objective <= fixed.outer_objective + 1e-15);
        assert!(nested.optimizer_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(nested.w.is_feasible(1e-8));
    }

    #[test]
    fn single_column_nested_equals_fixed() {
        let y = DMatrix::from_fn(6, 4, |r, c| (r + c * c) as f64);
        let panel = panel_from(y, 4, vec![]);
        let design = build_design(&panel, &CompositionalSpec::default(), &OmissionChoice(vec![])).unwrap();
        let v = VWeights::uniform(1);
        let a = fixed_v_fit(&panel, &design, &v).unwrap();
        let b = nested_fit(&panel, &design, &v, &NestedOptions::default()).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.att_mean, b.att_mean);
    }

    #[test]
    fn nested_recovers_generating_weights() {
        // treated is an exact convex combination of donors in outcomes and covariates
        let truth = [0.1, 0.4, 0.0, 0.35, 0.15];
        let t = 12;
        let donors = DMatrix::from_fn(t, 5, |r, c| ((r + 1) as f64 * (c as f64 + 1.3)).sin() + 0.2 * c as f64);
        let mut y = DMatrix::zeros(t, 6);
        for r in 0..t {
            y[(r, 0)] = (0..5).map(|j| truth[j] * donors[(r, j)]).sum();
            for j in 0..5 {
                y[(r, j + 1)] = donors[(r, j)];
            }
        }
        let covs: Vec<Covariate> = (0..3)
            .map(|q| {
                let dz: Vec<f64> = (0..5).map(|j| ((j * 7 + q * 3) % 11) as f64 / 3.0).collect();
                let treated: f64 = (0..5).map(|j| truth[j] * dz[j]).sum();
                Covariate {
                    name: format!("z{q}"),
                    values: DMatrix::from_fn(t, 6, |_, c| if c == 0 { treated } else { dz[c - 1] }),
                }
            })
            .collect();
        let spec = CompositionalSpec::from_parts(&[], &["z0", "z1", "z2"]).unwrap();
        let panel = panel_from(y, 8, covs);
        let design = build_design(&panel, &spec, &OmissionChoice(vec![])).unwrap();
        let fit = nested_fit(&panel, &design, &VWeights::uniform(4), &NestedOptions::default()).unwrap();
        for (w, t) in fit.w.0.iter().zip(truth) {
            assert!((w - t).abs() < 1e-3, "{:?}", fit.w);
        }
    }
}
