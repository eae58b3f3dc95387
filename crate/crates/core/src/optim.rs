//! Numerical building blocks shared by the estimators: a primal active-set
//! solver for ridge-penalized least squares on the probability simplex, and
//! a small Nelder–Mead minimizer used for the outer search over V.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of the ridge added to every simplex solve. It makes the
/// problem strictly convex, so among equally good weight vectors the solver
/// converges to the minimum-norm one.
pub const MIN_NORM_RIDGE: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub w: DVector<f64>,
    /// `‖A w − b‖²` at the returned weights (penalty excluded).
    pub objective: f64,
    /// Frank–Wolfe duality gap of the penalized objective, an upper bound on
    /// its suboptimality.
    pub gap: f64,
    pub iterations: usize,
}

/// Minimizes `‖A w − b‖² + ridge·‖w‖²` subject to `w ≥ 0, Σw = 1`.
///
/// `ridge` is added on top of the internal minimum-norm ridge. On the
/// simplex an L2 penalty toward uniform weights differs from `‖w‖²` only by
/// a constant, so a dispersion penalty can be passed through `ridge`.
pub fn simplex_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<SimplexSolution> {
    let (m, n) = a.shape();
    if n == 0 {
        return Err(Error::EmptyDonorPool);
    }
    if b.len() != m {
        return Err(Error::InvalidInput(format!("b has length {}, expected {m}", b.len())));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidInput(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entries in least-squares problem".into()));
    }

    let scale = (a.norm_squared() / n as f64).max(f64::MIN_POSITIVE);
    let rho = ridge + MIN_NORM_RIDGE * scale;
    // Gradient comparisons are made at this absolute tolerance.
    let tol = 1e-14 * (scale + a.tr_mul(b).amax() + rho);

    let residual = |w: &DVector<f64>| a * w - b;
    let penalized_grad = |w: &DVector<f64>| a.tr_mul(&residual(w)) + w * rho;

    // start at the best vertex
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for j in 0..n {
        let v = (a.column(j) - b).norm_squared();
        if v < best_val {
            best_val = v;
            best = j;
        }
    }
    let mut w = DVector::zeros(n);
    w[best] = 1.0;
    let mut free = vec![best];
    // Indices that entered and were pushed straight back out with a zero
    // step. They may not re-enter until a step makes progress, which stops
    // the add/drop cycling seen on nearly flat directions.
    let mut rejected: Vec<usize> = Vec::new();
    let mut last_entered: Option<usize> = None;
    let max_iter = 10 * n + 100;

    for iter in 1..=max_iter {
        let candidate = solve_on_support(a, b, &free, rho);
        let blocking = free
            .iter()
            .zip(candidate.iter())
            .filter(|(_, &c)| c <= 0.0)
            .map(|(&i, &c)| (i, w[i] / (w[i] - c)))
            .min_by(|x, y| x.1.total_cmp(&y.1));

        match blocking {
            None => {
                for (&i, &c) in free.iter().zip(candidate.iter()) {
                    w[i] = c;
                }
                let g = penalized_grad(&w);
                let level = free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
                let entering = (0..n)
                    .filter(|i| !free.contains(i) && !rejected.contains(i))
                    .map(|i| (i, g[i]))
                    .min_by(|x, y| x.1.total_cmp(&y.1));
                match entering {
                    Some((i, gi)) if gi < level - tol => {
                        free.push(i);
                        last_entered = Some(i);
                    }
                    _ => return Ok(finish(a, b, w, rho, iter)),
                }
            }
            Some((_, alpha)) => {
                let alpha = alpha.clamp(0.0, 1.0);
                for (&i, &c) in free.iter().zip(candidate.iter()) {
                    w[i] += alpha * (c - w[i]);
                }
                match last_entered.take() {
                    Some(e) if alpha == 0.0 && w[e] <= 1e-15 => rejected.push(e),
                    _ if alpha > 0.0 => rejected.clear(),
                    _ => {}
                }
                // drop every index that hit the boundary
                free.retain(|&i| w[i] > 1e-15);
                for i in 0..n {
                    if !free.contains(&i) {
                        w[i] = 0.0;
                    }
                }
                if free.is_empty() {
                    // numerically degenerate step; restart from the best vertex
                    w.fill(0.0);
                    w[best] = 1.0;
                    free.push(best);
                }
            }
        }
    }
    let sol = finish(a, b, w, rho, max_iter);
    Err(Error::NonConvergence { iterations: max_iter, gap: sol.gap, best: sol.w.iter().copied().collect() })
}

/// Ridge solution restricted to `support` with the sum-to-one constraint
/// eliminated: `w = 1/|F| + N z` with `N` an orthonormal basis of `1⊥`, so
/// `‖w‖² = 1/|F| + ‖z‖²`.
fn solve_on_support(a: &DMatrix<f64>, b: &DVector<f64>, support: &[usize], rho: f64) -> Vec<f64> {
    let f = support.len();
    if f == 1 {
        return vec![1.0];
    }
    let basis = sum_zero_basis(f);
    let af = DMatrix::from_fn(a.nrows(), f, |r, c| a[(r, support[c])]);
    let centre = DVector::from_element(f, 1.0 / f as f64);
    let r = b - &af * &centre;
    let bmat = &af * &basis;
    let svd = bmat.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut z = DVector::zeros(f - 1);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let denom = s * s + rho;
        if denom <= 0.0 {
            continue;
        }
        let coef = s * u.column(i).dot(&r) / denom;
        z += vt.row(i).transpose() * coef;
    }
    let w = centre + basis * z;
    w.iter().copied().collect()
}

/// Columns 2..n of the Householder reflector mapping `e1` onto `1/√n`.
fn sum_zero_basis(n: usize) -> DMatrix<f64> {
    let mut v = DVector::from_element(n, 1.0);
    v[0] += (n as f64).sqrt();
    let vv = v.norm_squared();
    DMatrix::from_fn(n, n - 1, |r, c| {
        let col = c + 1;
        let id = if r == col { 1.0 } else { 0.0 };
        id - 2.0 * v[r] * v[col] / vv
    })
}

fn finish(a: &DMatrix<f64>, b: &DVector<f64>, mut w: DVector<f64>, rho: f64, iterations: usize) -> SimplexSolution {
    w.iter_mut().for_each(|x| *x = x.max(0.0));
    let s = w.sum();
    w /= s;
    let res = a * &w - b;
    let g = a.tr_mul(&res) * 2.0 + &w * (2.0 * rho);
    let gap = (g.dot(&w) - g.min()).max(0.0);
    SimplexSolution { objective: res.norm_squared(), w, gap, iterations }
}

/// Frank–Wolfe gap `∇f·w − min ∇f` of `‖A w − b‖²` (no penalty).
pub fn simplex_gap(a: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let g = a.tr_mul(&(a * w - b)) * 2.0;
    (g.dot(w) - g.min()).max(0.0)
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Initial simplex edge length.
    pub step: f64,
    /// Stop once the spread of simplex values falls below this (relative).
    pub ftol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 500, step: 1.0, ftol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    /// Best value after each iteration (non-increasing).
    pub trace: Vec<f64>,
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction ½, shrink ½).
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        let v = f(x)?;
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    };
    let mut pts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals)?;
    pts.push((x0.to_vec(), f0));
    for i in 0..n {
        if evals >= opts.max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += opts.step;
        let fx = eval(&x, &mut evals)?;
        pts.push((x, fx));
    }
    let mut trace = Vec::new();
    let sort = |pts: &mut Vec<(Vec<f64>, f64)>| pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut pts);
    trace.push(pts[0].1);
    if pts.len() < n + 1 || n == 0 {
        let (x, fx) = pts.swap_remove(0);
        return Ok(NelderMeadResult { x, fx, evals, trace });
    }

    while evals < opts.max_evals {
        let (fbest, fworst) = (pts[0].1, pts[n].1);
        if (fworst - fbest).abs() <= opts.ftol * (1.0 + fbest.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|d| pts[..n].iter().map(|p| p.0[d]).sum::<f64>() / n as f64).collect();
        let worst = pts[n].0.clone();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals)?;
        if fr < pts[0].1 {
            let xe = along(-2.0);
            let fe = if evals < opts.max_evals { eval(&xe, &mut evals)? } else { f64::INFINITY };
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < pts[n].1 {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals)?;
                (xc, fc)
            };
            if fc < pts[n].1.min(fr) {
                pts[n] = (xc, fc);
            } else {
                let x_best = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    if evals >= opts.max_evals {
                        break;
                    }
                    let xs: Vec<f64> = x_best.iter().zip(&p.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let fs = eval(&xs, &mut evals)?;
                    *p = (xs, fs);
                }
            }
        }
        sort(&mut pts);
        trace.push(pts[0].1);
    }
    let (x, fx) = pts.swap_remove(0);
    Ok(NelderMeadResult { x, fx, evals, trace })
}
