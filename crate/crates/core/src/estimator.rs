//! Two-step estimator for interactive fixed effects.
//!
//! Stage one solves a nuclear-norm penalized relaxation of the likelihood by
//! proximal gradient ascent with singular-value soft-thresholding, using a
//! data-driven tuning parameter seeded from a two-way fixed-effect fit. Stage
//! two extracts a rank-`d_f` factor structure from the penalized effects
//! matrix and refines all parameter blocks jointly by monotone gradient
//! ascent on the unpenalized likelihood.
//!
//! Everything here is deterministic given its inputs: no randomness enters
//! the pipeline, so refits of identical data are bit-identical.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{
    self, derivs_at_index, loglik_at_index, score_blocks_from_d1, Family, FactorParams,
};
use crate::panel::PanelData;

/// Options for the full pipeline. `Default` gives the documented tolerances.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Warm start: skip the penalized stage and refine from these parameters.
    pub init: Option<FactorParams>,
    /// Relative gradient tolerance for the refinement stage.
    pub refine_tol: f64,
    pub refine_max_iters: usize,
    /// Relative objective-change tolerance for the penalized stage.
    pub nuclear_obj_tol: f64,
    /// Proximal fixed-point residual tolerance for the penalized stage.
    pub nuclear_prox_tol: f64,
    pub nuclear_max_iters: usize,
    /// Relative gradient sup-norm tolerance for the two-way Newton stage
    /// (scaled by `1 + |loglik|`; an absolute tolerance at this objective
    /// scale would sit below what f64 line searches can certify).
    pub twoway_tol: f64,
    pub twoway_max_iters: usize,
    pub armijo_slope: f64,
    pub armijo_contraction: f64,
    /// Scale on the score operator norm for the initial tuning value.
    pub phi_initial_scale: f64,
    /// Scale on the score operator norm for the updated tuning value.
    pub phi_update_scale: f64,
    /// `c0` in the zero-factor rule of the eigenvalue-ratio selector.
    pub rank_zero_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            init: None,
            refine_tol: 1e-6,
            refine_max_iters: 5000,
            nuclear_obj_tol: 1e-9,
            nuclear_prox_tol: 1e-6,
            nuclear_max_iters: 10_000,
            twoway_tol: 1e-6,
            twoway_max_iters: 500,
            armijo_slope: 1e-4,
            armijo_contraction: 0.5,
            phi_initial_scale: 0.5,
            phi_update_scale: 1.05,
            rank_zero_threshold: 1.0,
        }
    }
}

/// Output of the two-way fixed-effect initialization.
#[derive(Debug, Clone)]
pub struct TwowayInit {
    pub beta: DVector<f64>,
    /// Additive effect matrix `sigma_it = a_i + g_t`, with `sum_t g_t = 0`.
    pub sigma: DMatrix<f64>,
    pub unit_effects: DVector<f64>,
    pub period_effects: DVector<f64>,
    pub iterations: usize,
}

/// Output of the penalized stage.
#[derive(Debug, Clone)]
pub struct NucStageResult {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Penalty level the problem was solved at.
    pub phi: f64,
    pub iterations: usize,
    /// Penalized objective per accepted step, on the per-cell scale
    /// `(L - phi * ||Sigma||_nuc) / (N*T)`. Non-decreasing.
    pub objective_trace: Vec<f64>,
}

/// Tuning values and the interim penalized solution they were derived from.
#[derive(Debug, Clone)]
pub struct TuningSelection {
    pub phi_tilde: f64,
    pub phi_hat: f64,
    pub interim: NucStageResult,
    /// Best rank-`d_f` approximation of the interim effects matrix.
    pub sigma_truncated: DMatrix<f64>,
}

/// Factors and loadings extracted from an effects matrix by SVD.
#[derive(Debug, Clone)]
pub struct FactorExtraction {
    pub alpha: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Set when the `d_f`-th singular value is below `1e-10 * sigma_1`.
    pub rank_deficient: bool,
}

/// Converged (or best-effort) estimate with diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: FactorParams,
    pub d_f: usize,
    pub loglik: f64,
    /// Final sup-norms of the `(beta, alpha, gamma)` gradient blocks.
    pub grad_norms: [f64; 3],
    pub converged: bool,
    pub iterations: usize,
    /// Loglikelihood at the initial point and after each accepted step.
    pub loglik_trace: Vec<f64>,
    /// `(phi_tilde, phi_hat)` when the penalized stage ran.
    pub tuning: Option<(f64, f64)>,
}

/// Eigenvalue-ratio factor-count selection report.
#[derive(Debug, Clone)]
pub struct FactorSelection {
    /// Singular values of the penalized effects matrix, descending.
    pub singular_values: Vec<f64>,
    /// `sigma_r / sigma_{r+1}` for `r = 1..=r_max`.
    pub ratios: Vec<f64>,
    pub chosen: usize,
    /// The `c0 * sqrt(max(N, T))` cutoff below which zero factors is returned.
    pub zero_cutoff: f64,
}

// ---------------------------------------------------------------------------
// Linear algebra helpers
// ---------------------------------------------------------------------------

/// Thin SVD with singular values sorted descending.
pub(crate) fn svd_parts(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let sorted = DVector::from_iterator(s.len(), order.iter().map(|&i| s[i]));
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt_sorted = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    (u_sorted, sorted, vt_sorted)
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Singular-value soft-thresholding: shrink every singular value by
/// `threshold` and clip at zero. The proximal operator of the nuclear norm.
pub fn svt(m: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let (u, s, vt) = svd_parts(m);
    let shrunk = DVector::from_iterator(s.len(), s.iter().map(|v| (v - threshold).max(0.0)));
    &u * DMatrix::from_diagonal(&shrunk) * &vt
}

fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.max()
}

/// `sum_it x_it x_it'` over all cells, a `K x K` Gram matrix.
fn covariate_gram(data: &PanelData) -> DMatrix<f64> {
    let k = data.n_covariates();
    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v: f64 = data.x[a].iter().zip(data.x[b].iter()).map(|(p, q)| p * q).sum();
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    gram
}

// ---------------------------------------------------------------------------
// Two-way fixed-effect initialization
// ---------------------------------------------------------------------------

/// Bound on parameter magnitudes past which the concave fits are declared
/// divergent (the index is saturated well before this).
const DIVERGENCE_BOUND: f64 = 50.0;

/// Ridge on the two-way effects. Degenerate rows or columns (all-0 / all-1
/// outcomes) have no finite unpenalized maximizer; the ridge keeps their
/// effects finite without materially moving the rest. The two-way stage only
/// seeds the tuning rule, so the perturbation is immaterial downstream.
const TWOWAY_RIDGE: f64 = 1e-6;

/// A converged fit with essentially zero loss per cell classified every
/// outcome perfectly: the panel is separated and no finite MLE exists.
const SEPARATION_MEAN_LL: f64 = -1e-3;

/// Maximum-likelihood fit of the additive two-way effects model
/// `Z_it = X_it'beta + a_i + g_t` by damped Newton.
///
/// The period effect of the last period is pinned to zero during the solve
/// (the additive model is otherwise shift-indeterminate); afterwards the
/// effects are recentered so `sum_t g_t = 0`.
pub fn twoway_init(data: &PanelData, family: Family, opts: &FitOptions) -> Result<TwowayInit> {
    let (n, t, k) = (data.n_units, data.n_periods, data.n_covariates());
    let dim = k + n + (t - 1);
    let mut theta = DVector::<f64>::zeros(dim);

    let unpack = |theta: &DVector<f64>| {
        let beta = DVector::from_iterator(k, theta.iter().take(k).copied());
        let a = DVector::from_iterator(n, theta.iter().skip(k).take(n).copied());
        let mut g = DVector::zeros(t);
        for j in 0..t - 1 {
            g[j] = theta[k + n + j];
        }
        (beta, a, g)
    };
    let index_of = |beta: &DVector<f64>, a: &DVector<f64>, g: &DVector<f64>| {
        let mut z = DMatrix::zeros(n, t);
        for i in 0..n {
            for j in 0..t {
                let mut v = a[i] + g[j];
                for (kk, xk) in data.x.iter().enumerate() {
                    v += xk[(i, j)] * beta[kk];
                }
                z[(i, j)] = v;
            }
        }
        z
    };

    // Penalized objective: loglik minus a tiny ridge on the effects.
    let penalized = |ll: f64, theta: &DVector<f64>| {
        let effects_ss: f64 = theta.iter().skip(k).map(|v| v * v).sum();
        ll - 0.5 * TWOWAY_RIDGE * effects_ss
    };

    let mut iterations = 0;
    loop {
        let (beta, a, g) = unpack(&theta);
        if theta.amax() > DIVERGENCE_BOUND {
            return Err(Error::Nonconvergence(iterations));
        }
        let z = index_of(&beta, &a, &g);
        let ll = loglik_at_index(data, &z, family)?;
        let obj = penalized(ll, &theta);
        let bundle = derivs_at_index(data, &z, family)?;

        // Penalized gradient over (beta, a, g[..t-1]).
        let mut grad = DVector::zeros(dim);
        for (kk, xk) in data.x.iter().enumerate() {
            grad[kk] = bundle.d1.iter().zip(xk.iter()).map(|(p, q)| p * q).sum();
        }
        for i in 0..n {
            grad[k + i] = bundle.d1.row(i).iter().sum::<f64>() - TWOWAY_RIDGE * theta[k + i];
        }
        for j in 0..t - 1 {
            grad[k + n + j] =
                bundle.d1.column(j).iter().sum::<f64>() - TWOWAY_RIDGE * theta[k + n + j];
        }
        if grad.amax() <= opts.twoway_tol * (1.0 + obj.abs()) {
            if ll / (n * t) as f64 > SEPARATION_MEAN_LL {
                // Perfect classification: the unpenalized MLE does not exist.
                return Err(Error::Nonconvergence(iterations));
            }
            let g_centered_mean = g.iter().sum::<f64>() / t as f64;
            let a_final = a.map(|v| v + g_centered_mean);
            let g_final = g.map(|v| v - g_centered_mean);
            let mut sigma = DMatrix::zeros(n, t);
            for i in 0..n {
                for j in 0..t {
                    sigma[(i, j)] = a_final[i] + g_final[j];
                }
            }
            return Ok(TwowayInit {
                beta,
                sigma,
                unit_effects: a_final,
                period_effects: g_final,
                iterations,
            });
        }
        if iterations >= opts.twoway_max_iters {
            return Err(Error::Nonconvergence(iterations));
        }

        // Negated penalized Hessian (positive definite).
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..t {
                let w = -bundle.d2[(i, j)];
                for k1 in 0..k {
                    let x1 = data.x[k1][(i, j)];
                    for k2 in k1..k {
                        h[(k1, k2)] += w * x1 * data.x[k2][(i, j)];
                    }
                    h[(k1, k + i)] += w * x1;
                    if j < t - 1 {
                        h[(k1, k + n + j)] += w * x1;
                    }
                }
                h[(k + i, k + i)] += w;
                if j < t - 1 {
                    h[(k + n + j, k + n + j)] += w;
                    h[(k + i, k + n + j)] += w;
                }
            }
        }
        for d in k..dim {
            h[(d, d)] += TWOWAY_RIDGE;
        }
        for r in 0..dim {
            for c in 0..r {
                h[(r, c)] = h[(c, r)];
            }
        }

        let mut ridge = 0.0;
        let step = loop {
            let mut hr = h.clone();
            if ridge > 0.0 {
                for d in 0..dim {
                    hr[(d, d)] += ridge;
                }
            }
            match hr.cholesky() {
                Some(chol) => break chol.solve(&grad),
                None => {
                    ridge = if ridge == 0.0 { 1e-8 } else { ridge * 100.0 };
                    if ridge > 1.0 {
                        return Err(Error::Nonconvergence(iterations));
                    }
                }
            }
        };

        // Backtracking on the penalized objective.
        let slope = grad.dot(&step);
        let mut scale = 1.0;
        loop {
            let candidate = &theta + scale * &step;
            let (cb, ca, cg) = unpack(&candidate);
            let cz = index_of(&cb, &ca, &cg);
            if let Ok(cll) = loglik_at_index(data, &cz, family) {
                if penalized(cll, &candidate) >= obj + opts.armijo_slope * scale * slope {
                    theta = candidate;
                    break;
                }
            }
            scale *= opts.armijo_contraction;
            if scale < 1e-14 {
                return Err(Error::Nonconvergence(iterations));
            }
        }
        iterations += 1;
    }
}

/// Maximum-likelihood fit of `beta` with no effects at all (concave Newton).
pub fn no_effects_ml(data: &PanelData, family: Family, opts: &FitOptions) -> Result<DVector<f64>> {
    let k = data.n_covariates();
    let mut beta = DVector::<f64>::zeros(k);
    for iteration in 0..opts.twoway_max_iters {
        if beta.amax() > DIVERGENCE_BOUND {
            return Err(Error::Nonconvergence(iteration));
        }
        let mut z = DMatrix::zeros(data.n_units, data.n_periods);
        for (kk, xk) in data.x.iter().enumerate() {
            z.zip_apply(xk, |zi, xi| *zi += beta[kk] * xi);
        }
        let ll = loglik_at_index(data, &z, family)?;
        let bundle = derivs_at_index(data, &z, family)?;
        let mut grad = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (kk, xk) in data.x.iter().enumerate() {
            grad[kk] = bundle.d1.iter().zip(xk.iter()).map(|(p, q)| p * q).sum();
        }
        for k1 in 0..k {
            for k2 in k1..k {
                let v: f64 = bundle
                    .d2
                    .iter()
                    .zip(data.x[k1].iter().zip(data.x[k2].iter()))
                    .map(|(w, (p, q))| -w * p * q)
                    .sum();
                h[(k1, k2)] = v;
                h[(k2, k1)] = v;
            }
        }
        if grad.amax() <= opts.twoway_tol * (1.0 + ll.abs()) {
            return Ok(beta);
        }
        let step = h
            .cholesky()
            .ok_or(Error::SingularW)?
            .solve(&grad);
        let slope = grad.dot(&step);
        let mut scale = 1.0;
        loop {
            let candidate = &beta + scale * &step;
            let mut cz = DMatrix::zeros(data.n_units, data.n_periods);
            for (kk, xk) in data.x.iter().enumerate() {
                cz.zip_apply(xk, |zi, xi| *zi += candidate[kk] * xi);
            }
            if let Ok(cll) = loglik_at_index(data, &cz, family) {
                if cll >= ll + opts.armijo_slope * scale * slope {
                    beta = candidate;
                    break;
                }
            }
            scale *= opts.armijo_contraction;
            if scale < 1e-14 {
                return Err(Error::Nonconvergence(iteration));
            }
        }
    }
    Err(Error::Nonconvergence(opts.twoway_max_iters))
}

// ---------------------------------------------------------------------------
// Penalized stage
// ---------------------------------------------------------------------------

/// Score of the unpenalized loglikelihood with respect to the effects matrix:
/// the `N x T` matrix of per-cell scores at `Z = X beta + sigma`.
pub fn sigma_score(
    data: &PanelData,
    family: Family,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut z = sigma.clone();
    for (kk, xk) in data.x.iter().enumerate() {
        let b = beta[kk];
        if b != 0.0 {
            z.zip_apply(xk, |zi, xi| *zi += b * xi);
        }
    }
    Ok(derivs_at_index(data, &z, family)?.d1)
}

/// Solve the nuclear-norm penalized problem
/// `max_(beta, Sigma) L(beta, Sigma) - phi * ||Sigma||_nuc`
/// by proximal gradient ascent with backtracking.
///
/// The reported objective trace is on the per-cell scale (divided by `N*T`)
/// and is non-decreasing across accepted steps.
pub fn fit_nuclear(
    data: &PanelData,
    family: Family,
    phi: f64,
    init: Option<(DVector<f64>, DMatrix<f64>)>,
    opts: &FitOptions,
) -> Result<NucStageResult> {
    if !(phi > 0.0) {
        return Err(Error::Invalid(format!("phi must be positive, got {phi}")));
    }
    let (n, t) = (data.n_units, data.n_periods);
    let cells = (n * t) as f64;
    let (mut beta, mut sigma) = match init {
        Some((b, s)) => (b, s),
        None => (DVector::zeros(data.n_covariates()), DMatrix::zeros(n, t)),
    };

    let b_bar = family.curvature_bound();
    let gram_lmax = lambda_max_sym(&covariate_gram(data)).max(1e-12);
    let s_beta = 1.0 / (b_bar * gram_lmax);
    let s_sigma = 1.0 / b_bar;

    let nuclear_norm = |m: &DMatrix<f64>| m.clone().singular_values().iter().sum::<f64>();
    let objective = |beta: &DVector<f64>, sigma: &DMatrix<f64>| -> Result<f64> {
        let mut z = sigma.clone();
        for (kk, xk) in data.x.iter().enumerate() {
            let b = beta[kk];
            if b != 0.0 {
                z.zip_apply(xk, |zi, xi| *zi += b * xi);
            }
        }
        Ok(loglik_at_index(data, &z, family)? - phi * nuclear_norm(sigma))
    };

    let mut obj = objective(&beta, &sigma)?;
    let mut trace = vec![obj / cells];

    for iteration in 1..=opts.nuclear_max_iters {
        let score = sigma_score(data, family, &beta, &sigma)?;
        let mut grad_beta = DVector::zeros(beta.len());
        for (kk, xk) in data.x.iter().enumerate() {
            grad_beta[kk] = score.iter().zip(xk.iter()).map(|(p, q)| p * q).sum();
        }

        let mut scale = 1.0;
        let (next_beta, next_sigma, next_obj) = loop {
            let cb = &beta + scale * s_beta * &grad_beta;
            let half = &sigma + scale * s_sigma * &score;
            let cs = svt(&half, scale * s_sigma * phi);
            let cobj = objective(&cb, &cs)?;
            if cobj >= obj - 1e-12 * (1.0 + obj.abs()) {
                break (cb, cs, cobj);
            }
            scale *= opts.armijo_contraction;
            if scale < 1e-14 {
                return Err(Error::StepSizeUnderflow);
            }
        };

        let prox_residual = {
            let rb = (&next_beta - &beta).amax() / (scale * s_beta);
            let rs = (&next_sigma - &sigma).amax() / (scale * s_sigma);
            rb.max(rs)
        };
        let obj_change = (next_obj - obj).abs() / (1.0 + obj.abs());
        beta = next_beta;
        sigma = next_sigma;
        obj = next_obj;
        trace.push(obj / cells);

        if obj_change <= opts.nuclear_obj_tol && prox_residual <= opts.nuclear_prox_tol {
            return Ok(NucStageResult { beta, sigma, phi, iterations: iteration, objective_trace: trace });
        }
    }
    Err(Error::MaxIterations(opts.nuclear_max_iters))
}

/// Data-driven tuning: an initial value from the two-way fit, then one
/// penalized solve and a rank-truncated update.
pub fn tuning_select(
    data: &PanelData,
    family: Family,
    d_f: usize,
    init: &TwowayInit,
    opts: &FitOptions,
) -> Result<TuningSelection> {
    let score0 = sigma_score(data, family, &init.beta, &init.sigma)?;
    let phi_tilde = opts.phi_initial_scale * op_norm(&score0);
    let interim = fit_nuclear(
        data,
        family,
        phi_tilde,
        Some((init.beta.clone(), init.sigma.clone())),
        opts,
    )?;

    let sigma_truncated = if d_f == 0 {
        DMatrix::zeros(data.n_units, data.n_periods)
    } else {
        let ext = extract_factors(&interim.sigma, d_f)?;
        &ext.alpha * ext.gamma.transpose()
    };
    let score1 = sigma_score(data, family, &interim.beta, &sigma_truncated)?;
    let phi_hat = opts.phi_update_scale * op_norm(&score1);
    Ok(TuningSelection { phi_tilde, phi_hat, interim, sigma_truncated })
}

/// SVD factor extraction with the balanced normalization: each side carries
/// the square root of the singular values, so `alpha * gamma'` is the best
/// rank-`d_f` approximation of `sigma`.
pub fn extract_factors(sigma: &DMatrix<f64>, d_f: usize) -> Result<FactorExtraction> {
    let (n, t) = (sigma.nrows(), sigma.ncols());
    if d_f > n.min(t) {
        return Err(Error::DimensionMismatch(format!(
            "d_f = {d_f} exceeds min(N, T) = {}",
            n.min(t)
        )));
    }
    let (u, s, vt) = svd_parts(sigma);
    let mut alpha = DMatrix::zeros(n, d_f);
    let mut gamma = DMatrix::zeros(t, d_f);
    for r in 0..d_f {
        let root = s[r].max(0.0).sqrt();
        for i in 0..n {
            alpha[(i, r)] = u[(i, r)] * root;
        }
        for j in 0..t {
            gamma[(j, r)] = vt[(r, j)] * root;
        }
    }
    let rank_deficient = d_f > 0 && s[0] > 0.0 && s[d_f - 1] < 1e-10 * s[0];
    Ok(FactorExtraction {
        alpha,
        gamma,
        singular_values: s.iter().copied().collect(),
        rank_deficient,
    })
}

// ---------------------------------------------------------------------------
// Refinement stage
// ---------------------------------------------------------------------------

/// Joint gradient ascent on `(beta, alpha, gamma)` of the unpenalized
/// loglikelihood with curvature-bound block step sizes and Armijo
/// backtracking. The loglikelihood never decreases between iterations.
///
/// On binary panels of the reference size the factor-direction maximizer
/// often sits at the boundary (some cells can be driven toward perfect
/// classification), so the gradient tolerance is not always reachable: the
/// iteration cap then binds and the result is returned with
/// `converged = false`. That is expected behavior, not a failure.
pub fn refine(
    data: &PanelData,
    family: Family,
    init: FactorParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    let d_f = init.d_f();
    let b_bar = family.curvature_bound();
    let gram_lmax = lambda_max_sym(&covariate_gram(data)).max(1e-12);
    let s_beta = 1.0 / (b_bar * gram_lmax);

    let mut params = init;
    let mut z = likelihood::index(data, &params)?;
    let mut ll = loglik_at_index(data, &z, family)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norms = [0.0; 3];

    while iterations < opts.refine_max_iters {
        let bundle = derivs_at_index(data, &z, family)?;
        let (gb, ga, gg) = score_blocks_from_d1(data, &params, &bundle.d1);
        let tol = opts.refine_tol * (1.0 + ll.abs());
        grad_norms = [
            gb.amax(),
            if d_f > 0 { ga.amax() } else { 0.0 },
            if d_f > 0 { gg.amax() } else { 0.0 },
        ];
        if grad_norms.iter().all(|v| *v <= tol) {
            converged = true;
            break;
        }

        let factor_lmax = if d_f > 0 {
            lambda_max_sym(&(params.gamma.transpose() * &params.gamma))
                .max(lambda_max_sym(&(params.alpha.transpose() * &params.alpha)))
                .max(1e-8)
        } else {
            1.0
        };
        let s_factor = 1.0 / (b_bar * factor_lmax);

        let slope = s_beta * gb.norm_squared()
            + if d_f > 0 { s_factor * (ga.norm_squared() + gg.norm_squared()) } else { 0.0 };
        let mut scale = 1.0;
        let mut progressed = false;
        while scale >= 1e-14 {
            let candidate = FactorParams {
                beta: &params.beta + scale * s_beta * &gb,
                alpha: if d_f > 0 { &params.alpha + scale * s_factor * &ga } else { params.alpha.clone() },
                gamma: if d_f > 0 { &params.gamma + scale * s_factor * &gg } else { params.gamma.clone() },
            };
            let cz = likelihood::index(data, &candidate)?;
            if let Ok(cll) = loglik_at_index(data, &cz, family) {
                if cll >= ll + opts.armijo_slope * scale * slope {
                    params = candidate;
                    z = cz;
                    ll = cll;
                    progressed = true;
                    break;
                }
            }
            scale *= opts.armijo_contraction;
        }
        if !progressed {
            break;
        }
        trace.push(ll);
        iterations += 1;
    }

    Ok(FitResult {
        params,
        d_f,
        loglik: ll,
        grad_norms,
        converged,
        iterations,
        loglik_trace: trace,
        tuning: None,
    })
}

/// Solve `H x = g` for symmetric positive semidefinite `H`, adding a small
/// ridge when the Cholesky factorization fails.
pub(crate) fn solve_spd_ridge(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let dim = h.nrows();
    if dim == 0 {
        return DVector::zeros(0);
    }
    let base = h.diagonal().amax().max(1e-12);
    let mut ridge = 0.0;
    loop {
        let mut hr = h.clone();
        if ridge > 0.0 {
            for d in 0..dim {
                hr[(d, d)] += ridge;
            }
        }
        if let Some(chol) = hr.cholesky() {
            return chol.solve(g);
        }
        ridge = if ridge == 0.0 { base * 1e-12 } else { ridge * 100.0 };
        if ridge > base * 10.0 {
            return g / base;
        }
    }
}

/// The full two-step pipeline: two-way initialization, tuning selection,
/// penalized solve, factor extraction, and joint refinement.
///
/// When `opts.init` is set the penalized stage is skipped and refinement
/// starts from the supplied parameters (used by bootstrap replicates).
pub fn fit(data: &PanelData, family: Family, d_f: usize, opts: &FitOptions) -> Result<FitResult> {
    if d_f > data.n_units.min(data.n_periods) {
        return Err(Error::DimensionMismatch(format!(
            "d_f = {d_f} exceeds min(N, T) = {}",
            data.n_units.min(data.n_periods)
        )));
    }
    if let Some(init) = &opts.init {
        if init.d_f() != d_f {
            return Err(Error::DimensionMismatch(format!(
                "warm start has d_f = {}, requested {d_f}",
                init.d_f()
            )));
        }
        return refine(data, family, init.clone(), opts);
    }

    let tw = twoway_init(data, family, opts)?;
    let tuning = tuning_select(data, family, d_f, &tw, opts)?;
    let nuc = fit_nuclear(
        data,
        family,
        tuning.phi_hat,
        Some((tuning.interim.beta.clone(), tuning.sigma_truncated.clone())),
        opts,
    )?;
    let ext = extract_factors(&nuc.sigma, d_f)?;
    let init = FactorParams { beta: nuc.beta.clone(), alpha: ext.alpha, gamma: ext.gamma };
    let mut result = refine(data, family, init, opts)?;
    result.tuning = Some((tuning.phi_tilde, tuning.phi_hat));
    Ok(result)
}

// ---------------------------------------------------------------------------
// Factor-number selection
// ---------------------------------------------------------------------------

/// Ratio/argmax rule on a descending singular-value sequence.
///
/// Returns 0 when the largest singular value is below `zero_cutoff`;
/// otherwise the rank maximizing consecutive ratios over `1..=r_max`.
pub fn choose_rank(singular_values: &[f64], r_max: usize, zero_cutoff: f64) -> (Vec<f64>, usize) {
    let floor = singular_values.first().copied().unwrap_or(0.0).max(1.0) * 1e-12;
    let mut ratios = Vec::with_capacity(r_max);
    for r in 0..r_max {
        let hi = singular_values.get(r).copied().unwrap_or(0.0);
        let lo = singular_values.get(r + 1).copied().unwrap_or(0.0);
        ratios.push(if hi <= floor { 0.0 } else { hi / lo.max(floor) });
    }
    if singular_values.first().copied().unwrap_or(0.0) < zero_cutoff {
        return (ratios, 0);
    }
    let mut best = 1;
    for r in 2..=r_max {
        if ratios[r - 1] > ratios[best - 1] {
            best = r;
        }
    }
    (ratios, best)
}

/// Eigenvalue-ratio selection of the number of factors from the singular
/// values of the penalized effects matrix.
///
/// The zero-factor cutoff `c0 * sqrt(max(N, T))` stands in for the modified
/// rule of the reference implementation, which is not spelled out; it is
/// configurable through [`FitOptions::rank_zero_threshold`].
pub fn select_num_factors(
    data: &PanelData,
    family: Family,
    r_max: usize,
    opts: &FitOptions,
) -> Result<FactorSelection> {
    if r_max == 0 || r_max >= data.n_units.min(data.n_periods) {
        return Err(Error::Invalid(format!(
            "r_max must be in [1, min(N,T)), got {r_max}"
        )));
    }
    let tw = twoway_init(data, family, opts)?;
    let tuning = tuning_select(data, family, r_max, &tw, opts)?;
    let nuc = fit_nuclear(
        data,
        family,
        tuning.phi_hat,
        Some((tuning.interim.beta.clone(), tuning.sigma_truncated.clone())),
        opts,
    )?;
    let singular_values: Vec<f64> = nuc.sigma.clone().singular_values().iter().copied().collect();
    let mut sorted = singular_values.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let zero_cutoff =
        opts.rank_zero_threshold * (data.n_units.max(data.n_periods) as f64).sqrt();
    let (ratios, chosen) = choose_rank(&sorted, r_max, zero_cutoff);
    Ok(FactorSelection { singular_values: sorted, ratios, chosen, zero_cutoff })
}
