//! Binary-choice likelihood families with the interactive-effects index
//! `Z_it = X_it'beta + alpha_i'gamma_t` and analytic derivatives of the
//! per-cell loglikelihood up to third order.
//!
//! Probit evaluation routes through `erfc` and switches to an asymptotic
//! Mills-ratio expansion deep in the left tail, so log-CDFs and score ratios
//! stay accurate without catastrophic cancellation.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::panel::PanelData;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;
/// Left of this the erfc route loses precision; switch to the Mills-ratio
/// continued fraction.
const TAIL_CUTOFF: f64 = -5.0;

/// Likelihood family: logistic or standard-normal link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Family {
    Logit,
    Probit,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Logit => write!(f, "logit"),
            Family::Probit => write!(f, "probit"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Family::Logit),
            "probit" => Ok(Family::Probit),
            other => Err(format!("unknown family `{other}` (expected logit or probit)")),
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() * (-LN_SQRT_2PI).exp()
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Mills ratio `Phi(-t)/phi(t)` for `t > 0` via the Laplace continued
/// fraction `1/(t + 1/(t + 2/(t + 3/...)))`, evaluated bottom-up. Accurate to
/// machine precision for `t >= 4`.
fn mills_ratio_cf(t: f64) -> f64 {
    let mut value = 0.0;
    for k in (1..=80u32).rev() {
        value = f64::from(k) / (t + value);
    }
    1.0 / (t + value)
}

/// Inverse Mills ratio phi(u)/Phi(u), stable on the whole line.
fn inv_mills(u: f64) -> f64 {
    if u < TAIL_CUTOFF {
        1.0 / mills_ratio_cf(-u)
    } else {
        norm_pdf(u) / norm_cdf(u)
    }
}

/// ln Phi(u), stable on the whole line.
fn log_norm_cdf(u: f64) -> f64 {
    if u < TAIL_CUTOFF {
        -0.5 * u * u - LN_SQRT_2PI + mills_ratio_cf(-u).ln()
    } else {
        norm_cdf(u).ln()
    }
}

impl Family {
    /// Choice probability `P(Y=1 | z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            Family::Logit => logistic(z),
            Family::Probit => norm_cdf(z),
        }
    }

    /// Density of the latent error, `F'(z)`.
    pub fn pdf(&self, z: f64) -> f64 {
        match self {
            Family::Logit => {
                let f = logistic(z);
                f * (1.0 - f)
            }
            Family::Probit => norm_pdf(z),
        }
    }

    /// Per-cell loglikelihood `l(y, z) = ln f(y | z)`.
    pub fn ll(&self, y: f64, z: f64) -> f64 {
        let s = 2.0 * y - 1.0;
        match self {
            Family::Logit => -softplus(-s * z),
            Family::Probit => log_norm_cdf(s * z),
        }
    }

    /// First three z-derivatives of the per-cell loglikelihood.
    pub fn ll_derivs(&self, y: f64, z: f64) -> (f64, f64, f64) {
        match self {
            Family::Logit => {
                let f = logistic(z);
                let v = f * (1.0 - f);
                (y - f, -v, -v * (1.0 - 2.0 * f))
            }
            Family::Probit => {
                let s = 2.0 * y - 1.0;
                let u = s * z;
                let r = inv_mills(u);
                let d1 = s * r;
                let d2 = -r * (u + r);
                let d3 = s * r * (u * u + 3.0 * r * u + 2.0 * r * r - 1.0);
                (d1, d2, d3)
            }
        }
    }

    /// Upper bound on `-d2 l/dz2`; used as the Lipschitz constant of the score.
    pub fn curvature_bound(&self) -> f64 {
        match self {
            Family::Logit => 0.25,
            Family::Probit => 1.0,
        }
    }
}

/// Common parameters plus factor loadings and factors.
///
/// `alpha` is `N x d_f`, `gamma` is `T x d_f`; the interactive effect for cell
/// `(i, t)` is the inner product of row `i` of `alpha` with row `t` of `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    pub beta: DVector<f64>,
    pub alpha: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl FactorParams {
    pub fn zeros(n_covariates: usize, n_units: usize, n_periods: usize, d_f: usize) -> Self {
        Self {
            beta: DVector::zeros(n_covariates),
            alpha: DMatrix::zeros(n_units, d_f),
            gamma: DMatrix::zeros(n_periods, d_f),
        }
    }

    pub fn d_f(&self) -> usize {
        self.alpha.ncols()
    }

    fn check_dims(&self, data: &PanelData) -> Result<()> {
        if self.beta.len() != data.n_covariates() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries, panel has {} covariates",
                self.beta.len(),
                data.n_covariates()
            )));
        }
        if self.alpha.nrows() != data.n_units || self.gamma.nrows() != data.n_periods {
            return Err(Error::DimensionMismatch(format!(
                "alpha is {}x{}, gamma is {}x{}, panel is {}x{}",
                self.alpha.nrows(),
                self.alpha.ncols(),
                self.gamma.nrows(),
                self.gamma.ncols(),
                data.n_units,
                data.n_periods
            )));
        }
        if self.alpha.ncols() != self.gamma.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {} factors, gamma has {}",
                self.alpha.ncols(),
                self.gamma.ncols()
            )));
        }
        Ok(())
    }
}

/// Per-cell derivative matrices of the loglikelihood at the current index.
#[derive(Debug, Clone)]
pub struct DerivBundle {
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub d3: DMatrix<f64>,
}

/// The index matrix `Z_it = sum_k X_itk beta_k + alpha_i'gamma_t`.
pub fn index(data: &PanelData, params: &FactorParams) -> Result<DMatrix<f64>> {
    params.check_dims(data)?;
    let mut z = &params.alpha * params.gamma.transpose();
    for (k, xk) in data.x.iter().enumerate() {
        let b = params.beta[k];
        if b != 0.0 {
            z.zip_apply(xk, |zi, xi| *zi += b * xi);
        }
    }
    Ok(z)
}

/// Loglikelihood of the panel at `params`.
pub fn loglik(data: &PanelData, params: &FactorParams, family: Family) -> Result<f64> {
    let z = index(data, params)?;
    loglik_at_index(data, &z, family)
}

/// Loglikelihood evaluated at a precomputed index matrix.
pub fn loglik_at_index(data: &PanelData, z: &DMatrix<f64>, family: Family) -> Result<f64> {
    let mut total = 0.0;
    for (yi, zi) in data.y.iter().zip(z.iter()) {
        if !zi.is_finite() {
            return Err(Error::NonFiniteIndex);
        }
        total += family.ll(*yi, *zi);
    }
    Ok(total)
}

/// Per-cell derivatives of the loglikelihood at `params`.
pub fn derivs(data: &PanelData, params: &FactorParams, family: Family) -> Result<DerivBundle> {
    let z = index(data, params)?;
    derivs_at_index(data, &z, family)
}

/// Per-cell derivatives at a precomputed index matrix.
pub fn derivs_at_index(data: &PanelData, z: &DMatrix<f64>, family: Family) -> Result<DerivBundle> {
    let (n, t) = (data.n_units, data.n_periods);
    let mut d1 = DMatrix::zeros(n, t);
    let mut d2 = DMatrix::zeros(n, t);
    let mut d3 = DMatrix::zeros(n, t);
    for i in 0..n {
        for j in 0..t {
            let zi = z[(i, j)];
            if !zi.is_finite() {
                return Err(Error::NonFiniteIndex);
            }
            let (a, b, c) = family.ll_derivs(data.y[(i, j)], zi);
            d1[(i, j)] = a;
            d2[(i, j)] = b;
            d3[(i, j)] = c;
        }
    }
    Ok(DerivBundle { d1, d2, d3 })
}

/// Score blocks `(d L/d beta, d L/d alpha, d L/d gamma)` assembled from the
/// per-cell scores by the chain rule.
pub fn score_blocks(
    data: &PanelData,
    params: &FactorParams,
    family: Family,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let z = index(data, params)?;
    let bundle = derivs_at_index(data, &z, family)?;
    Ok(score_blocks_from_d1(data, params, &bundle.d1))
}

/// Score blocks given the per-cell score matrix.
pub fn score_blocks_from_d1(
    data: &PanelData,
    params: &FactorParams,
    d1: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut grad_beta = DVector::zeros(data.n_covariates());
    for (k, xk) in data.x.iter().enumerate() {
        grad_beta[k] = d1.iter().zip(xk.iter()).map(|(a, b)| a * b).sum();
    }
    let grad_alpha = d1 * &params.gamma;
    let grad_gamma = d1.transpose() * &params.alpha;
    (grad_beta, grad_alpha, grad_gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn toy_panel(n: usize, t: usize, rng: &mut impl Rng) -> PanelData {
        let y = DMatrix::from_fn(n, t, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let x = DMatrix::from_fn(n, t, |_, _| rng.gen_range(-2.0..2.0));
        PanelData::from_matrices(y, vec![x]).unwrap()
    }

    fn random_params(data: &PanelData, d_f: usize, rng: &mut impl Rng) -> FactorParams {
        FactorParams {
            beta: DVector::from_fn(data.n_covariates(), |_, _| rng.gen_range(-1.0..1.0)),
            alpha: DMatrix::from_fn(data.n_units, d_f, |_, _| rng.gen_range(-1.0..1.0)),
            gamma: DMatrix::from_fn(data.n_periods, d_f, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn index_zero_params_is_zero() {
        let mut rng = crate::rng::stream(1, 0);
        let data = toy_panel(3, 2, &mut rng);
        let params = FactorParams::zeros(1, 3, 2, 2);
        let z = index(&data, &params).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn index_constant_covariate() {
        let y = DMatrix::from_element(2, 2, 1.0);
        let x = DMatrix::from_element(2, 2, 1.0);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        let mut params = FactorParams::zeros(1, 2, 2, 1);
        params.beta[0] = 0.5;
        let z = index(&data, &params).unwrap();
        assert!(z.iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn index_matches_triple_loop_oracle() {
        let mut rng = crate::rng::stream(2, 0);
        let data = toy_panel(3, 2, &mut rng);
        let params = random_params(&data, 2, &mut rng);
        let z = index(&data, &params).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                let mut expected = 0.0;
                for k in 0..data.n_covariates() {
                    expected += data.x[k][(i, t)] * params.beta[k];
                }
                for r in 0..2 {
                    expected += params.alpha[(i, r)] * params.gamma[(t, r)];
                }
                assert!((z[(i, t)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn loglik_at_zero_index_is_nt_log_half() {
        let mut rng = crate::rng::stream(3, 0);
        for family in [Family::Logit, Family::Probit] {
            let data = toy_panel(4, 3, &mut rng);
            let params = FactorParams::zeros(1, 4, 3, 0);
            let ll = loglik(&data, &params, family).unwrap();
            assert!((ll - 12.0 * 0.5f64.ln()).abs() < 1e-10, "{family}: {ll}");
        }
    }

    #[test]
    fn loglik_matches_per_cell_oracle() {
        let mut rng = crate::rng::stream(4, 0);
        let data = toy_panel(2, 2, &mut rng);
        let params = random_params(&data, 1, &mut rng);
        let z = index(&data, &params).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            for t in 0..2 {
                let f = logistic(z[(i, t)]);
                expected += if data.y[(i, t)] == 1.0 { f.ln() } else { (1.0 - f).ln() };
            }
        }
        let ll = loglik(&data, &params, Family::Logit).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn logit_derivs_at_zero() {
        let (d1, d2, d3) = Family::Logit.ll_derivs(1.0, 0.0);
        assert!((d1 - 0.5).abs() < 1e-15);
        assert!((d2 + 0.25).abs() < 1e-15);
        assert!(d3.abs() < 1e-15);
        let (d1, _, _) = Family::Logit.ll_derivs(0.0, 0.0);
        assert!((d1 + 0.5).abs() < 1e-15);
    }

    /// Central differences chained one order at a time: d1 from the
    /// loglikelihood, d2 from analytic d1, d3 from analytic d2. Chaining
    /// keeps every difference first-order so the small step stays far above
    /// cancellation noise.
    fn fd_chain(family: Family, y: f64, z: f64, h: f64) -> (f64, f64, f64) {
        let f1 = (family.ll(y, z + h) - family.ll(y, z - h)) / (2.0 * h);
        let f2 = (family.ll_derivs(y, z + h).0 - family.ll_derivs(y, z - h).0) / (2.0 * h);
        let f3 = (family.ll_derivs(y, z + h).1 - family.ll_derivs(y, z - h).1) / (2.0 * h);
        (f1, f2, f3)
    }

    #[test]
    fn probit_derivs_match_finite_differences() {
        let (d1, d2, d3) = Family::Probit.ll_derivs(1.0, 1.3);
        let (f1, f2, f3) = fd_chain(Family::Probit, 1.0, 1.3, 1e-5);
        assert!((d1 - f1).abs() / f1.abs() < 1e-6);
        assert!((d2 - f2).abs() / f2.abs() < 1e-6);
        assert!((d3 - f3).abs() / f3.abs() < 1e-6, "{d3} vs {f3}");
    }

    #[test]
    fn derivs_match_finite_differences_on_random_draws() {
        let mut rng = crate::rng::stream(5, 0);
        for family in [Family::Logit, Family::Probit] {
            for _ in 0..1000 {
                let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                let z: f64 = rng.gen_range(-6.0..6.0);
                let (d1, d2, d3) = family.ll_derivs(y, z);
                let (f1, f2, f3) = fd_chain(family, y, z, 1e-6);
                assert!(
                    (d1 - f1).abs() / f1.abs().max(0.05) < 1e-6,
                    "{family} d1 at y={y} z={z}: {d1} vs {f1}"
                );
                assert!(
                    (d2 - f2).abs() / f2.abs().max(0.05) < 1e-6,
                    "{family} d2 at y={y} z={z}: {d2} vs {f2}"
                );
                assert!(
                    (d3 - f3).abs() / f3.abs().max(0.05) < 1e-5,
                    "{family} d3 at y={y} z={z}: {d3} vs {f3}"
                );
            }
        }
    }

    #[test]
    fn second_derivative_is_strictly_negative_on_wide_range() {
        for family in [Family::Logit, Family::Probit] {
            for y in [0.0, 1.0] {
                let mut z = -30.0;
                while z <= 30.0 {
                    let (_, d2, _) = family.ll_derivs(y, z);
                    assert!(d2 < 0.0, "{family} d2={d2} at y={y} z={z}");
                    assert!(d2.is_finite());
                    if family == Family::Logit {
                        assert!(d2 >= -0.25 - 1e-15);
                    }
                    z += 0.125;
                }
            }
        }
    }

    #[test]
    fn probit_tail_values_stay_finite_and_consistent() {
        // Continuity across the erfc / continued-fraction switch.
        for y in [0.0, 1.0] {
            let near = Family::Probit.ll_derivs(y, TAIL_CUTOFF + 1e-12);
            let far = Family::Probit.ll_derivs(y, TAIL_CUTOFF - 1e-12);
            assert!((near.0 - far.0).abs() / near.0.abs() < 1e-9);
            assert!((near.1 - far.1).abs() / near.1.abs() < 1e-9);
            let ll_near = Family::Probit.ll(y, TAIL_CUTOFF + 1e-12);
            let ll_far = Family::Probit.ll(y, TAIL_CUTOFF - 1e-12);
            assert!((ll_near - ll_far).abs() / ll_near.abs() < 1e-9);
            let ll = Family::Probit.ll(y, -37.0);
            assert!(ll.is_finite());
            let (d1, d2, d3) = Family::Probit.ll_derivs(y, -37.0);
            assert!(d1.is_finite() && d2.is_finite() && d3.is_finite());
            assert!(d2 < 0.0);
        }
    }

    #[test]
    fn score_blocks_match_finite_differences() {
        let mut rng = crate::rng::stream(6, 0);
        let data = toy_panel(4, 3, &mut rng);
        let params = random_params(&data, 2, &mut rng);
        for family in [Family::Logit, Family::Probit] {
            let (gb, ga, gg) = score_blocks(&data, &params, family).unwrap();
            let h = 1e-6;
            let base = |p: &FactorParams| loglik(&data, p, family).unwrap();
            for k in 0..params.beta.len() {
                let mut up = params.clone();
                up.beta[k] += h;
                let mut dn = params.clone();
                dn.beta[k] -= h;
                let fd = (base(&up) - base(&dn)) / (2.0 * h);
                assert!((gb[k] - fd).abs() / fd.abs().max(1e-6) < 1e-6);
            }
            for i in 0..data.n_units {
                for r in 0..2 {
                    let mut up = params.clone();
                    up.alpha[(i, r)] += h;
                    let mut dn = params.clone();
                    dn.alpha[(i, r)] -= h;
                    let fd = (base(&up) - base(&dn)) / (2.0 * h);
                    assert!((ga[(i, r)] - fd).abs() / fd.abs().max(1e-6) < 1e-5);
                }
            }
            for t in 0..data.n_periods {
                for r in 0..2 {
                    let mut up = params.clone();
                    up.gamma[(t, r)] += h;
                    let mut dn = params.clone();
                    dn.gamma[(t, r)] -= h;
                    let fd = (base(&up) - base(&dn)) / (2.0 * h);
                    assert!((gg[(t, r)] - fd).abs() / fd.abs().max(1e-6) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn beta_gradient_with_all_ones_outcome() {
        let y = DMatrix::from_element(3, 2, 1.0);
        let x = DMatrix::from_fn(3, 2, |i, t| (i + t) as f64);
        let data = PanelData::from_matrices(y, vec![x.clone()]).unwrap();
        let params = FactorParams::zeros(1, 3, 2, 0);
        let (gb, _, _) = score_blocks(&data, &params, Family::Logit).unwrap();
        assert!((gb[0] - 0.5 * x.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn zero_covariate_gives_zero_beta_gradient() {
        let mut rng = crate::rng::stream(7, 0);
        let y = DMatrix::from_fn(3, 3, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let x = DMatrix::zeros(3, 3);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        let params = random_params(&data, 1, &mut rng);
        let (gb, _, _) = score_blocks(&data, &params, Family::Probit).unwrap();
        assert_eq!(gb[0], 0.0);
    }

    #[test]
    fn loglik_invariant_under_factor_rotation() {
        let mut rng = crate::rng::stream(8, 0);
        let data = toy_panel(5, 4, &mut rng);
        let params = random_params(&data, 2, &mut rng);
        // Invertible 2x2 (well-conditioned by construction).
        let a = nalgebra::Matrix2::new(1.2, 0.4, -0.3, 0.9);
        let a_inv_t = a.try_inverse().unwrap().transpose();
        let a_dyn = DMatrix::from_fn(2, 2, |i, j| a[(i, j)]);
        let a_inv_t_dyn = DMatrix::from_fn(2, 2, |i, j| a_inv_t[(i, j)]);
        let rotated = FactorParams {
            beta: params.beta.clone(),
            alpha: &params.alpha * &a_dyn,
            gamma: &params.gamma * &a_inv_t_dyn,
        };
        for family in [Family::Logit, Family::Probit] {
            let l0 = loglik(&data, &params, family).unwrap();
            let l1 = loglik(&data, &rotated, family).unwrap();
            assert!((l0 - l1).abs() < 1e-12, "{family}: {l0} vs {l1}");
        }
    }

    #[test]
    fn nonfinite_index_is_reported() {
        let y = DMatrix::from_element(1, 1, 1.0);
        let x = DMatrix::from_element(1, 1, f64::INFINITY);
        let data = PanelData { n_units: 1, n_periods: 1, y, x: vec![x],
            unit_ids: vec!["a".into()], period_ids: vec!["1".into()] };
        let mut params = FactorParams::zeros(1, 1, 1, 0);
        params.beta[0] = 1.0;
        assert!(matches!(loglik(&data, &params, Family::Logit), Err(Error::NonFiniteIndex)));
    }
}
