//! Gibbs sampler for the ward-level latent Gaussian model.
//!
//! The Poisson likelihood of each ward is replaced by its Gaussian
//! approximation at the maximum-likelihood point,
//! `λ̂*_i | λ*_i ~ N(λ*_i, 1/Y_i)`, after which every full conditional is
//! available in closed form:
//!
//! ```text
//! λ* | β, σ², φ  ~ N_L(μ*, Σ*),   Σ* = (σ⁻²Σ₀₀⁻¹ + diag(Y))⁻¹
//!                                 μ* = Σ*(σ⁻²Σ₀₀⁻¹X̃β + diag(Y)λ̂*)
//! β  | λ*, σ², φ  ~ N(μ₁, Σ₁),    Σ₁ = (σ⁻²X̃ᵀΣ₀₀⁻¹X̃ + s⁻²I)⁻¹
//!                                 μ₁ = Σ₁ σ⁻²X̃ᵀΣ₀₀⁻¹λ*
//! σ² | λ*, β, φ   ~ IG(a + L/2, b + ½ rᵀΣ₀₀⁻¹r),  r = λ* − X̃β
//! φ  | λ*, β, σ²  ∝ N_L(λ*; X̃β, σ²Σ₀₀^(φ)) over the discrete grid
//! ```
//!
//! Sweeps update the blocks in that order. Each φ candidate reuses the
//! Cholesky factor cached in its [`CovarianceBundle`].

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::chain::{ModelKind, PosteriorChain};
use crate::error::{DisaggError, Result};
use crate::grid::{empirical_log_intensity, EmpiricalLogIntensity, WardTable};
use crate::kernel::{CovarianceBundle, PhiGrid};
use crate::linalg;
use crate::rng::{self, Rng};

/// Gaussian working likelihood: centres `λ̂*` and precisions `Y`.
pub type WorkingLikelihood = EmpiricalLogIntensity;

/// Priors: `β ~ N(0, beta_sd² I)`, `σ² ~ IG(ig_shape, ig_rate)`, φ uniform
/// on `phi_grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperpriors {
    pub beta_sd: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub phi_grid: PhiGrid,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors {
            beta_sd: 100.0,
            ig_shape: 0.01,
            ig_rate: 0.01,
            phi_grid: PhiGrid::default_grid(),
        }
    }
}

impl Hyperpriors {
    pub fn with_phi_grid(phi_grid: PhiGrid) -> Self {
        Hyperpriors {
            phi_grid,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_sd", self.beta_sd),
            ("ig_shape", self.ig_shape),
            ("ig_rate", self.ig_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DisaggError::validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Starting point of the chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitStrategy {
    /// `λ* = λ̂*`, `β` = OLS of `λ̂*` on `X̃`, `σ²` = mean squared OLS residual.
    #[default]
    Empirical,
    /// `λ* = 0`, `β = 0`, `σ² = 1`.
    PriorMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub seed: u64,
    pub thin: usize,
    pub init: InitStrategy,
    /// Pseudo-count added to every ward when forming `λ̂*`.
    pub pseudo_count: Option<f64>,
}

impl ChainConfig {
    pub fn new(seed: u64) -> Self {
        ChainConfig {
            burn_in: 500,
            samples: 1500,
            seed,
            thin: 1,
            init: InitStrategy::Empirical,
            pseudo_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(DisaggError::validation("samples must be at least 1"));
        }
        if self.thin == 0 {
            return Err(DisaggError::validation("thin must be at least 1"));
        }
        Ok(())
    }
}

/// Floor applied to the initial σ² when the OLS fit is exact.
const MIN_INIT_SIGMA2: f64 = 1e-8;

pub fn gaussian_likelihood(wards: &WardTable, pseudo_count: Option<f64>) -> Result<WorkingLikelihood> {
    empirical_log_intensity(wards, pseudo_count)
}

fn standard_normal_vec(n: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draws from `N(Q⁻¹ h, Q⁻¹)` given precision `Q` and linear term `h`.
/// Returns `(mean, draw)`.
fn draw_canonical(
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
    what: &str,
    rng: &mut Rng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let l = linalg::cholesky_lower(precision)
        .ok_or_else(|| DisaggError::numerical(format!("{what} precision is not positive definite")))?;
    let mean = linalg::chol_solve(&l, linear);
    let z = standard_normal_vec(mean.len(), rng);
    let draw = &mean + linalg::solve_lower_transpose(&l, &z);
    Ok((mean, draw))
}

/// Precision and linear term of the λ* full conditional.
pub fn lambda_star_canonical(
    beta: &DVector<f64>,
    sigma2: f64,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    lik: &WorkingLikelihood,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut q = bundle.inv00() / sigma2;
    for i in 0..q.nrows() {
        q[(i, i)] += lik.precision[i];
    }
    let prior_mean = x_tilde * beta;
    let h = bundle.inv00() * prior_mean / sigma2 + lik.precision.component_mul(&lik.lambda_hat);
    (q, h)
}

/// Mean and covariance of the λ* full conditional.
pub fn lambda_star_moments(
    beta: &DVector<f64>,
    sigma2: f64,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    lik: &WorkingLikelihood,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (q, h) = lambda_star_canonical(beta, sigma2, bundle, x_tilde, lik);
    let l = linalg::cholesky_lower(&q)
        .ok_or_else(|| DisaggError::numerical("lambda* precision is not positive definite"))?;
    Ok((linalg::chol_solve(&l, &h), linalg::chol_inverse(&l)))
}

pub fn update_lambda_star(
    beta: &DVector<f64>,
    sigma2: f64,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    lik: &WorkingLikelihood,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    let (q, h) = lambda_star_canonical(beta, sigma2, bundle, x_tilde, lik);
    draw_canonical(&q, &h, "lambda*", rng).map(|(_, d)| d)
}

/// Gram quantities of `X̃` under a ward-level precision matrix `W`:
/// `W X̃` and `X̃ᵀ W X̃`.
#[derive(Clone, Debug)]
pub struct WeightedDesign {
    wx: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl WeightedDesign {
    pub fn new(x_tilde: &DMatrix<f64>, weight: &DMatrix<f64>) -> Self {
        let wx = weight * x_tilde;
        let gram = linalg::symmetrize(x_tilde.transpose() * &wx);
        WeightedDesign { wx, gram }
    }

    fn for_bundle(x_tilde: &DMatrix<f64>, bundle: &CovarianceBundle) -> Self {
        Self::new(x_tilde, bundle.inv00())
    }

    /// Precision and linear term of `β | λ*` for `λ* ~ N(X̃β, σ² W⁻¹)`.
    pub fn beta_canonical(&self, lambda: &DVector<f64>, sigma2: f64, beta_sd: f64) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.gram.nrows();
        let q = &self.gram / sigma2 + DMatrix::identity(p, p) / (beta_sd * beta_sd);
        let h = self.wx.tr_mul(lambda) / sigma2;
        (q, h)
    }

    /// `(μ₁, Σ₁)`.
    pub fn beta_moments(&self, lambda: &DVector<f64>, sigma2: f64, beta_sd: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (q, h) = self.beta_canonical(lambda, sigma2, beta_sd);
        let l = linalg::cholesky_lower(&q)
            .ok_or_else(|| DisaggError::numerical("beta precision is not positive definite"))?;
        Ok((linalg::chol_solve(&l, &h), linalg::chol_inverse(&l)))
    }

    fn draw_beta(&self, lambda: &DVector<f64>, sigma2: f64, beta_sd: f64, rng: &mut Rng) -> Result<DVector<f64>> {
        let (q, h) = self.beta_canonical(lambda, sigma2, beta_sd);
        draw_canonical(&q, &h, "beta", rng).map(|(_, d)| d)
    }
}

pub fn update_beta(
    lambda_star: &DVector<f64>,
    sigma2: f64,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    priors: &Hyperpriors,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    WeightedDesign::for_bundle(x_tilde, bundle).draw_beta(lambda_star, sigma2, priors.beta_sd, rng)
}

/// Shape and rate of the σ² full conditional.
pub fn sigma2_conditional(
    lambda_star: &DVector<f64>,
    beta: &DVector<f64>,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    priors: &Hyperpriors,
) -> (f64, f64) {
    let r = lambda_star - x_tilde * beta;
    let shape = priors.ig_shape + lambda_star.len() as f64 / 2.0;
    let rate = priors.ig_rate + 0.5 * bundle.quad_form(&r);
    (shape, rate)
}

pub fn update_sigma2(
    lambda_star: &DVector<f64>,
    beta: &DVector<f64>,
    bundle: &CovarianceBundle,
    x_tilde: &DMatrix<f64>,
    priors: &Hyperpriors,
    rng: &mut Rng,
) -> Result<f64> {
    let (shape, rate) = sigma2_conditional(lambda_star, beta, bundle, x_tilde, priors);
    draw_inverse_gamma(shape, rate, rng)
}

pub fn draw_inverse_gamma(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    if !(rate > 0.0 && rate.is_finite() && shape > 0.0) {
        return Err(DisaggError::numerical(format!(
            "inverse-gamma parameters invalid (shape {shape}, rate {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| DisaggError::numerical(format!("gamma distribution: {e}")))?;
    let x: f64 = g.sample(rng);
    if !(x > 0.0) || !x.is_finite() {
        return Err(DisaggError::numerical("sigma2 draw underflowed"));
    }
    Ok(1.0 / x)
}

/// Unnormalised log-density of each φ candidate:
/// `-½ log det(σ² Σ₀₀) - ½ σ⁻² rᵀΣ₀₀⁻¹r`.
pub fn phi_log_weights(
    lambda_star: &DVector<f64>,
    beta: &DVector<f64>,
    sigma2: f64,
    bundles: &[CovarianceBundle],
    x_tilde: &DMatrix<f64>,
) -> Vec<f64> {
    let r = lambda_star - x_tilde * beta;
    let l = r.len() as f64;
    let ln_s2 = sigma2.ln();
    let weight = |b: &CovarianceBundle| -0.5 * (l * ln_s2 + b.logdet00()) - 0.5 * b.quad_form(&r) / sigma2;
    if bundles.len() > 4 && r.len() > 32 {
        bundles.par_iter().map(weight).collect()
    } else {
        bundles.iter().map(weight).collect()
    }
}

/// Normalises log-weights with log-sum-exp.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DisaggError::numerical("all phi weights are zero or undefined"));
    }
    let total: f64 = log_w.iter().map(|w| (w - max).exp()).sum();
    Ok(log_w.iter().map(|w| (w - max).exp() / total).collect())
}

pub fn phi_probabilities(
    lambda_star: &DVector<f64>,
    beta: &DVector<f64>,
    sigma2: f64,
    bundles: &[CovarianceBundle],
    x_tilde: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    normalize_log_weights(&phi_log_weights(lambda_star, beta, sigma2, bundles, x_tilde))
}

/// Samples an index from a categorical distribution by inversion.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws φ by probability-proportional-to-size sampling over the bundles.
/// Returns `(φ, index)`.
pub fn update_phi(
    lambda_star: &DVector<f64>,
    beta: &DVector<f64>,
    sigma2: f64,
    bundles: &[CovarianceBundle],
    x_tilde: &DMatrix<f64>,
    rng: &mut Rng,
) -> Result<(f64, usize)> {
    let probs = phi_probabilities(lambda_star, beta, sigma2, bundles, x_tilde)?;
    let k = sample_categorical(&probs, rng);
    Ok((bundles[k].phi, k))
}

/// Chain state at the start of a sweep.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub lambda_star: DVector<f64>,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub phi_index: usize,
}

pub fn initial_state(
    x_tilde: &DMatrix<f64>,
    lik: &WorkingLikelihood,
    n_phi: usize,
    init: InitStrategy,
) -> Result<ChainState> {
    let phi_index = (n_phi - 1) / 2;
    match init {
        InitStrategy::Empirical => {
            let beta = linalg::least_squares(x_tilde, &lik.lambda_hat)?;
            let resid = &lik.lambda_hat - x_tilde * &beta;
            let sigma2 = (resid.norm_squared() / resid.len() as f64).max(MIN_INIT_SIGMA2);
            Ok(ChainState {
                lambda_star: lik.lambda_hat.clone(),
                beta,
                sigma2,
                phi_index,
            })
        }
        InitStrategy::PriorMean => Ok(ChainState {
            lambda_star: DVector::zeros(x_tilde.nrows()),
            beta: DVector::zeros(x_tilde.ncols()),
            sigma2: 1.0,
            phi_index,
        }),
    }
}

/// Runs the Gibbs sampler with the latent GP bundles. `bundles` must match
/// `priors.phi_grid` one-to-one.
pub fn run_chain(
    wards: &WardTable,
    bundles: &[CovarianceBundle],
    priors: &Hyperpriors,
    config: &ChainConfig,
) -> Result<PosteriorChain> {
    run_latent_chain(ModelKind::Gp, wards, bundles, priors, config)
}

pub(crate) fn run_latent_chain(
    model: ModelKind,
    wards: &WardTable,
    bundles: &[CovarianceBundle],
    priors: &Hyperpriors,
    config: &ChainConfig,
) -> Result<PosteriorChain> {
    priors.validate()?;
    config.validate()?;
    if bundles.len() != priors.phi_grid.len()
        || bundles
            .iter()
            .zip(priors.phi_grid.values())
            .any(|(b, &phi)| b.phi.to_bits() != phi.to_bits())
    {
        return Err(DisaggError::validation(
            "covariance bundles do not cover the phi grid",
        ));
    }
    if bundles.iter().any(|b| b.n_wards() != wards.len()) {
        return Err(DisaggError::validation("bundle size does not match ward count"));
    }
    let x_tilde = wards.x_tilde();
    let lik = gaussian_likelihood(wards, config.pseudo_count)?;
    let designs: Vec<WeightedDesign> = bundles
        .iter()
        .map(|b| WeightedDesign::for_bundle(&x_tilde, b))
        .collect();

    let mut rng = rng::from_seed(config.seed);
    let mut state = initial_state(&x_tilde, &lik, bundles.len(), config.init)?;

    let (l, p, b) = (wards.len(), x_tilde.ncols(), config.samples);
    let mut lambda_out = DMatrix::zeros(b, l);
    let mut beta_out = DMatrix::zeros(b, p);
    let mut sigma2_out = Vec::with_capacity(b);
    let mut phi_out = Vec::with_capacity(b);

    let total = config.burn_in + config.samples * config.thin;
    for it in 0..total {
        let bundle = &bundles[state.phi_index];
        state.lambda_star = update_lambda_star(&state.beta, state.sigma2, bundle, &x_tilde, &lik, &mut rng)?;
        state.beta = designs[state.phi_index].draw_beta(&state.lambda_star, state.sigma2, priors.beta_sd, &mut rng)?;
        state.sigma2 = update_sigma2(&state.lambda_star, &state.beta, bundle, &x_tilde, priors, &mut rng)?;
        state.phi_index = update_phi(&state.lambda_star, &state.beta, state.sigma2, bundles, &x_tilde, &mut rng)?.1;

        if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thin) {
            let row = sigma2_out.len();
            lambda_out.row_mut(row).copy_from(&state.lambda_star.transpose());
            beta_out.row_mut(row).copy_from(&state.beta.transpose());
            sigma2_out.push(state.sigma2);
            phi_out.push(state.phi_index);
        }
    }

    Ok(PosteriorChain {
        model,
        seed: config.seed,
        burn_in: config.burn_in,
        thin: config.thin,
        phi_grid: if model.has_phi() { priors.phi_grid.values().to_vec() } else { Vec::new() },
        lambda_star: lambda_out,
        beta: beta_out,
        sigma2: sigma2_out,
        phi_index: if model.has_phi() { phi_out } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble, Pixel};
    use crate::kernel::{build_bundle, CrossCov};

    fn scalar_bundle(phi: f64, s: f64) -> CovarianceBundle {
        CovarianceBundle::from_parts(
            phi,
            DMatrix::from_element(1, 1, s),
            0.0,
            CrossCov::from_row_major(0, 1, vec![]).unwrap(),
        )
        .unwrap()
    }

    fn lik(lambda_hat: &[f64], y: &[f64]) -> WorkingLikelihood {
        WorkingLikelihood {
            lambda_hat: DVector::from_column_slice(lambda_hat),
            precision: DVector::from_column_slice(y),
        }
    }

    #[test]
    fn likelihood_centres_and_weights() {
        let rows = (0..100)
            .map(|j| (Pixel { pixel_id: j, row: j as i64, col: 0, ward_id: 0 }, vec![]))
            .chain(std::iter::once((Pixel { pixel_id: 100, row: 200, col: 0, ward_id: 1 }, vec![])))
            .collect();
        let (_, w) = assemble(rows, vec![], &[(0, 100), (1, 1)], 1.0).unwrap();
        let g = gaussian_likelihood(&w, None).unwrap();
        assert_eq!(g.lambda_hat[0], 0.0);
        assert_eq!(g.precision[0], 100.0);
        assert_eq!(g.precision[1], 1.0);
    }

    #[test]
    fn poisson_curvature_equals_count() {
        // -d²/dλ² [Yλ − |A|e^λ] at λ̂ = log(Y/|A|), by central differences
        for &(y, a) in &[(37.0f64, 11.0f64), (1.0, 1.0), (5000.0, 800.0)] {
            let f = |l: f64| y * l - a * l.exp();
            let lh = (y / a).ln();
            let h = 1e-4;
            let second = (f(lh + h) - 2.0 * f(lh) + f(lh - h)) / (h * h);
            assert!((-second - y).abs() < 1e-4 * y.max(1.0), "{y} {a} {second}");
        }
    }

    #[test]
    fn scalar_lambda_conditional() {
        let b = scalar_bundle(1.0, 1.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        let (mean, cov) =
            lambda_star_moments(&DVector::from_element(1, 0.0), 1.0, &b, &x, &lik(&[1.0], &[4.0])).unwrap();
        assert!((mean[0] - 0.8).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn lambda_conditional_limits() {
        let b = scalar_bundle(1.0, 1.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        let beta = DVector::from_element(1, -3.0);
        let (m, _) = lambda_star_moments(&beta, 1.0, &b, &x, &lik(&[0.7], &[1e8])).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-3);
        let (m, _) = lambda_star_moments(&beta, 1e12, &b, &x, &lik(&[0.7], &[3.0])).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn scalar_beta_conditional() {
        let b = scalar_bundle(1.0, 1.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        let d = WeightedDesign::for_bundle(&x, &b);
        let (m, _) = d.beta_moments(&DVector::from_element(1, 2.0), 1.0, 100.0).unwrap();
        assert!((m[0] - 2.0 / (1.0 + 1e-4)).abs() < 1e-12);
        assert!((m[0] - 1.99980).abs() < 1e-5);
        let (m, _) = d.beta_moments(&DVector::from_element(1, 0.0), 1.0, 100.0).unwrap();
        assert_eq!(m[0], 0.0);

        let tight = Hyperpriors { beta_sd: 1e-9, ..Default::default() };
        let mut rng = rng::from_seed(1);
        let draw = update_beta(&DVector::from_element(1, 2.0), 1.0, &b, &x, &tight, &mut rng).unwrap();
        assert!(draw[0].abs() < 1e-7);
    }

    #[test]
    fn sigma2_shape_and_rate() {
        let priors = Hyperpriors::default();
        let l = 198;
        let b = CovarianceBundle::from_parts(
            1.0,
            DMatrix::identity(l, l),
            0.0,
            CrossCov::from_row_major(0, l, vec![]).unwrap(),
        )
        .unwrap();
        let x = DMatrix::from_element(l, 1, 1.0);
        let beta = DVector::from_element(1, 0.3);
        let lam = &x * &beta;
        let (a, rate) = sigma2_conditional(&lam, &beta, &b, &x, &priors);
        assert_eq!(a, 99.01);
        assert_eq!(rate, 0.01);

        let b2 = CovarianceBundle::from_parts(
            1.0,
            DMatrix::identity(2, 2),
            0.0,
            CrossCov::from_row_major(0, 2, vec![]).unwrap(),
        )
        .unwrap();
        let x2 = DMatrix::from_element(2, 1, 0.0);
        let (_, rate) = sigma2_conditional(&DVector::from_element(2, 1.0), &DVector::zeros(1), &b2, &x2, &priors);
        assert!((rate - 1.01).abs() < 1e-15);
    }

    #[test]
    fn phi_weights() {
        let p = normalize_log_weights(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = normalize_log_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        // ln 3 is only representable to ~1e-10 next to 1e6
        let p = normalize_log_weights(&[-1e6, -1e6 + 3f64.ln()]).unwrap();
        assert!((p[1] - 0.75).abs() < 1e-9);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY]).is_err());

        let bundles = [scalar_bundle(1.0, 1.0), scalar_bundle(2.0, 4.0)];
        let x = DMatrix::from_element(1, 1, 1.0);
        let probs = phi_probabilities(&DVector::zeros(1), &DVector::zeros(1), 1.0, &bundles, &x).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    fn block_fixture(n: i64, bs: i64, seed: u64) -> (crate::grid::PixelGrid, WardTable) {
        use rand::Rng as _;
        let mut r = rng::from_seed(seed);
        let mut rows = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let id = (i * n + j) as usize;
                let w = (i / bs) * (n / bs) + j / bs;
                rows.push((Pixel { pixel_id: id, row: i, col: j, ward_id: w }, vec![r.random::<f64>()]));
            }
        }
        let nw = (n / bs) * (n / bs);
        let pops: Vec<(i64, u64)> = (0..nw).map(|w| (w, 50 + 13 * w as u64)).collect();
        assemble(rows, vec!["c".into()], &pops, 1.0).unwrap()
    }

    #[test]
    fn chain_is_deterministic_and_well_formed() {
        let (g, w) = block_fixture(8, 2, 3);
        let grid = PhiGrid::new(vec![1.0, 2.0, 4.0]).unwrap();
        let bundles: Vec<_> = grid.values().iter().map(|&p| build_bundle(&g, &w, p, 1e-8).unwrap()).collect();
        let priors = Hyperpriors::with_phi_grid(grid.clone());
        let cfg = ChainConfig { burn_in: 20, samples: 50, ..ChainConfig::new(11) };
        let a = run_chain(&w, &bundles, &priors, &cfg).unwrap();
        let b = run_chain(&w, &bundles, &priors, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.sigma2.iter().all(|&s| s > 0.0));
        assert!(a.phi_draws().iter().all(|p| grid.index_of(*p).is_some()));

        let bad = Hyperpriors::with_phi_grid(PhiGrid::new(vec![1.0, 2.0]).unwrap());
        assert!(run_chain(&w, &bundles, &bad, &cfg).is_err());
    }

    #[test]
    fn one_sample_equals_one_sweep() {
        let (g, w) = block_fixture(6, 3, 4);
        let grid = PhiGrid::new(vec![1.5, 3.0]).unwrap();
        let bundles: Vec<_> = grid.values().iter().map(|&p| build_bundle(&g, &w, p, 1e-8).unwrap()).collect();
        let priors = Hyperpriors::with_phi_grid(grid);
        let cfg = ChainConfig { burn_in: 0, samples: 1, ..ChainConfig::new(5) };
        let chain = run_chain(&w, &bundles, &priors, &cfg).unwrap();

        let x = w.x_tilde();
        let lk = gaussian_likelihood(&w, None).unwrap();
        let s = initial_state(&x, &lk, 2, InitStrategy::Empirical).unwrap();
        assert_eq!(s.phi_index, 0);
        let mut r = rng::from_seed(5);
        let lam = update_lambda_star(&s.beta, s.sigma2, &bundles[0], &x, &lk, &mut r).unwrap();
        let beta = update_beta(&lam, s.sigma2, &bundles[0], &x, &priors, &mut r).unwrap();
        let s2 = update_sigma2(&lam, &beta, &bundles[0], &x, &priors, &mut r).unwrap();
        let (_, k) = update_phi(&lam, &beta, s2, &bundles, &x, &mut r).unwrap();
        assert_eq!(chain.lambda_star.row(0).transpose(), lam);
        assert_eq!(chain.beta.row(0).transpose(), beta);
        assert_eq!(chain.sigma2[0], s2);
        assert_eq!(chain.phi_index[0], k);
    }
}
