//! Comparison models and the frequentist Poisson regression.
//!
//! * Laplace: no latent term. `β` has a closed-form normal posterior under
//!   the working likelihood `λ̂* ~ N(X̃β, diag(1/Y))`.
//! * Laplace-WN: the Gibbs sampler with pixel-level white noise, i.e.
//!   `Σ₀₀ = diag(1/|A_i|)` and `Σₚ₀(j, i) = 1/|A_i|` for `j ∈ A_i`.
//! * BayesGLM: exact Poisson likelihood with `N(0, beta_sd²)` priors,
//!   sampled by componentwise adaptive random-walk Metropolis.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::chain::{ModelKind, PosteriorChain};
use crate::error::{DisaggError, Result};
use crate::format::sig9;
use crate::grid::{PixelGrid, WardTable};
use crate::kernel::{CovarianceBundle, CrossCov, PhiGrid};
use crate::linalg;
use crate::rng;
use crate::sampler::{self, ChainConfig, Hyperpriors, WeightedDesign};

pub const GLM_MAX_ITER: usize = 100;
pub const GLM_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    BayesGlm,
    Laplace,
    LaplaceWn,
}

impl BaselineKind {
    pub fn model(self) -> ModelKind {
        match self {
            BaselineKind::BayesGlm => ModelKind::BayesGlm,
            BaselineKind::Laplace => ModelKind::Laplace,
            BaselineKind::LaplaceWn => ModelKind::WhiteNoise,
        }
    }

    pub fn from_model(m: ModelKind) -> Option<Self> {
        match m {
            ModelKind::BayesGlm => Some(BaselineKind::BayesGlm),
            ModelKind::Laplace => Some(BaselineKind::Laplace),
            ModelKind::WhiteNoise => Some(BaselineKind::LaplaceWn),
            ModelKind::Gp => None,
        }
    }
}

fn full_rank(x: &DMatrix<f64>) -> bool {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = f64::EPSILON * x.nrows().max(x.ncols()) as f64 * max;
    x.nrows() >= x.ncols() && max > 0.0 && sv.iter().all(|&s| s > tol)
}

fn poisson_deviance(y: &[f64], mu: &DVector<f64>) -> f64 {
    2.0 * y
        .iter()
        .zip(mu.iter())
        .map(|(&y, &m)| if y > 0.0 { y * (y / m).ln() - (y - m) } else { m })
        .sum::<f64>()
}

/// Newton/IRLS iterations for the Poisson log-linear model with offset,
/// optionally with a ridge `β/prior_var` (posterior mode under normal
/// priors). Returns `(β, information, iterations, converged, deviance)`.
fn poisson_irls(
    x: &DMatrix<f64>,
    y: &[f64],
    offset: &[f64],
    prior_var: Option<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, usize, bool, f64)> {
    let (n, p) = x.shape();
    if y.len() != n || offset.len() != n {
        return Err(DisaggError::validation("response and design lengths differ"));
    }
    if y.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(DisaggError::validation("Poisson responses must be non-negative"));
    }
    if prior_var.is_none() && !full_rank(x) {
        return Err(DisaggError::validation("rank-deficient design"));
    }
    let off = DVector::from_column_slice(offset);
    let yv = DVector::from_column_slice(y);
    let ridge = prior_var.map(|v| 1.0 / v).unwrap_or(0.0);

    // μ starts at y + 0.1; the first step is a weighted regression of the
    // working response on X
    let mut eta = DVector::from_fn(n, |i, _| (y[i] + 0.1).ln());
    let mut mu = eta.map(f64::exp);
    let mut beta = DVector::zeros(p);
    let mut dev_old = poisson_deviance(y, &mu);
    let mut info = DMatrix::zeros(p, p);
    for it in 1..=GLM_MAX_ITER {
        let z = DVector::from_fn(n, |i, _| eta[i] - off[i] + (yv[i] - mu[i]) / mu[i]);
        let wx = DMatrix::from_fn(n, p, |i, k| mu[i] * x[(i, k)]);
        info = linalg::symmetrize(x.transpose() * &wx) + DMatrix::identity(p, p) * ridge;
        let rhs = wx.tr_mul(&z);
        let l = linalg::cholesky_lower(&info)
            .ok_or_else(|| DisaggError::numerical("information matrix is not positive definite"))?;
        beta = linalg::chol_solve(&l, &rhs);
        eta = x * &beta + &off;
        if eta.iter().any(|v| !v.is_finite() || *v > 700.0) {
            return Err(DisaggError::numerical("IRLS diverged"));
        }
        mu = eta.map(f64::exp);
        let dev = poisson_deviance(y, &mu) + ridge * beta.norm_squared();
        if (dev - dev_old).abs() / (dev.abs() + 0.1) < GLM_TOLERANCE {
            let wx = DMatrix::from_fn(n, p, |i, k| mu[i] * x[(i, k)]);
            info = linalg::symmetrize(x.transpose() * &wx) + DMatrix::identity(p, p) * ridge;
            return Ok((beta, info, it, true, poisson_deviance(y, &mu)));
        }
        dev_old = dev;
    }
    Ok((beta, info, GLM_MAX_ITER, false, poisson_deviance(y, &mu)))
}

/// Maximum-likelihood Poisson regression of `y` on `x` with `offset`.
pub fn fit_poisson_glm_raw(x: &DMatrix<f64>, y: &[f64], offset: &[f64]) -> Result<GlmFit> {
    let (coef, info, iterations, converged, deviance) = poisson_irls(x, y, offset, None)?;
    if !converged {
        return Err(DisaggError::numerical(format!(
            "Poisson GLM did not converge in {GLM_MAX_ITER} iterations"
        )));
    }
    let l = linalg::cholesky_lower(&info)
        .ok_or_else(|| DisaggError::numerical("information matrix is not positive definite"))?;
    let cov = linalg::chol_inverse(&l);
    let se: Vec<f64> = (0..coef.len()).map(|k| cov[(k, k)].sqrt()).collect();
    let z: Vec<f64> = coef.iter().zip(&se).map(|(c, s)| c / s).collect();
    let p = z
        .iter()
        .map(|z| erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
        .collect();
    Ok(GlmFit {
        coef: coef.as_slice().to_vec(),
        se,
        z,
        p,
        converged,
        iterations,
        deviance,
    })
}

fn ward_response(wards: &WardTable) -> (Vec<f64>, Vec<f64>) {
    let y = wards.populations().iter().map(|&v| v as f64).collect();
    let off = wards.pixel_counts().iter().map(|&n| (n as f64).ln()).collect();
    (y, off)
}

/// `Y_i ~ Poisson(|A_i| exp(X̃_iᵀβ))`.
pub fn fit_poisson_glm(wards: &WardTable) -> Result<GlmFit> {
    let (y, off) = ward_response(wards);
    fit_poisson_glm_raw(&wards.x_tilde(), &y, &off)
}

/// Posterior mode of the BayesGLM model.
pub fn bayes_glm_map(wards: &WardTable, beta_sd: f64) -> Result<Vec<f64>> {
    let (y, off) = ward_response(wards);
    let (beta, _, _, converged, _) = poisson_irls(&wards.x_tilde(), &y, &off, Some(beta_sd * beta_sd))?;
    if !converged {
        return Err(DisaggError::numerical("posterior mode search did not converge"));
    }
    Ok(beta.as_slice().to_vec())
}

/// `term,estimate,std_error,z_value,p_value`.
pub fn write_glm_table(path: &Path, fit: &GlmFit, covariate_names: &[String]) -> Result<()> {
    let mut s = String::from("term,estimate,std_error,z_value,p_value\n");
    let names = std::iter::once("(Intercept)").chain(covariate_names.iter().map(String::as_str));
    for (k, name) in names.enumerate().take(fit.coef.len()) {
        s.push_str(&format!(
            "{name},{},{},{},{}\n",
            sig9(fit.coef[k]),
            sig9(fit.se[k]),
            sig9(fit.z[k]),
            sig9(fit.p[k])
        ));
    }
    std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
}

/// Σ₀₀ = diag(1/|A_i|) with membership-only Σₚ₀.
pub fn white_noise_bundle(grid: &PixelGrid, wards: &WardTable) -> Result<CovarianceBundle> {
    let inv_size: Vec<f64> = wards.pixel_counts().iter().map(|&n| 1.0 / n as f64).collect();
    let sigma00 = DMatrix::from_diagonal(&DVector::from_column_slice(&inv_size));
    let ward_of: Vec<usize> = (0..grid.len()).map(|j| grid.ward_of(j)).collect();
    let sp0 = CrossCov::Membership {
        ward: Arc::new(ward_of),
        value: Arc::new(inv_size),
    };
    CovarianceBundle::from_parts(WN_PHI, sigma00, 0.0, sp0)
}

/// Placeholder φ of the white-noise bundle; never reported.
const WN_PHI: f64 = 1.0;

/// Fits one of the comparison models.
pub fn fit_baseline(
    kind: BaselineKind,
    grid: &PixelGrid,
    wards: &WardTable,
    priors: &Hyperpriors,
    config: &ChainConfig,
) -> Result<PosteriorChain> {
    priors.validate()?;
    config.validate()?;
    match kind {
        BaselineKind::Laplace => fit_laplace(wards, priors, config),
        BaselineKind::LaplaceWn => {
            let bundle = white_noise_bundle(grid, wards)?;
            let wn_priors = Hyperpriors {
                phi_grid: PhiGrid::single(WN_PHI)?,
                ..priors.clone()
            };
            sampler::run_latent_chain(ModelKind::WhiteNoise, wards, &[bundle], &wn_priors, config)
        }
        BaselineKind::BayesGlm => fit_bayes_glm(wards, priors, config),
    }
}

/// Closed-form `(mean, covariance)` of `β` in the Laplace model.
pub fn laplace_posterior(
    wards: &WardTable,
    beta_sd: f64,
    pseudo_count: Option<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let lik = sampler::gaussian_likelihood(wards, pseudo_count)?;
    let w = DMatrix::from_diagonal(&lik.precision);
    WeightedDesign::new(&wards.x_tilde(), &w).beta_moments(&lik.lambda_hat, 1.0, beta_sd)
}

fn fit_laplace(wards: &WardTable, priors: &Hyperpriors, config: &ChainConfig) -> Result<PosteriorChain> {
    let (mean, cov) = laplace_posterior(wards, priors.beta_sd, config.pseudo_count)?;
    let l = linalg::cholesky_lower(&cov)
        .ok_or_else(|| DisaggError::numerical("Laplace posterior covariance is not positive definite"))?;
    let x_tilde = wards.x_tilde();
    let mut r = rng::from_seed(config.seed);
    let (b, p) = (config.samples, mean.len());
    let mut beta = DMatrix::zeros(b, p);
    let mut lambda = DMatrix::zeros(b, wards.len());
    for row in 0..b {
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut r));
        let draw = &mean + &l * z;
        lambda.row_mut(row).copy_from(&(&x_tilde * &draw).transpose());
        beta.row_mut(row).copy_from(&draw.transpose());
    }
    Ok(PosteriorChain {
        model: ModelKind::Laplace,
        seed: config.seed,
        burn_in: 0,
        thin: 1,
        phi_grid: Vec::new(),
        lambda_star: lambda,
        beta,
        sigma2: Vec::new(),
        phi_index: Vec::new(),
    })
}

/// Iterations per adaptation batch during burn-in.
const ADAPT_BATCH: usize = 50;

fn poisson_log_lik(y: &[f64], area: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(area)
        .zip(eta)
        .map(|((&y, &a), &e)| y * e - a * e.exp())
        .sum()
}

fn fit_bayes_glm(wards: &WardTable, priors: &Hyperpriors, config: &ChainConfig) -> Result<PosteriorChain> {
    let x = wards.x_tilde();
    let (n, p) = x.shape();
    let (y, off) = ward_response(wards);
    let area: Vec<f64> = off.iter().map(|o| o.exp()).collect();
    let prior_prec = 1.0 / (priors.beta_sd * priors.beta_sd);

    let (mut beta, mut step) = match fit_poisson_glm_raw(&x, &y, &off) {
        Ok(fit) => (
            DVector::from_vec(fit.coef),
            fit.se.iter().map(|s| 2.4 * s).collect::<Vec<f64>>(),
        ),
        Err(_) => (DVector::zeros(p), vec![0.1; p]),
    };
    let mut eta: Vec<f64> = (&x * &beta).iter().copied().collect();
    let mut log_post = poisson_log_lik(&y, &area, &eta) - 0.5 * prior_prec * beta.norm_squared();

    let mut r = rng::from_seed(config.seed);
    let b = config.samples;
    let mut beta_out = DMatrix::zeros(b, p);
    let mut lambda_out = DMatrix::zeros(b, n);
    let mut accepted = vec![0usize; p];
    let mut proposal = vec![0.0; n];
    let total = config.burn_in + config.samples * config.thin;
    let mut row = 0;
    for it in 0..total {
        for k in 0..p {
            let z: f64 = StandardNormal.sample(&mut r);
            let delta = step[k] * z;
            for i in 0..n {
                proposal[i] = eta[i] + x[(i, k)] * delta;
            }
            let new_bk = beta[k] + delta;
            let sq = beta.norm_squared() - beta[k] * beta[k] + new_bk * new_bk;
            let cand = poisson_log_lik(&y, &area, &proposal) - 0.5 * prior_prec * sq;
            let log_u: f64 = r.random::<f64>().ln();
            if cand.is_finite() && log_u < cand - log_post {
                beta[k] = new_bk;
                std::mem::swap(&mut eta, &mut proposal);
                log_post = cand;
                accepted[k] += 1;
            }
        }
        if it < config.burn_in && (it + 1) % ADAPT_BATCH == 0 {
            for k in 0..p {
                let rate = accepted[k] as f64 / ADAPT_BATCH as f64;
                if rate < 0.23 {
                    step[k] *= 0.8;
                } else if rate > 0.44 {
                    step[k] *= 1.25;
                }
                accepted[k] = 0;
            }
        }
        if it + 1 == config.burn_in {
            accepted.iter_mut().for_each(|a| *a = 0);
        }
        if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thin) {
            beta_out.row_mut(row).copy_from(&beta.transpose());
            for i in 0..n {
                lambda_out[(row, i)] = eta[i];
            }
            row += 1;
        }
    }
    Ok(PosteriorChain {
        model: ModelKind::BayesGlm,
        seed: config.seed,
        burn_in: config.burn_in,
        thin: config.thin,
        phi_grid: Vec::new(),
        lambda_star: lambda_out,
        beta: beta_out,
        sigma2: Vec::new(),
        phi_index: Vec::new(),
    })
}
