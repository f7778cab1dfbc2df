//! Pixel-level posterior summaries by Monte Carlo over the chain.
//!
//! For draw `b` with bundle `φ⁽ᵇ⁾`, pixel `j` has conditional moments
//!
//! ```text
//! m_j⁽ᵇ⁾ = x_jᵀβ⁽ᵇ⁾ + s_jᵀ Σ₀₀⁻¹ (λ*⁽ᵇ⁾ − X̃β⁽ᵇ⁾)
//! v_j⁽ᵇ⁾ = σ²⁽ᵇ⁾ (1 − s_jᵀ Σ₀₀⁻¹ s_j)
//! ```
//!
//! where `s_j` is row `j` of Σₚ₀. The posterior mean is the average of
//! `m_j⁽ᵇ⁾` and the posterior variance adds the average of `v_j⁽ᵇ⁾` to the
//! sample variance of `m_j⁽ᵇ⁾` (denominator `B − 1`).
//!
//! Work is split into ward blocks (large wards are chunked to fit the memory
//! budget). Within a block, draws are visited grouped by φ so each Σₚ₀ row
//! is read once per block and φ. No `P × B` buffer is ever formed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::chain::PosteriorChain;
use crate::error::{DisaggError, Result};
use crate::format::sig9;
use crate::grid::{PixelGrid, WardTable};
use crate::kernel::CovarianceBundle;

/// Latent structure used to map ward draws to pixels.
#[derive(Clone, Copy, Debug)]
pub enum LatentField<'a> {
    /// One bundle per φ grid value, selected by the chain's φ index.
    Kernel(&'a [CovarianceBundle]),
    /// One bundle shared by every draw.
    Single(&'a CovarianceBundle),
    /// Fixed effects only: `m_j = x_jᵀβ`, `v_j = 0`.
    FixedEffects,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictConfig {
    /// Upper bound on working memory, excluding the returned vectors.
    pub block_budget_bytes: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            block_budget_bytes: 256 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMeta {
    pub draws: usize,
    pub seed: u64,
    pub phi_grid: Vec<f64>,
    pub chain_checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelPosterior {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub meta: PosteriorMeta,
}

/// Per-draw quantities shared by all pixels.
#[derive(Clone, Debug)]
pub struct DrawTerms {
    pub beta: Vec<f64>,
    /// `Σ₀₀⁻¹(λ* − X̃β)`, empty for fixed-effects models.
    pub weights: Vec<f64>,
    pub sigma2: f64,
    pub bundle: usize,
}

/// Covariates and Σₚ₀ rows for a set of pixels under one bundle, plus the
/// explained fraction `s_jᵀΣ₀₀⁻¹s_j`.
#[derive(Clone, Debug, Default)]
pub struct PixelBlock {
    pub pixels: Vec<usize>,
    width: usize,
    n_wards: usize,
    x: Vec<f64>,
    rows: Vec<f64>,
    explained: Vec<f64>,
}

impl PixelBlock {
    /// Loads the block. `bundle = None` gives a fixed-effects block.
    pub fn load(grid: &PixelGrid, pixels: &[usize], bundle: Option<&CovarianceBundle>) -> Result<Self> {
        let mut block = PixelBlock::default();
        block.fill(grid, pixels, bundle, &mut Vec::new())?;
        Ok(block)
    }

    fn fill(
        &mut self,
        grid: &PixelGrid,
        pixels: &[usize],
        bundle: Option<&CovarianceBundle>,
        scratch: &mut Vec<u8>,
    ) -> Result<()> {
        let cov = grid.covariates();
        self.width = cov.ncols();
        self.pixels.clear();
        self.pixels.extend_from_slice(pixels);
        self.x.clear();
        for &j in pixels {
            self.x.extend(cov.row(j).iter());
        }
        self.rows.clear();
        self.explained.clear();
        self.n_wards = 0;
        if let Some(b) = bundle {
            let l = b.n_wards();
            self.n_wards = l;
            self.rows.resize(pixels.len() * l, 0.0);
            let store = b.sigma_p0();
            for (k, &j) in pixels.iter().enumerate() {
                store.read_row(j, &mut self.rows[k * l..(k + 1) * l], scratch)?;
            }
            let inv = b.inv00();
            for k in 0..pixels.len() {
                let s = &self.rows[k * l..(k + 1) * l];
                let mut q = 0.0;
                for a in 0..l {
                    let mut t = 0.0;
                    for c in 0..l {
                        t += inv[(a, c)] * s[c];
                    }
                    q += s[a] * t;
                }
                self.explained.push(q);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn x_row(&self, k: usize) -> &[f64] {
        &self.x[k * self.width..(k + 1) * self.width]
    }

    fn s_row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.n_wards..(k + 1) * self.n_wards]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `x_jᵀβ + s_jᵀ w` for a single pixel.
#[inline]
pub fn pixel_mean(x_row: &[f64], beta: &[f64], s_row: &[f64], weights: &[f64]) -> f64 {
    let fixed = dot(x_row, beta);
    if weights.is_empty() {
        fixed
    } else {
        fixed + dot(s_row, weights)
    }
}

/// `σ²(1 − q)` clamped at zero.
#[inline]
pub fn pixel_var(sigma2: f64, explained: f64, has_latent: bool) -> f64 {
    if has_latent {
        (sigma2 * (1.0 - explained)).max(0.0)
    } else {
        0.0
    }
}

/// Conditional means of the block's pixels for one draw.
pub fn conditional_pixel_mean(draw: &DrawTerms, block: &PixelBlock) -> Vec<f64> {
    (0..block.len())
        .map(|k| pixel_mean(block.x_row(k), &draw.beta, block.s_row(k), &draw.weights))
        .collect()
}

/// Conditional variances of the block's pixels for one draw.
pub fn conditional_pixel_var(draw: &DrawTerms, block: &PixelBlock) -> Vec<f64> {
    let latent = !draw.weights.is_empty();
    (0..block.len())
        .map(|k| pixel_var(draw.sigma2, block.explained.get(k).copied().unwrap_or(0.0), latent))
        .collect()
}

/// Precomputes `β`, `Σ₀₀⁻¹(λ* − X̃β)` and `σ²` for every draw.
pub fn draw_terms(chain: &PosteriorChain, field: LatentField<'_>, wards: &WardTable) -> Result<Vec<DrawTerms>> {
    let x_tilde = wards.x_tilde();
    if chain.n_wards() != wards.len() || chain.n_coef() != x_tilde.ncols() {
        return Err(DisaggError::validation(format!(
            "chain shape (L = {}, m+1 = {}) does not match the grid (L = {}, m+1 = {})",
            chain.n_wards(),
            chain.n_coef(),
            wards.len(),
            x_tilde.ncols()
        )));
    }
    let mut out = Vec::with_capacity(chain.len());
    for b in 0..chain.len() {
        let beta: DVector<f64> = chain.beta.row(b).transpose();
        let (bundle, idx) = match field {
            LatentField::Kernel(bundles) => {
                let k = *chain.phi_index.get(b).ok_or_else(|| {
                    DisaggError::validation("chain has no phi draws for a kernel field")
                })?;
                let bundle = bundles.get(k).ok_or_else(|| {
                    DisaggError::validation(format!("missing covariance bundle for phi index {k}"))
                })?;
                if bundle.phi.to_bits() != chain.phi_grid[k].to_bits() {
                    return Err(DisaggError::validation(format!(
                        "missing covariance bundle for phi = {}",
                        chain.phi_grid[k]
                    )));
                }
                (Some(bundle), k)
            }
            LatentField::Single(bundle) => (Some(bundle), 0),
            LatentField::FixedEffects => (None, 0),
        };
        let (weights, sigma2) = match bundle {
            Some(bd) => {
                let r = chain.lambda_star.row(b).transpose() - &x_tilde * &beta;
                let s2 = *chain
                    .sigma2
                    .get(b)
                    .ok_or_else(|| DisaggError::validation("chain has no sigma2 draws for a latent field"))?;
                (bd.solve(&r).as_slice().to_vec(), s2)
            }
            None => (Vec::new(), 0.0),
        };
        out.push(DrawTerms {
            beta: beta.as_slice().to_vec(),
            weights,
            sigma2,
            bundle: idx,
        });
    }
    Ok(out)
}

/// Visiting order of draws: grouped by bundle, chain order within a group.
pub fn draw_order(terms: &[DrawTerms]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by_key(|&b| terms[b].bundle);
    order
}

/// Running per-pixel accumulator (Welford for the conditional means).
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelAccumulator {
    n: f64,
    mean: f64,
    m2: f64,
    var_sum: f64,
}

impl PixelAccumulator {
    #[inline]
    pub fn push(&mut self, m: f64, v: f64) {
        self.n += 1.0;
        let delta = m - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (m - self.mean);
        self.var_sum += v;
    }

    /// `(mean, variance)` with the between-draw term on `n − 1`.
    pub fn finish(&self) -> (f64, f64) {
        (self.mean, self.var_sum / self.n + self.m2 / (self.n - 1.0))
    }
}

fn bundle_at<'a>(field: LatentField<'a>, k: usize) -> Option<&'a CovarianceBundle> {
    match field {
        LatentField::Kernel(b) => Some(&b[k]),
        LatentField::Single(b) => Some(b),
        LatentField::FixedEffects => None,
    }
}

fn process_unit(
    grid: &PixelGrid,
    pixels: &[usize],
    field: LatentField<'_>,
    terms: &[DrawTerms],
    order: &[usize],
) -> Result<Vec<PixelAccumulator>> {
    let mut acc = vec![PixelAccumulator::default(); pixels.len()];
    let mut block = PixelBlock::default();
    let mut scratch = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let k = terms[order[start]].bundle;
        let end = start + order[start..].iter().take_while(|&&b| terms[b].bundle == k).count();
        block.fill(grid, pixels, bundle_at(field, k), &mut scratch)?;
        let latent = !matches!(field, LatentField::FixedEffects);
        for &b in &order[start..end] {
            let t = &terms[b];
            for (p, a) in acc.iter_mut().enumerate() {
                let m = pixel_mean(block.x_row(p), &t.beta, block.s_row(p), &t.weights);
                let v = pixel_var(t.sigma2, block.explained.get(p).copied().unwrap_or(0.0), latent);
                a.push(m, v);
            }
        }
        start = end;
    }
    Ok(acc)
}

/// Bytes of working memory per pixel in a block.
fn bytes_per_pixel(width: usize, n_wards: usize) -> usize {
    (width + n_wards + 1 + 4 + 1) * std::mem::size_of::<f64>()
}

/// Posterior mean and standard deviation of every pixel's log-intensity.
pub fn pixel_posterior(
    chain: &PosteriorChain,
    field: LatentField<'_>,
    grid: &PixelGrid,
    wards: &WardTable,
    config: &PredictConfig,
) -> Result<PixelPosterior> {
    if chain.len() < 2 {
        return Err(DisaggError::validation(
            "at least two draws are needed for the between-draw variance",
        ));
    }
    let terms = draw_terms(chain, field, wards)?;
    let order = draw_order(&terms);

    let width = grid.covariates().ncols();
    let n_wards = match field {
        LatentField::FixedEffects => 0,
        _ => wards.len(),
    };
    let term_bytes = terms.len() * (width + n_wards + 2) * 8 + order.len() * 8;
    let threads = rayon::current_num_threads().max(1);
    let per_pixel = bytes_per_pixel(width, n_wards);
    let available = config.block_budget_bytes.saturating_sub(term_bytes);
    let chunk = available / (threads * per_pixel * 2);
    if chunk == 0 {
        return Err(DisaggError::validation(format!(
            "block budget of {} bytes is too small for this chain",
            config.block_budget_bytes
        )));
    }

    let units: Vec<&[usize]> = (0..wards.len())
        .flat_map(|i| wards.members(i).chunks(chunk))
        .collect();

    let p = grid.len();
    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for wave in units.chunks(threads) {
        let results: Vec<Result<Vec<PixelAccumulator>>> = wave
            .par_iter()
            .map(|px| process_unit(grid, px, field, &terms, &order))
            .collect();
        for (px, res) in wave.iter().zip(results) {
            for (&j, a) in px.iter().zip(res?) {
                let (mu, var) = a.finish();
                if !(var >= 0.0) {
                    return Err(DisaggError::numerical(format!(
                        "negative posterior variance {var} at pixel {j}"
                    )));
                }
                mean[j] = mu;
                sd[j] = var.sqrt();
            }
        }
    }
    Ok(PixelPosterior {
        mean,
        sd,
        meta: PosteriorMeta {
            draws: chain.len(),
            seed: chain.seed,
            phi_grid: chain.phi_grid.clone(),
            chain_checksum: None,
        },
    })
}

/// Ward-level comparison of pixel estimates against the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct WardCheck {
    pub ward_id: i64,
    /// `log(|A_i|⁻¹ Σ_{j ∈ A_i} exp(mean_j))`.
    pub pixel_aggregate: f64,
    pub chain_mean: f64,
    pub difference: f64,
}

pub fn aggregate_check(
    posterior: &PixelPosterior,
    wards: &WardTable,
    chain: &PosteriorChain,
) -> Vec<WardCheck> {
    let chain_mean = chain.lambda_mean();
    (0..wards.len())
        .map(|i| {
            let members = wards.members(i);
            let s: f64 = members.iter().map(|&j| posterior.mean[j].exp()).sum();
            let agg = (s / members.len() as f64).ln();
            WardCheck {
                ward_id: wards.ward(i).ward_id,
                pixel_aggregate: agg,
                chain_mean: chain_mean[i],
                difference: agg - chain_mean[i],
            }
        })
        .collect()
}

pub fn write_aggregate_check(path: &Path, checks: &[WardCheck]) -> Result<()> {
    let mut s = String::from("ward_id,pixel_aggregate,chain_mean,difference\n");
    for c in checks {
        s.push_str(&format!(
            "{},{},{},{}\n",
            c.ward_id,
            sig9(c.pixel_aggregate),
            sig9(c.chain_mean),
            sig9(c.difference)
        ));
    }
    std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
}

/// `pixel_id,row,col,ward_id,post_mean,post_sd`.
pub fn write_pixel_posterior(path: &Path, grid: &PixelGrid, post: &PixelPosterior) -> Result<()> {
    let io = |e| DisaggError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "pixel_id,row,col,ward_id,post_mean,post_sd").map_err(io)?;
    for (j, p) in grid.pixels().iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.pixel_id,
            p.row,
            p.col,
            p.ward_id,
            sig9(post.mean[j]),
            sig9(post.sd[j])
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads back `post_mean` and `post_sd` columns, indexed by pixel id.
pub fn read_pixel_posterior(path: &Path, n_pixels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DisaggError::parse(path, e.to_string()))?;
    let mut mean = vec![f64::NAN; n_pixels];
    let mut sd = vec![f64::NAN; n_pixels];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DisaggError::parse(path, e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| DisaggError::parse(path, "malformed posterior record"))
        };
        let j = num(0)? as usize;
        if j >= n_pixels {
            return Err(DisaggError::parse(path, format!("pixel id {j} out of range")));
        }
        mean[j] = num(4)?;
        sd[j] = num(5)?;
    }
    if mean.iter().any(|v| v.is_nan()) {
        return Err(DisaggError::parse(path, "posterior file does not cover every pixel"));
    }
    Ok((mean, sd))
}

/// Writes an 8-bit binary PGM of `values` over the grid's bounding raster
/// with linear min–max scaling; the scale is recorded in `<path>.txt`.
/// Cells without a pixel are 0.
pub fn write_pgm(path: &Path, grid: &PixelGrid, values: &[f64]) -> Result<()> {
    let (r0, c0, nr, nc) = grid.extent();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut img = vec![0u8; nr * nc];
    for (j, p) in grid.pixels().iter().enumerate() {
        let t = if span > 0.0 { (values[j] - lo) / span } else { 0.5 };
        let level = 1.0 + t * 254.0;
        img[(p.row - r0) as usize * nc + (p.col - c0) as usize] = level.round() as u8;
    }
    let io = |e| DisaggError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "P5\n{nc} {nr}\n255\n").map_err(io)?;
    w.write_all(&img).map_err(io)?;
    w.flush().map_err(io)?;
    let side = path.with_extension(format!(
        "{}.txt",
        path.extension().and_then(|e| e.to_str()).unwrap_or("pgm")
    ));
    std::fs::write(
        &side,
        format!("min={}\nmax={}\nlevel=1+254*(value-min)/(max-min)\nempty=0\n", sig9(lo), sig9(hi)),
    )
    .map_err(|e| DisaggError::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ModelKind;
    use crate::grid::{assemble, Pixel};
    use crate::kernel::build_bundle;
    use nalgebra::DMatrix;

    type Cells = [(i64, i64, i64, f64)];

    fn fixture(cells: &Cells) -> (PixelGrid, WardTable) {
        let rows = cells
            .iter()
            .enumerate()
            .map(|(j, &(r, c, w, x))| (Pixel { pixel_id: j, row: r, col: c, ward_id: w }, vec![x]))
            .collect();
        let mut ids: Vec<i64> = cells.iter().map(|c| c.2).collect();
        ids.sort();
        ids.dedup();
        let pops: Vec<(i64, u64)> = ids.iter().map(|&i| (i, 40 + i as u64)).collect();
        assemble(rows, vec!["x".into()], &pops, 1.0).unwrap()
    }

    fn chain_from(lambda: Vec<Vec<f64>>, beta: Vec<Vec<f64>>, sigma2: Vec<f64>) -> PosteriorChain {
        let b = lambda.len();
        let l = lambda[0].len();
        let m = beta[0].len();
        PosteriorChain {
            model: ModelKind::Gp,
            seed: 1,
            burn_in: 0,
            thin: 1,
            phi_grid: vec![2.0],
            lambda_star: DMatrix::from_fn(b, l, |r, c| lambda[r][c]),
            beta: DMatrix::from_fn(b, m, |r, c| beta[r][c]),
            sigma2,
            phi_index: vec![0; b],
        }
    }

    // ward 0: single pixel; ward 1: three pixels
    const TOY: [(i64, i64, i64, f64); 4] = [(0, 0, 0, 0.5), (0, 3, 1, 1.0), (1, 3, 1, 2.0), (0, 4, 1, 3.0)];

    #[test]
    fn sole_member_pixel_reproduces_ward_draw() {
        let (g, w) = fixture(&TOY);
        let bundle = build_bundle(&g, &w, 2.0, 0.0).unwrap();
        let chain = chain_from(vec![vec![1.3, 0.2]], vec![vec![0.1, 0.4]], vec![0.7]);
        let terms = draw_terms(&chain, LatentField::Single(&bundle), &w).unwrap();
        let block = PixelBlock::load(&g, &[0], Some(&bundle)).unwrap();
        let m = conditional_pixel_mean(&terms[0], &block);
        assert!((m[0] - 1.3).abs() < 1e-12);
        let v = conditional_pixel_var(&terms[0], &block);
        assert!(v[0] < 1e-12);
    }

    #[test]
    fn zero_residual_gives_fixed_effect() {
        let (g, w) = fixture(&TOY);
        let bundle = build_bundle(&g, &w, 2.0, 1e-8).unwrap();
        let beta = vec![0.1, 0.4];
        let xt = w.x_tilde();
        let lam: Vec<f64> = (0..2).map(|i| xt[(i, 0)] * beta[0] + xt[(i, 1)] * beta[1]).collect();
        let chain = chain_from(vec![lam], vec![beta.clone()], vec![0.7]);
        let terms = draw_terms(&chain, LatentField::Single(&bundle), &w).unwrap();
        let block = PixelBlock::load(&g, &[1, 2, 3], Some(&bundle)).unwrap();
        let m = conditional_pixel_mean(&terms[0], &block);
        for (k, &j) in [1usize, 2, 3].iter().enumerate() {
            let xb = beta[0] + beta[1] * g.covariates()[(j, 1)];
            assert!((m[k] - xb).abs() < 1e-12);
        }
    }

    #[test]
    fn far_pixel_has_prior_variance() {
        let cells = [(0, 0, 0, 0.0), (0, 1, 0, 0.0), (5000, 5000, 1, 0.0)];
        let (g, w) = fixture(&cells);
        let bundle = build_bundle(&g, &w, 1.0, 0.0).unwrap();
        let chain = chain_from(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]], vec![2.5]);
        let terms = draw_terms(&chain, LatentField::Single(&bundle), &w).unwrap();
        // the isolated ward has one pixel, so ask about a pixel of ward 0 relative to ward 1's column
        let block = PixelBlock::load(&g, &[0], Some(&bundle)).unwrap();
        assert!(block.s_row(0)[1] == 0.0);
        let v = conditional_pixel_var(&terms[0], &block)[0];
        // explained fraction comes only from the own two-pixel ward
        let s00 = bundle.sigma00()[(0, 0)];
        let s = block.s_row(0)[0];
        assert!((v - 2.5 * (1.0 - s * s / s00)).abs() < 1e-12);
    }

    #[test]
    fn dense_two_ward_reference() {
        // P = 3, L = 2: explicit matrix arithmetic
        let cells = [(0, 0, 0, 1.0), (0, 1, 0, 2.0), (2, 0, 1, -1.0)];
        let (g, w) = fixture(&cells);
        let bundle = build_bundle(&g, &w, 1.5, 0.0).unwrap();
        let s00 = bundle.sigma00().clone();
        let sp0 = bundle.sigma_p0().to_dense().unwrap();
        let inv = s00.clone().try_inverse().unwrap();
        let beta = DVector::from_vec(vec![0.2, -0.3]);
        let lam = DVector::from_vec(vec![0.9, -0.4]);
        let x = g.covariates().clone();
        let xt = w.x_tilde();
        let mean_ref = &x * &beta + &sp0 * &inv * (&lam - &xt * &beta);
        let var_ref = (&sp0 * &inv * sp0.transpose()).map(|q| 0.8 * (1.0 - q));

        let chain = chain_from(vec![lam.as_slice().to_vec()], vec![beta.as_slice().to_vec()], vec![0.8]);
        let terms = draw_terms(&chain, LatentField::Single(&bundle), &w).unwrap();
        let block = PixelBlock::load(&g, &[0, 1, 2], Some(&bundle)).unwrap();
        let m = conditional_pixel_mean(&terms[0], &block);
        let v = conditional_pixel_var(&terms[0], &block);
        for j in 0..3 {
            assert!((m[j] - mean_ref[j]).abs() < 1e-12);
            assert!((v[j] - var_ref[(j, j)].max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_draws_have_no_between_term() {
        let (g, w) = fixture(&TOY);
        let bundle = build_bundle(&g, &w, 2.0, 1e-8).unwrap();
        let chain = chain_from(vec![vec![0.3, 0.8]; 4], vec![vec![0.1, 0.2]; 4], vec![0.5; 4]);
        let post = pixel_posterior(&chain, LatentField::Single(&bundle), &g, &w, &PredictConfig::default()).unwrap();
        let terms = draw_terms(&chain, LatentField::Single(&bundle), &w).unwrap();
        let block = PixelBlock::load(&g, &[0, 1, 2, 3], Some(&bundle)).unwrap();
        let v = conditional_pixel_var(&terms[0], &block);
        for j in 0..4 {
            assert!((post.sd[j] - v[j].sqrt()).abs() < 1e-9, "{j}");
        }
    }

    #[test]
    fn sole_member_collapses_to_chain_moments() {
        let (g, w) = fixture(&TOY);
        let bundle = build_bundle(&g, &w, 2.0, 0.0).unwrap();
        let lam = vec![vec![0.3, 0.8], vec![0.5, 0.1], vec![-0.2, 0.4]];
        let chain = chain_from(lam.clone(), vec![vec![0.1, 0.2]; 3], vec![0.5; 3]);
        let post = pixel_posterior(&chain, LatentField::Single(&bundle), &g, &w, &PredictConfig::default()).unwrap();
        let xs: Vec<f64> = lam.iter().map(|r| r[0]).collect();
        let mu = xs.iter().sum::<f64>() / 3.0;
        let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((post.mean[0] - mu).abs() < 1e-9);
        assert!((post.sd[0] - sd).abs() < 1e-6);
    }

    #[test]
    fn needs_two_draws_and_matching_bundles() {
        let (g, w) = fixture(&TOY);
        let bundle = build_bundle(&g, &w, 2.0, 0.0).unwrap();
        let chain = chain_from(vec![vec![0.3, 0.8]], vec![vec![0.1, 0.2]], vec![0.5]);
        assert!(pixel_posterior(&chain, LatentField::Single(&bundle), &g, &w, &PredictConfig::default()).is_err());
        let other = build_bundle(&g, &w, 3.0, 0.0).unwrap();
        let chain2 = chain_from(vec![vec![0.3, 0.8]; 2], vec![vec![0.1, 0.2]; 2], vec![0.5; 2]);
        let err = draw_terms(&chain2, LatentField::Kernel(std::slice::from_ref(&other)), &w).unwrap_err();
        assert!(err.to_string().contains("missing covariance bundle"));
    }

    #[test]
    fn aggregate_of_constant_field_matches() {
        let (g, w) = fixture(&[(0, 0, 0, 0.0), (0, 1, 0, 0.0), (3, 3, 1, 0.0)]);
        let chain = chain_from(vec![vec![0.7, 0.2], vec![0.7, 0.2]], vec![vec![0.0, 0.0]; 2], vec![0.5; 2]);
        let post = PixelPosterior {
            mean: vec![0.7, 0.7, 0.2],
            sd: vec![0.0; 3],
            meta: PosteriorMeta { draws: 2, seed: 1, phi_grid: vec![], chain_checksum: None },
        };
        let rep = aggregate_check(&post, &w, &chain);
        assert!(rep[0].difference.abs() < 1e-15);
        assert!(rep[1].difference.abs() < 1e-15);

        // hand computation: mean of exp over two different pixel means
        let post2 = PixelPosterior { mean: vec![0.0, 1.0, 0.2], ..post };
        let rep = aggregate_check(&post2, &w, &chain);
        let expected = ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((rep[0].pixel_aggregate - expected).abs() < 1e-15);
        assert!((rep[0].difference - (expected - 0.7)).abs() < 1e-15);
        let _ = g;
    }

    #[test]
    fn pgm_output() {
        let (g, _) = fixture(&TOY);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &g, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n5 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let img = &bytes[header.len()..];
        assert_eq!(img.len(), 10);
        assert_eq!(img[0], 1);
        assert_eq!(img[4], 255);
        assert_eq!(img[1], 0);
        let side = std::fs::read_to_string(dir.path().join("m.pgm.txt")).unwrap();
        assert!(side.starts_with("min=0\nmax=4\n"));
    }
}
