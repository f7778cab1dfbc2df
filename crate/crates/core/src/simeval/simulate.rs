//! Synthetic populations on rectangular grids.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{DisaggError, Result};
use crate::grid::{assemble, Pixel, PixelGrid, WardTable};
use crate::format::sig9;
use crate::kernel::CovarianceBundle;
use crate::linalg;
use crate::rng::{self, Rng};

/// Coefficients used when none are supplied: intercept, smooth, binary,
/// count-like.
pub const DEFAULT_BETA: [f64; 4] = [2.0, 0.3, -0.25, 0.05];

/// Largest log-intensity accepted before sampling counts.
const MAX_LOG_INTENSITY: f64 = 600.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimKind {
    S1,
    S2,
    S3,
    Custom(f64),
}

impl SimKind {
    pub fn amplitude(self) -> f64 {
        match self {
            SimKind::S1 => 0.0,
            SimKind::S2 => 0.05,
            SimKind::S3 => 0.1,
            SimKind::Custom(a) => a,
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimKind::S1 => write!(f, "S1"),
            SimKind::S2 => write!(f, "S2"),
            SimKind::S3 => write!(f, "S3"),
            SimKind::Custom(a) => write!(f, "custom:{a}"),
        }
    }
}

impl FromStr for SimKind {
    type Err = DisaggError;

    /// `s1`, `s2`, `s3` or `custom:<amplitude>`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "s1" => Ok(SimKind::S1),
            "s2" => Ok(SimKind::S2),
            "s3" => Ok(SimKind::S3),
            _ => t
                .strip_prefix("custom:")
                .and_then(|a| a.parse::<f64>().ok())
                .filter(|a| a.is_finite())
                .map(SimKind::Custom)
                .ok_or_else(|| DisaggError::validation(format!("unknown setting `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSetting {
    pub kind: SimKind,
    pub beta_true: Vec<f64>,
    pub seed: u64,
}

impl SimSetting {
    pub fn amplitude(&self) -> f64 {
        self.kind.amplitude()
    }
}

/// `a·sin(2πs₁*) + a·cos(2πs₂*)` with rows and columns scaled by their
/// maxima over the grid.
pub fn surface(amplitude: f64, grid: &PixelGrid) -> Vec<f64> {
    let max_row = grid.pixels().iter().map(|p| p.row).max().unwrap_or(0);
    let max_col = grid.pixels().iter().map(|p| p.col).max().unwrap_or(0);
    let scale = |v: i64, m: i64| if m > 0 { v as f64 / m as f64 } else { 0.0 };
    grid.pixels()
        .iter()
        .map(|p| {
            let s1 = scale(p.row, max_row);
            let s2 = scale(p.col, max_col);
            amplitude * (2.0 * PI * s1).sin() + amplitude * (2.0 * PI * s2).cos()
        })
        .collect()
}

/// Pixel log-intensities `X(s)ᵀβ + surface(s)`.
pub fn true_log_intensity(setting: &SimSetting, grid: &PixelGrid) -> Result<Vec<f64>> {
    let x = grid.covariates();
    if setting.beta_true.len() != x.ncols() {
        return Err(DisaggError::validation(format!(
            "beta_true has {} entries, the grid has {} coefficients",
            setting.beta_true.len(),
            x.ncols()
        )));
    }
    let beta = DVector::from_column_slice(&setting.beta_true);
    let xb = x * beta;
    let surf = surface(setting.amplitude(), grid);
    let out: Vec<f64> = xb.iter().zip(&surf).map(|(a, b)| a + b).collect();
    if let Some(v) = out.iter().find(|v| !(v.abs() <= MAX_LOG_INTENSITY)) {
        return Err(DisaggError::numerical(format!(
            "log-intensity {v} would overflow the count generator"
        )));
    }
    Ok(out)
}

/// Draws `Y_i ~ Poisson(Σ_{j∈A_i} exp(λ*_j))`.
pub fn draw_counts(log_intensity: &[f64], wards: &WardTable, rng: &mut Rng) -> Result<Vec<u64>> {
    (0..wards.len())
        .map(|i| {
            let mean: f64 = wards.members(i).iter().map(|&j| log_intensity[j].exp()).sum();
            poisson(mean, rng)
        })
        .collect()
}

fn poisson(mean: f64, rng: &mut Rng) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean)
        .map_err(|e| DisaggError::numerical(format!("invalid Poisson mean {mean}: {e}")))?;
    Ok(d.sample(rng) as u64)
}

/// Truth and ward counts for one replicate.
pub fn simulate(setting: &SimSetting, grid: &PixelGrid, wards: &WardTable, rng: &mut Rng) -> Result<(Vec<f64>, Vec<u64>)> {
    let truth = true_log_intensity(setting, grid)?;
    let y = draw_counts(&truth, wards, rng)?;
    Ok((truth, y))
}

/// Draws counts from the ward-level hierarchical model:
/// `λ* ~ N(X̃β, σ²Σ₀₀)`, `Y_i ~ Poisson(|A_i| exp(λ*_i))`.
pub fn simulate_from_model(
    wards: &WardTable,
    beta: &[f64],
    sigma2: f64,
    bundle: &CovarianceBundle,
    rng: &mut Rng,
) -> Result<Vec<u64>> {
    let x = wards.x_tilde();
    let mu = x * DVector::from_column_slice(beta);
    let z = DVector::from_fn(wards.len(), |_, _| StandardNormal.sample(rng));
    let lam = mu + bundle.chol00() * z * sigma2.sqrt();
    let sizes = wards.pixel_counts();
    (0..wards.len())
        .map(|i| poisson(sizes[i] as f64 * lam[i].exp(), rng))
        .collect()
}

/// Marginal mean and variance of `Y_i` under the ward-level model with
/// `λ*_i ~ N(μ_i, σ²s_ii)`: lognormal–Poisson moments.
pub fn marginal_moments(size: f64, mu: f64, sigma2: f64, s_ii: f64) -> (f64, f64) {
    let psi = 0.5 * sigma2 * s_ii;
    let mean = size * (mu + psi).exp();
    let var = mean * mean * ((2.0 * psi).exp() - 1.0) + mean;
    (mean, var)
}

/// Ward layout `<rows>x<cols>` of rectangular blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Tiling {
    pub fn n_wards(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Ward of a cell: rows and columns are split into near-equal bands.
    pub fn ward_of(&self, r: usize, c: usize, rows: usize, cols: usize) -> usize {
        let br = r * self.block_rows / rows;
        let bc = c * self.block_cols / cols;
        br * self.block_cols + bc
    }
}

impl FromStr for Tiling {
    type Err = DisaggError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DisaggError::validation(format!("ward tiling must look like `5x4`, got `{s}`"));
        let (a, b) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let block_rows: usize = a.trim().parse().map_err(|_| bad())?;
        let block_cols: usize = b.trim().parse().map_err(|_| bad())?;
        if block_rows == 0 || block_cols == 0 {
            return Err(bad());
        }
        Ok(Tiling { block_rows, block_cols })
    }
}

impl fmt::Display for Tiling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.block_rows, self.block_cols)
    }
}

/// Sum of random plane waves with wavelengths in `[0.3, 1.5]` times the
/// longer grid side, standardised to mean 0 and variance 1.
fn smooth_field(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    const WAVES: usize = 12;
    let side = rows.max(cols) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let wavelength = side * (0.3 + 1.2 * rng.random::<f64>());
            let phase = rng.random::<f64>() * 2.0 * PI;
            let amp: f64 = StandardNormal.sample(rng);
            (angle, wavelength, phase, amp)
        })
        .collect();
    let mut f = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = waves
                .iter()
                .map(|&(a, wl, ph, amp)| {
                    amp * (2.0 * PI * (r as f64 * a.cos() + c as f64 * a.sin()) / wl + ph).cos()
                })
                .sum();
            f.push(v);
        }
    }
    standardize(&mut f);
    f
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    for x in v.iter_mut() {
        *x -= mean;
        if sd > 0.0 {
            *x /= sd;
        }
    }
}

pub const SYNTHETIC_COVARIATES: [&str; 3] = ["smooth", "binary", "count"];

/// Rectangular grid with three synthetic covariates (a smooth field, a
/// thresholded field and a standardised log-count) and tiled wards. All
/// populations are set to zero.
pub fn synthetic_grid(rows: usize, cols: usize, tiling: Tiling, seed: u64) -> Result<(PixelGrid, WardTable)> {
    if rows < tiling.block_rows || cols < tiling.block_cols {
        return Err(DisaggError::validation(format!(
            "a {rows}x{cols} grid cannot hold {tiling} wards"
        )));
    }
    let mut r = rng::stream(seed, &[0x636f76]);
    let smooth = smooth_field(rows, cols, &mut r);
    let binary: Vec<f64> = smooth_field(rows, cols, &mut r)
        .into_iter()
        .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let base = smooth_field(rows, cols, &mut r);
    let mut count = Vec::with_capacity(rows * cols);
    for v in &base {
        count.push(((poisson((1.0 + 0.5 * v).exp(), &mut r)? as f64) + 1.0).ln());
    }
    standardize(&mut count);

    let mut pixels = Vec::with_capacity(rows * cols);
    for rr in 0..rows {
        for cc in 0..cols {
            let j = rr * cols + cc;
            let ward = tiling.ward_of(rr, cc, rows, cols) as i64;
            pixels.push((
                Pixel { pixel_id: j, row: rr as i64, col: cc as i64, ward_id: ward },
                vec![smooth[j], binary[j], count[j]],
            ));
        }
    }
    let pops: Vec<(i64, u64)> = (0..tiling.n_wards() as i64).map(|i| (i, 0)).collect();
    let names = SYNTHETIC_COVARIATES.iter().map(|s| s.to_string()).collect();
    assemble(pixels, names, &pops, 1.0)
}

/// `pixel_id,log_intensity`, one row per pixel in id order.
pub fn write_truth(path: &Path, truth: &[f64]) -> Result<()> {
    let io = |e| DisaggError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "pixel_id,log_intensity").map_err(io)?;
    for (j, v) in truth.iter().enumerate() {
        writeln!(w, "{j},{}", sig9(*v)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a truth file written by [`write_truth`]; every id in `0..n_pixels`
/// must appear.
pub fn read_truth(path: &Path, n_pixels: usize) -> Result<Vec<f64>> {
    let perr = |m: String| DisaggError::parse(path, m);
    let mut rdr = csv::Reader::from_path(path).map_err(|e| perr(e.to_string()))?;
    let header = rdr.headers().map_err(|e| perr(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["pixel_id", "log_intensity"] {
        return Err(perr("expected header pixel_id,log_intensity".into()));
    }
    let mut out = vec![f64::NAN; n_pixels];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let j: usize = rec[0].trim().parse().map_err(|_| perr(format!("bad pixel id {:?}", &rec[0])))?;
        let v: f64 = rec[1].trim().parse().map_err(|_| perr(format!("bad value {:?}", &rec[1])))?;
        if j >= n_pixels {
            return Err(perr(format!("pixel id {j} out of range")));
        }
        out[j] = v;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(perr("truth file does not cover every pixel".into()));
    }
    Ok(out)
}

/// OLS residuals of `λ̂*` on `X̃`.
pub fn ward_residuals(wards: &WardTable, pseudo_count: Option<f64>) -> Result<Vec<f64>> {
    let lik = crate::grid::empirical_log_intensity(wards, pseudo_count)?;
    let x = wards.x_tilde();
    let beta = linalg::least_squares(&x, &lik.lambda_hat)?;
    Ok((lik.lambda_hat - x * beta).iter().copied().collect())
}
