//! Exponential correlation kernel and its ward aggregates.
//!
//! For a range `φ` the correlation between pixels at distance `d` is
//! `exp(-d/φ)`. Ward aggregates average this kernel over member pixels:
//!
//! ```text
//! Σ₀₀[i, k] = |A_i|⁻¹ |A_k|⁻¹ Σ_{l ∈ A_i} Σ_{l' ∈ A_k} exp(-‖s_l − s_l'‖/φ)
//! Σₚ₀[j, i] = |A_i|⁻¹ Σ_{l ∈ A_i} exp(-‖s_j − s_l‖/φ)
//! ```
//!
//! The pixel-to-pixel matrix is never formed; its diagonal is identically one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cache::{self, MatrixWriter, RowReader};
use crate::error::{DisaggError, Result};
use crate::grid::{PixelGrid, WardTable};
use crate::linalg::{self, NeumaierSum};

pub const DEFAULT_JITTER: f64 = 1e-8;

/// Largest `rows × cols` extent for which pairwise correlations are
/// tabulated by integer offset.
const TABLE_LIMIT: usize = 1 << 22;

/// Rows of Σₚ₀ assembled per block before being handed to the sink.
const PIXEL_BLOCK: usize = 2048;

#[inline]
pub fn exp_corr(d: f64, phi: f64) -> f64 {
    (-d / phi).exp()
}

/// Marginal variance and range of the exponential covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    sigma2: f64,
    phi: f64,
}

impl KernelParams {
    pub fn new(sigma2: f64, phi: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite() && phi > 0.0 && phi.is_finite()) {
            return Err(DisaggError::validation(format!(
                "kernel parameters must be positive (sigma2 = {sigma2}, phi = {phi})"
            )));
        }
        Ok(KernelParams { sigma2, phi })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn cov(&self, d: f64) -> f64 {
        self.sigma2 * exp_corr(d, self.phi)
    }
}

/// Support of the discrete prior on φ.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiGrid(Vec<f64>);

impl PhiGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DisaggError::validation("phi grid is empty"));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DisaggError::validation("phi grid values must be positive"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DisaggError::validation("phi grid must be strictly increasing"));
        }
        Ok(PhiGrid(values))
    }

    pub fn single(phi: f64) -> Result<Self> {
        Self::new(vec![phi])
    }

    /// Parses `start:end:step`, a comma list, or a single value.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let bad = || DisaggError::validation(format!("cannot parse phi grid `{spec}`"));
        if spec.contains(':') {
            let parts: Vec<f64> = spec
                .split(':')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let [start, end, step] = parts[..] else {
                return Err(bad());
            };
            if !(step > 0.0) || end < start {
                return Err(bad());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            // round to 12 decimals so that e.g. 0.1 steps print cleanly
            let values = (0..n)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect();
            Self::new(values)
        } else {
            let values = spec
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Self::new(values)
        }
    }

    /// The grid used for the Bangalore analysis: 2.5, 2.75, …, 17.5.
    pub fn default_grid() -> Self {
        Self::new((0..61).map(|k| 2.5 + 0.25 * k as f64).collect()).unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn median_index(&self) -> usize {
        (self.0.len() - 1) / 2
    }

    pub fn index_of(&self, phi: f64) -> Option<usize> {
        self.0.iter().position(|v| v.to_bits() == phi.to_bits())
    }
}

/// Correlation between two grid pixels given their integer offset.
struct CorrKernel {
    phi: f64,
    side: f64,
    table: Option<(Vec<f64>, usize)>,
}

impl CorrKernel {
    fn new(grid: &PixelGrid, phi: f64) -> Self {
        let (_, _, nr, nc) = grid.extent();
        let side = grid.pixel_side();
        let table = (nr.saturating_mul(nc) <= TABLE_LIMIT).then(|| {
            let mut t = vec![0.0; nr * nc];
            for dr in 0..nr {
                for dc in 0..nc {
                    t[dr * nc + dc] = Self::eval(side, phi, dr as i64, dc as i64);
                }
            }
            (t, nc)
        });
        CorrKernel { phi, side, table }
    }

    #[inline]
    fn eval(side: f64, phi: f64, dr: i64, dc: i64) -> f64 {
        let d = side * ((dr * dr + dc * dc) as f64).sqrt();
        exp_corr(d, phi)
    }

    #[inline]
    fn corr(&self, dr: i64, dc: i64) -> f64 {
        match &self.table {
            Some((t, nc)) => t[dr.unsigned_abs() as usize * nc + dc.unsigned_abs() as usize],
            None => Self::eval(self.side, self.phi, dr, dc),
        }
    }
}

fn positions(grid: &PixelGrid) -> Vec<(i64, i64)> {
    grid.pixels().iter().map(|p| (p.row, p.col)).collect()
}

/// Ward-to-ward aggregated correlation matrix (without jitter).
///
/// Each unordered pair is computed once with compensated summation and
/// mirrored, so the result is exactly symmetric and independent of the
/// thread schedule.
pub fn build_sigma00(grid: &PixelGrid, wards: &WardTable, phi: f64) -> DMatrix<f64> {
    let kernel = CorrKernel::new(grid, phi);
    let pos = positions(grid);
    let l = wards.len();
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i..l).map(move |k| (i, k))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, k)| {
            let (a, b) = (wards.members(i), wards.members(k));
            let mut acc = NeumaierSum::default();
            for &p in a {
                let (r, c) = pos[p];
                let mut inner = NeumaierSum::default();
                for &q in b {
                    let (r2, c2) = pos[q];
                    inner.add(kernel.corr(r - r2, c - c2));
                }
                acc.add(inner.value());
            }
            acc.value() / (a.len() as f64 * b.len() as f64)
        })
        .collect();
    let mut m = DMatrix::zeros(l, l);
    for (&(i, k), v) in pairs.iter().zip(values) {
        m[(i, k)] = v;
        m[(k, i)] = v;
    }
    m
}

/// Receives Σₚ₀ row blocks in pixel-id order.
pub trait RowSink {
    fn push_rows(&mut self, rows: &[f64]) -> Result<()>;
}

impl RowSink for Vec<f64> {
    fn push_rows(&mut self, rows: &[f64]) -> Result<()> {
        self.extend_from_slice(rows);
        Ok(())
    }
}

impl RowSink for MatrixWriter {
    fn push_rows(&mut self, rows: &[f64]) -> Result<()> {
        MatrixWriter::push_rows(self, rows)
    }
}

/// Streams the `P × L` pixel-to-ward correlation matrix into `sink`,
/// assembling contiguous pixel blocks in parallel.
pub fn build_sigma_p0(
    grid: &PixelGrid,
    wards: &WardTable,
    phi: f64,
    sink: &mut dyn RowSink,
) -> Result<()> {
    let kernel = CorrKernel::new(grid, phi);
    let pos = positions(grid);
    let l = wards.len();
    let p = grid.len();
    let mut block = vec![0.0; PIXEL_BLOCK.min(p) * l];
    for start in (0..p).step_by(PIXEL_BLOCK) {
        let end = (start + PIXEL_BLOCK).min(p);
        let buf = &mut block[..(end - start) * l];
        buf.par_chunks_mut(l).enumerate().for_each(|(off, row)| {
            let (r, c) = pos[start + off];
            for (i, out) in row.iter_mut().enumerate() {
                let members = wards.members(i);
                let mut acc = NeumaierSum::default();
                for &q in members {
                    let (r2, c2) = pos[q];
                    acc.add(kernel.corr(r - r2, c - c2));
                }
                *out = acc.value() / members.len() as f64;
            }
        });
        sink.push_rows(buf)?;
    }
    Ok(())
}

/// Pixel-to-ward cross-correlation store, in memory or backed by a cache
/// file.
#[derive(Clone, Debug)]
pub enum CrossCov {
    Memory {
        rows: usize,
        cols: usize,
        data: Arc<Vec<f64>>,
    },
    File(Arc<RowReader>),
    /// Row `j` is zero except `value[ward[j]]` in column `ward[j]`.
    Membership {
        ward: Arc<Vec<usize>>,
        value: Arc<Vec<f64>>,
    },
}

impl CrossCov {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DisaggError::validation(format!(
                "cross-covariance has {} values, expected {rows}×{cols}",
                data.len()
            )));
        }
        Ok(CrossCov::Memory {
            rows,
            cols,
            data: Arc::new(data),
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            CrossCov::Memory { rows, .. } => *rows,
            CrossCov::File(r) => r.rows(),
            CrossCov::Membership { ward, .. } => ward.len(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            CrossCov::Memory { cols, .. } => *cols,
            CrossCov::File(r) => r.cols(),
            CrossCov::Membership { value, .. } => value.len(),
        }
    }

    pub fn is_file_backed(&self) -> bool {
        matches!(self, CrossCov::File(_))
    }

    /// Copies row `j` into `out`. `scratch` is reused across calls for file
    /// reads.
    pub fn read_row(&self, j: usize, out: &mut [f64], scratch: &mut Vec<u8>) -> Result<()> {
        match self {
            CrossCov::Memory { cols, data, .. } => {
                out.copy_from_slice(&data[j * cols..(j + 1) * cols]);
                Ok(())
            }
            CrossCov::File(r) => r.read_row(j, out, scratch),
            CrossCov::Membership { ward, value } => {
                out.fill(0.0);
                out[ward[j]] = value[ward[j]];
                Ok(())
            }
        }
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut m = DMatrix::zeros(rows, cols);
        let mut row = vec![0.0; cols];
        let mut scratch = Vec::new();
        for j in 0..rows {
            self.read_row(j, &mut row, &mut scratch)?;
            for (i, v) in row.iter().enumerate() {
                m[(j, i)] = *v;
            }
        }
        Ok(m)
    }
}

/// Everything the sampler and predictor need for one value of φ.
#[derive(Clone, Debug)]
pub struct CovarianceBundle {
    pub phi: f64,
    jitter: f64,
    sigma00: DMatrix<f64>,
    chol00: DMatrix<f64>,
    inv00: DMatrix<f64>,
    logdet00: f64,
    sigma_p0: CrossCov,
}

impl CovarianceBundle {
    /// Factorises `sigma00 + jitter·I`.
    pub fn from_parts(phi: f64, sigma00: DMatrix<f64>, jitter: f64, sigma_p0: CrossCov) -> Result<Self> {
        let l = sigma00.nrows();
        if sigma00.ncols() != l || sigma_p0.cols() != l {
            return Err(DisaggError::validation("bundle matrices have inconsistent shapes"));
        }
        let mut m = sigma00.clone();
        for i in 0..l {
            m[(i, i)] += jitter;
        }
        let chol00 = linalg::cholesky_lower(&m).ok_or_else(|| {
            DisaggError::numerical(format!(
                "Cholesky of Σ₀₀ failed for phi = {phi} even with jitter {jitter}"
            ))
        })?;
        Ok(Self::with_factor(phi, sigma00, chol00, jitter, sigma_p0))
    }

    fn with_factor(
        phi: f64,
        sigma00: DMatrix<f64>,
        chol00: DMatrix<f64>,
        jitter: f64,
        sigma_p0: CrossCov,
    ) -> Self {
        let logdet00 = linalg::log_det_from_lower(&chol00);
        let inv00 = linalg::chol_inverse(&chol00);
        CovarianceBundle {
            phi,
            jitter,
            sigma00,
            chol00,
            inv00,
            logdet00,
            sigma_p0,
        }
    }

    pub fn n_wards(&self) -> usize {
        self.sigma00.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sigma00(&self) -> &DMatrix<f64> {
        &self.sigma00
    }

    /// Lower Cholesky factor of `Σ₀₀ + jitter·I`.
    pub fn chol00(&self) -> &DMatrix<f64> {
        &self.chol00
    }

    /// `(Σ₀₀ + jitter·I)⁻¹`.
    pub fn inv00(&self) -> &DMatrix<f64> {
        &self.inv00
    }

    pub fn logdet00(&self) -> f64 {
        self.logdet00
    }

    pub fn sigma_p0(&self) -> &CrossCov {
        &self.sigma_p0
    }

    /// `Σ₀₀⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        linalg::chol_solve(&self.chol00, v)
    }

    /// `vᵀ Σ₀₀⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        linalg::solve_lower(&self.chol00, v).norm_squared()
    }
}

/// Builds a bundle with Σₚ₀ held in memory, bypassing the cache.
pub fn build_bundle(grid: &PixelGrid, wards: &WardTable, phi: f64, jitter: f64) -> Result<CovarianceBundle> {
    let sigma00 = build_sigma00(grid, wards, phi);
    let mut data = Vec::with_capacity(grid.len() * wards.len());
    build_sigma_p0(grid, wards, phi, &mut data)?;
    let sp0 = CrossCov::from_row_major(grid.len(), wards.len(), data)?;
    CovarianceBundle::from_parts(phi, sigma00, jitter, sp0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Fingerprint of everything a cached bundle depends on besides φ.
pub fn cache_key(grid: &PixelGrid, wards: &WardTable, jitter: f64) -> String {
    let mut h = Sha256::new();
    h.update(b"disagg-cov-v1");
    h.update(grid.pixel_side().to_le_bytes());
    h.update(jitter.to_le_bytes());
    h.update((grid.len() as u64).to_le_bytes());
    h.update((wards.len() as u64).to_le_bytes());
    for (j, p) in grid.pixels().iter().enumerate() {
        h.update(p.row.to_le_bytes());
        h.update(p.col.to_le_bytes());
        h.update((grid.ward_of(j) as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub const INDEX_FILE: &str = "cache_index.txt";

/// Plain-text record of what a cache directory holds.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheIndex {
    pub key: String,
    pub jitter: f64,
    pub phi_grid: PhiGrid,
}

impl CacheIndex {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(INDEX_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(DisaggError::io(&path, e)),
        };
        let (mut key, mut jitter, mut phi) = (None, None, None);
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "key" => key = Some(v.trim().to_string()),
                    "jitter" => jitter = v.trim().parse::<f64>().ok(),
                    "phi" => phi = Some(PhiGrid::parse(v)?),
                    _ => {}
                }
            }
        }
        match (key, jitter, phi) {
            (Some(key), Some(jitter), Some(phi_grid)) => Ok(Some(CacheIndex { key, jitter, phi_grid })),
            _ => Err(DisaggError::parse(&path, "incomplete cache index")),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = String::new();
        let phis: Vec<String> = self.phi_grid.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "key={}", self.key);
        let _ = writeln!(s, "jitter={}", self.jitter);
        let _ = writeln!(s, "phi={}", phis.join(","));
        let path = dir.join(INDEX_FILE);
        let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, s).map_err(|e| DisaggError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| DisaggError::io(&path, e))
    }
}

struct BundlePaths {
    sigma00: PathBuf,
    chol00: PathBuf,
    sigma_p0: PathBuf,
}

fn bundle_paths(dir: &Path, phi: f64) -> BundlePaths {
    BundlePaths {
        sigma00: dir.join(cache::file_name("sigma00", phi)),
        chol00: dir.join(cache::file_name("chol00", phi)),
        sigma_p0: dir.join(cache::file_name("sigmap0", phi)),
    }
}

fn square_from_row_major(l: usize, v: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(l, l, &v)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn try_load(
    paths: &BundlePaths,
    phi: f64,
    l: usize,
    p: usize,
    jitter: f64,
) -> Result<Option<CovarianceBundle>> {
    let Some(s00) = cache::read_matrix(&paths.sigma00, l, l, phi) else {
        return Ok(None);
    };
    let Some(c00) = cache::read_matrix(&paths.chol00, l, l, phi) else {
        return Ok(None);
    };
    if cache::verify(&paths.sigma_p0, p, l, phi).is_none() {
        return Ok(None);
    }
    let reader = RowReader::open(&paths.sigma_p0, p, l)?;
    Ok(Some(CovarianceBundle::with_factor(
        phi,
        square_from_row_major(l, s00),
        square_from_row_major(l, c00),
        jitter,
        CrossCov::File(Arc::new(reader)),
    )))
}

fn compute_and_store(
    grid: &PixelGrid,
    wards: &WardTable,
    paths: &BundlePaths,
    phi: f64,
    jitter: f64,
) -> Result<CovarianceBundle> {
    let (l, p) = (wards.len(), grid.len());
    let sigma00 = build_sigma00(grid, wards, phi);
    let unstored = CrossCov::from_row_major(0, l, Vec::new())?;
    let bundle = CovarianceBundle::from_parts(phi, sigma00, jitter, unstored)?;

    let mut writer = MatrixWriter::create(&paths.sigma_p0, p, l, phi)?;
    build_sigma_p0(grid, wards, phi, &mut writer)?;
    writer.finish()?;
    cache::write_matrix(&paths.sigma00, l, l, phi, &row_major(bundle.sigma00()))?;
    cache::write_matrix(&paths.chol00, l, l, phi, &row_major(bundle.chol00()))?;

    let reader = RowReader::open(&paths.sigma_p0, p, l)?;
    Ok(CovarianceBundle {
        sigma_p0: CrossCov::File(Arc::new(reader)),
        ..bundle
    })
}

/// Loads or computes the bundle for every φ in `phi_grid`, persisting new
/// results under `cache_dir`. Files whose header, checksum or grid
/// fingerprint do not match are recomputed.
pub fn prepare_bundles(
    grid: &PixelGrid,
    wards: &WardTable,
    phi_grid: &PhiGrid,
    cache_dir: &Path,
    jitter: f64,
) -> Result<(Vec<CovarianceBundle>, CacheStats)> {
    fs::create_dir_all(cache_dir).map_err(|e| DisaggError::io(cache_dir, e))?;
    let key = cache_key(grid, wards, jitter);
    let fresh = match CacheIndex::read(cache_dir) {
        Ok(Some(idx)) => idx.key == key,
        _ => false,
    };
    let mut stats = CacheStats::default();
    let mut bundles = Vec::with_capacity(phi_grid.len());
    for &phi in phi_grid.values() {
        let paths = bundle_paths(cache_dir, phi);
        let loaded = if fresh {
            try_load(&paths, phi, wards.len(), grid.len(), jitter)?
        } else {
            None
        };
        let bundle = match loaded {
            Some(b) => {
                stats.hits += 1;
                b
            }
            None => {
                stats.misses += 1;
                compute_and_store(grid, wards, &paths, phi, jitter)?
            }
        };
        bundles.push(bundle);
    }
    let mut covered: Vec<f64> = phi_grid.values().to_vec();
    if fresh {
        if let Ok(Some(idx)) = CacheIndex::read(cache_dir) {
            covered.extend_from_slice(idx.phi_grid.values());
        }
    }
    covered.sort_by(f64::total_cmp);
    covered.dedup_by(|a, b| a.to_bits() == b.to_bits());
    CacheIndex {
        key,
        jitter,
        phi_grid: PhiGrid::new(covered)?,
    }
    .write(cache_dir)?;
    Ok((bundles, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble, Pixel};
    use std::f64::consts::SQRT_2;

    pub(crate) fn grid_from(cells: &[(i64, i64, i64)]) -> (PixelGrid, WardTable) {
        let rows = cells
            .iter()
            .enumerate()
            .map(|(j, &(r, c, w))| (Pixel { pixel_id: j, row: r, col: c, ward_id: w }, vec![]))
            .collect();
        let mut ids: Vec<i64> = cells.iter().map(|c| c.2).collect();
        ids.sort();
        ids.dedup();
        let pops: Vec<(i64, u64)> = ids.into_iter().map(|i| (i, 10)).collect();
        assemble(rows, vec![], &pops, 1.0).unwrap()
    }

    #[test]
    fn exp_corr_identities() {
        assert_eq!(exp_corr(0.0, 3.7), 1.0);
        assert!((exp_corr(2.0, 2.0) - 0.367879441171).abs() < 1e-12);
        assert!((exp_corr(10.0, 10.0) - 0.367879441171).abs() < 1e-12);
        assert!(KernelParams::new(0.0, 1.0).is_err());
        assert!((KernelParams::new(2.0, 1.0).unwrap().cov(1.0) - 2.0 / std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn phi_grid_parsing() {
        let g = PhiGrid::parse("2.5:17.5:0.25").unwrap();
        assert_eq!(g.len(), 61);
        assert_eq!(g.values()[1], 2.75);
        assert_eq!(g.values()[60], 17.5);
        assert_eq!(g, PhiGrid::default_grid());
        assert_eq!(g.values()[g.median_index()], 10.0);
        assert_eq!(PhiGrid::parse("10").unwrap().values(), &[10.0]);
        assert_eq!(PhiGrid::parse("1, 3,5").unwrap().len(), 3);
        assert!(PhiGrid::parse("3,1").is_err());
        assert!(PhiGrid::parse("").is_err());
        assert!(PhiGrid::new(vec![]).is_err());
    }

    #[test]
    fn single_pixel_wards() {
        let (g, w) = grid_from(&[(0, 0, 0), (3, 4, 1)]);
        let s = build_sigma00(&g, &w, 2.0);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(1, 1)], 1.0);
        assert!((s[(0, 1)] - (-2.5f64).exp()).abs() < 1e-15);
        let b = build_bundle(&g, &w, 2.0, 0.0).unwrap();
        let p0 = b.sigma_p0().to_dense().unwrap();
        assert_eq!(p0[(0, 0)], 1.0);
        assert!((p0[(1, 0)] - (-2.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn two_pixel_ward_double_sum() {
        // ward A = {(0,0),(0,1)}, ward B = {(1,0)}, φ = 1
        let (g, w) = grid_from(&[(0, 0, 0), (0, 1, 0), (1, 0, 1)]);
        let s = build_sigma00(&g, &w, 1.0);
        let expected = ((-1.0f64).exp() + (-SQRT_2).exp()) / 2.0;
        assert!((s[(0, 1)] - expected).abs() < 1e-15);
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        assert!((s[(0, 0)] - (2.0 + 2.0 * (-1.0f64).exp()) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn coincident_member_pixels_give_unit_diagonal() {
        let (g, w) = grid_from(&[(2, 2, 0), (2, 2, 0), (2, 2, 0), (9, 9, 1)]);
        let s = build_sigma00(&g, &w, 4.0);
        assert_eq!(s[(0, 0)], 1.0);
    }

    #[test]
    fn equidistant_pixel_from_two_pixel_ward() {
        let (g, w) = grid_from(&[(0, 0, 0), (0, 2, 0), (3, 1, 1)]);
        let b = build_bundle(&g, &w, 1.5, 0.0).unwrap();
        let p0 = b.sigma_p0().to_dense().unwrap();
        let d = 10f64.sqrt();
        assert!((p0[(2, 0)] - exp_corr(d, 1.5)).abs() < 1e-15);
    }

    fn blocks(n: i64, bs: i64) -> (PixelGrid, WardTable) {
        let mut cells = Vec::new();
        for r in 0..n {
            for c in 0..n {
                cells.push((r, c, (r / bs) * (n / bs) + c / bs));
            }
        }
        grid_from(&cells)
    }

    #[test]
    fn entries_shrink_with_phi_and_stay_symmetric() {
        let (g, w) = blocks(6, 3);
        let small = build_sigma00(&g, &w, 1.0);
        let large = build_sigma00(&g, &w, 5.0);
        assert_eq!((&small - small.transpose()).amax(), 0.0);
        for i in 0..w.len() {
            assert!(small[(i, i)] > 0.0 && small[(i, i)] <= 1.0);
            for k in 0..w.len() {
                if i != k {
                    assert!(small[(i, k)] < large[(i, k)]);
                }
            }
        }
        let b = build_bundle(&g, &w, 3.0, DEFAULT_JITTER).unwrap();
        let p0 = b.sigma_p0().to_dense().unwrap();
        for j in 0..g.len() {
            let own = g.ward_of(j);
            for i in 0..w.len() {
                assert!(p0[(j, i)] > 0.0 && p0[(j, i)] <= 1.0);
                assert!(p0[(j, own)] >= p0[(j, i)]);
            }
        }
    }

    #[test]
    fn table_and_direct_kernel_agree_bitwise() {
        let (g, _) = blocks(5, 5);
        let k = CorrKernel::new(&g, 2.3);
        assert!(k.table.is_some());
        for dr in -4..=4 {
            for dc in -4..=4 {
                assert_eq!(k.corr(dr, dc).to_bits(), CorrKernel::eval(1.0, 2.3, dr, dc).to_bits());
            }
        }
    }

    #[test]
    fn bundle_factorisation() {
        let (g, w) = blocks(6, 2);
        let b = build_bundle(&g, &w, 2.0, DEFAULT_JITTER).unwrap();
        let mut m = b.sigma00().clone();
        for i in 0..w.len() {
            m[(i, i)] += DEFAULT_JITTER;
        }
        let v = DVector::from_fn(w.len(), |i, _| (i as f64).sin());
        let x = b.solve(&v);
        assert!((&m * &x - &v).norm() < 1e-9);
        assert!((b.quad_form(&v) - v.dot(&x)).abs() < 1e-9 * v.dot(&x).abs());
        assert!((b.logdet00() - m.clone().determinant().ln()).abs() < 1e-8);
        assert!((&m * b.inv00() - DMatrix::identity(w.len(), w.len())).amax() < 1e-8);
    }

    #[test]
    fn non_pd_is_numerical_error_naming_phi() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let sp = CrossCov::from_row_major(0, 2, vec![]).unwrap();
        let err = CovarianceBundle::from_parts(7.25, s, 1e-8, sp).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("7.25"));
    }

    #[test]
    fn cache_cold_warm_and_corrupt() {
        let (g, w) = blocks(6, 3);
        let dir = tempfile::tempdir().unwrap();
        let phis = PhiGrid::new(vec![2.0, 4.5]).unwrap();
        let (cold, s1) = prepare_bundles(&g, &w, &phis, dir.path(), DEFAULT_JITTER).unwrap();
        assert_eq!(s1, CacheStats { hits: 0, misses: 2 });
        assert!(dir.path().join("sigma00_phi4.5.bin").exists());
        assert!(dir.path().join("sigmap0_phi2.bin").exists());

        let direct = build_bundle(&g, &w, 2.0, DEFAULT_JITTER).unwrap();
        assert_eq!(cold[0].sigma00(), direct.sigma00());
        assert_eq!(cold[0].sigma_p0().to_dense().unwrap(), direct.sigma_p0().to_dense().unwrap());

        let (warm, s2) = prepare_bundles(&g, &w, &phis, dir.path(), DEFAULT_JITTER).unwrap();
        assert_eq!(s2, CacheStats { hits: 2, misses: 0 });
        for (a, b) in cold.iter().zip(&warm) {
            assert_eq!(a.sigma00(), b.sigma00());
            assert_eq!(a.chol00(), b.chol00());
            assert_eq!(a.logdet00().to_bits(), b.logdet00().to_bits());
            assert_eq!(a.sigma_p0().to_dense().unwrap(), b.sigma_p0().to_dense().unwrap());
        }

        // the open readers share the inode that is corrupted in place below
        let expected = cold[1].sigma_p0().to_dense().unwrap();
        let victim = dir.path().join("sigmap0_phi4.5.bin");
        let mut bytes = fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        fs::write(&victim, bytes).unwrap();
        let (again, s3) = prepare_bundles(&g, &w, &phis, dir.path(), DEFAULT_JITTER).unwrap();
        assert_eq!(s3, CacheStats { hits: 1, misses: 1 });
        assert_eq!(again[1].sigma_p0().to_dense().unwrap(), expected);

        // a different jitter invalidates the whole directory
        let (_, s4) = prepare_bundles(&g, &w, &phis, dir.path(), 1e-6).unwrap();
        assert_eq!(s4.misses, 2);
        let idx = CacheIndex::read(dir.path()).unwrap().unwrap();
        assert_eq!(idx.jitter, 1e-6);
    }
}
