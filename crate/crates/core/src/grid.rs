//! Spatial data model: pixels, wards, covariates and the ward-level aggregates
//! derived from them.
//!
//! Pixels carry integer `(row, col)` positions; distances are Euclidean in
//! these coordinates scaled by [`PixelGrid::pixel_side`]. Every pixel belongs
//! to exactly one ward, and ward quantities (pixel counts and averaged
//! covariates) are always recomputed from the pixel map rather than read from
//! input.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{DisaggError, Result};

const PIXEL_HEADER: [&str; 4] = ["pixel_id", "row", "col", "ward_id"];
const WARD_HEADER: [&str; 2] = ["ward_id", "population"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pixel {
    pub pixel_id: usize,
    pub row: i64,
    pub col: i64,
    pub ward_id: i64,
}

/// Pixel locations, covariates (with a leading intercept column) and ward
/// membership.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pixels: Vec<Pixel>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    ward_index: Vec<usize>,
    pixel_side: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ward {
    pub ward_id: i64,
    pub population: u64,
    pub pixel_count: usize,
    /// Mean of member-pixel covariate vectors, intercept included.
    pub x_bar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WardTable {
    wards: Vec<Ward>,
    members: Vec<Vec<usize>>,
}

/// Empirical ward log-intensities and the matching Fisher information.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalLogIntensity {
    pub lambda_hat: DVector<f64>,
    pub precision: DVector<f64>,
}

/// Per-covariate transforms applied at load time, in this order: `log(1+x)`
/// for the named columns, then optional z-scoring of every covariate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CovariateTransform {
    pub log1p: Vec<String>,
    pub standardize: bool,
}

impl PixelGrid {
    /// Builds a grid from pixels and raw covariate rows (without intercept).
    ///
    /// Pixels may arrive in any order; they are sorted by id and must cover
    /// `0..P` exactly once. `ward_index` is filled in when the grid is paired
    /// with a ward table (see [`assemble`]).
    fn from_rows(
        mut rows: Vec<(Pixel, Vec<f64>)>,
        covariate_names: Vec<String>,
        pixel_side: f64,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(DisaggError::validation("pixel table is empty"));
        }
        if !(pixel_side > 0.0 && pixel_side.is_finite()) {
            return Err(DisaggError::validation(format!(
                "pixel side must be positive, got {pixel_side}"
            )));
        }
        rows.sort_by_key(|(p, _)| p.pixel_id);
        for (expected, (p, _)) in rows.iter().enumerate() {
            if p.pixel_id != expected {
                return Err(if expected > 0 && p.pixel_id == rows[expected - 1].0.pixel_id {
                    DisaggError::validation(format!("duplicate pixel_id {}", p.pixel_id))
                } else {
                    DisaggError::validation(format!(
                        "pixel ids must be contiguous from 0; missing {expected}"
                    ))
                });
            }
        }
        let m = covariate_names.len();
        let p = rows.len();
        let mut covariates = DMatrix::<f64>::zeros(p, m + 1);
        for (j, (_, values)) in rows.iter().enumerate() {
            if values.len() != m {
                return Err(DisaggError::validation(format!(
                    "pixel {j} has {} covariates, expected {m}",
                    values.len()
                )));
            }
            covariates[(j, 0)] = 1.0;
            for (k, v) in values.iter().enumerate() {
                covariates[(j, k + 1)] = *v;
            }
        }
        Ok(PixelGrid {
            pixels: rows.into_iter().map(|(p, _)| p).collect(),
            covariates,
            covariate_names,
            ward_index: Vec::new(),
            pixel_side,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn pixel(&self, j: usize) -> &Pixel {
        &self.pixels[j]
    }

    /// `P × (m+1)` design matrix; column 0 is the intercept.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates excluding the intercept.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Index into the ward table for pixel `j`.
    pub fn ward_of(&self, j: usize) -> usize {
        self.ward_index[j]
    }

    pub fn pixel_side(&self) -> f64 {
        self.pixel_side
    }

    /// Scaled planar coordinates of pixel `j`.
    pub fn coords(&self, j: usize) -> (f64, f64) {
        let p = &self.pixels[j];
        (p.row as f64 * self.pixel_side, p.col as f64 * self.pixel_side)
    }

    /// `(min_row, min_col, n_rows, n_cols)` of the bounding raster.
    pub fn extent(&self) -> (i64, i64, usize, usize) {
        let (mut r0, mut r1, mut c0, mut c1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for p in &self.pixels {
            r0 = r0.min(p.row);
            r1 = r1.max(p.row);
            c0 = c0.min(p.col);
            c1 = c1.max(p.col);
        }
        (r0, c0, (r1 - r0 + 1) as usize, (c1 - c0 + 1) as usize)
    }
}

impl WardTable {
    pub fn len(&self) -> usize {
        self.wards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wards.is_empty()
    }

    pub fn wards(&self) -> &[Ward] {
        &self.wards
    }

    pub fn ward(&self, i: usize) -> &Ward {
        &self.wards[i]
    }

    /// Pixel indices of ward `i`, ascending.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn populations(&self) -> Vec<u64> {
        self.wards.iter().map(|w| w.population).collect()
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        self.wards.iter().map(|w| w.pixel_count).collect()
    }

    /// Stacked ward-averaged covariates, `L × (m+1)`.
    pub fn x_tilde(&self) -> DMatrix<f64> {
        let l = self.wards.len();
        let width = self.wards.first().map_or(0, |w| w.x_bar.len());
        DMatrix::from_fn(l, width, |i, k| self.wards[i].x_bar[k])
    }

    /// Replaces the observed counts, keeping the spatial structure. Used by
    /// the simulation harness.
    pub fn with_populations(&self, populations: &[u64]) -> Result<WardTable> {
        if populations.len() != self.wards.len() {
            return Err(DisaggError::validation(format!(
                "expected {} populations, got {}",
                self.wards.len(),
                populations.len()
            )));
        }
        let mut out = self.clone();
        for (w, &y) in out.wards.iter_mut().zip(populations) {
            w.population = y;
        }
        Ok(out)
    }

    /// Centroid of each ward in scaled coordinates.
    pub fn centroids(&self, grid: &PixelGrid) -> Vec<(f64, f64)> {
        self.members
            .iter()
            .map(|m| {
                let n = m.len() as f64;
                let (sr, sc) = m.iter().fold((0.0, 0.0), |(a, b), &j| {
                    let (r, c) = grid.coords(j);
                    (a + r, b + c)
                });
                (sr / n, sc / n)
            })
            .collect()
    }
}

/// Pairs pixels with ward populations, validating the membership map and
/// computing pixel counts and averaged covariates.
///
/// Wards are stored in ascending `ward_id` order.
pub fn assemble(
    pixels: Vec<(Pixel, Vec<f64>)>,
    covariate_names: Vec<String>,
    populations: &[(i64, u64)],
    pixel_side: f64,
) -> Result<(PixelGrid, WardTable)> {
    let mut grid = PixelGrid::from_rows(pixels, covariate_names, pixel_side)?;

    let mut by_id: BTreeMap<i64, u64> = BTreeMap::new();
    for &(id, pop) in populations {
        if by_id.insert(id, pop).is_some() {
            return Err(DisaggError::validation(format!("duplicate ward_id {id}")));
        }
    }
    if by_id.is_empty() {
        return Err(DisaggError::validation("ward table is empty"));
    }
    let index_of: HashMap<i64, usize> = by_id.keys().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut members = vec![Vec::new(); by_id.len()];
    let mut ward_index = Vec::with_capacity(grid.len());
    for p in &grid.pixels {
        let i = *index_of.get(&p.ward_id).ok_or_else(|| {
            DisaggError::validation(format!(
                "pixel {} references ward {} which is absent from the ward table",
                p.pixel_id, p.ward_id
            ))
        })?;
        members[i].push(p.pixel_id);
        ward_index.push(i);
    }
    grid.ward_index = ward_index;

    let width = grid.covariates.ncols();
    let mut wards = Vec::with_capacity(by_id.len());
    for ((&ward_id, &population), member) in by_id.iter().zip(&members) {
        if member.is_empty() {
            return Err(DisaggError::validation(format!(
                "empty ward {ward_id}: no pixels reference it"
            )));
        }
        let n = member.len() as f64;
        let x_bar = (0..width)
            .map(|k| member.iter().map(|&j| grid.covariates[(j, k)]).sum::<f64>() / n)
            .collect();
        wards.push(Ward {
            ward_id,
            population,
            pixel_count: member.len(),
            x_bar,
        });
    }
    Ok((grid, WardTable { wards, members }))
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> DisaggError {
    DisaggError::parse(path, e.to_string())
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| DisaggError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn read_pixels(path: &Path) -> Result<(Vec<(Pixel, Vec<f64>)>, Vec<String>)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_err(path, e))?.clone();
    if headers.len() < PIXEL_HEADER.len()
        || headers.iter().take(PIXEL_HEADER.len()).ne(PIXEL_HEADER.iter().copied())
    {
        return Err(DisaggError::parse(
            path,
            "header must start with pixel_id,row,col,ward_id",
        ));
    }
    let names: Vec<String> = headers.iter().skip(PIXEL_HEADER.len()).map(String::from).collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let int = |k: usize| -> Result<i64> {
            field(k).parse::<i64>().map_err(|_| {
                DisaggError::parse(
                    path,
                    format!("record {}: `{}` is not an integer {}", line + 1, field(k), PIXEL_HEADER[k]),
                )
            })
        };
        let id = int(0)?;
        if id < 0 {
            return Err(DisaggError::parse(path, format!("record {}: negative pixel_id", line + 1)));
        }
        let pixel = Pixel {
            pixel_id: id as usize,
            row: int(1)?,
            col: int(2)?,
            ward_id: int(3)?,
        };
        let mut values = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let raw = field(PIXEL_HEADER.len() + k);
            let v: f64 = raw.parse().map_err(|_| {
                DisaggError::parse(
                    path,
                    format!("record {}: non-numeric covariate {name} = `{raw}`", line + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(DisaggError::parse(
                    path,
                    format!("record {}: non-finite covariate {name}", line + 1),
                ));
            }
            values.push(v);
        }
        rows.push((pixel, values));
    }
    Ok((rows, names))
}

fn read_wards(path: &Path) -> Result<Vec<(i64, u64)>> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_err(path, e))?.clone();
    if headers.iter().ne(WARD_HEADER.iter().copied()) {
        return Err(DisaggError::parse(path, "header must be ward_id,population"));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let id: i64 = rec.get(0).unwrap_or("").parse().map_err(|_| {
            DisaggError::parse(path, format!("record {}: ward_id is not an integer", line + 1))
        })?;
        let raw = rec.get(1).unwrap_or("");
        let pop: i64 = raw.parse().map_err(|_| {
            DisaggError::parse(path, format!("record {}: population `{raw}` is not an integer", line + 1))
        })?;
        if pop < 0 {
            return Err(DisaggError::validation(format!(
                "ward {id} has negative population {pop}"
            )));
        }
        out.push((id, pop as u64));
    }
    Ok(out)
}

fn apply_transform(
    rows: &mut [(Pixel, Vec<f64>)],
    names: &[String],
    transform: &CovariateTransform,
) -> Result<()> {
    for name in &transform.log1p {
        let k = names.iter().position(|n| n == name).ok_or_else(|| {
            DisaggError::validation(format!("--log1p names unknown covariate `{name}`"))
        })?;
        for (p, values) in rows.iter_mut() {
            let v = values[k];
            if v <= -1.0 {
                return Err(DisaggError::validation(format!(
                    "log(1+x) undefined for {name} = {v} at pixel {}",
                    p.pixel_id
                )));
            }
            values[k] = v.ln_1p();
        }
    }
    if transform.standardize && !rows.is_empty() {
        let n = rows.len() as f64;
        for k in 0..names.len() {
            let mean = rows.iter().map(|(_, v)| v[k]).sum::<f64>() / n;
            let var = rows.iter().map(|(_, v)| (v[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            for (_, values) in rows.iter_mut() {
                values[k] -= mean;
                if sd > 0.0 {
                    values[k] /= sd;
                }
            }
        }
    }
    Ok(())
}

/// Reads the pixel and ward CSV files and builds a validated grid.
/// `pixel_side` converts lattice steps to distance units.
pub fn load_grid(
    pixel_file: &Path,
    ward_file: &Path,
    transform: &CovariateTransform,
    pixel_side: f64,
) -> Result<(PixelGrid, WardTable)> {
    let (mut rows, names) = read_pixels(pixel_file)?;
    let wards = read_wards(ward_file)?;
    apply_transform(&mut rows, &names, transform)?;
    assemble(rows, names, &wards, pixel_side)
}

/// Writes the grid back in the pixel CSV schema, covariates as currently
/// stored (post-transform, intercept omitted).
pub fn write_pixels(path: &Path, grid: &PixelGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| DisaggError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DisaggError::io(path, e);
    let mut header = PIXEL_HEADER.join(",");
    for n in &grid.covariate_names {
        header.push(',');
        header.push_str(n);
    }
    writeln!(w, "{header}").map_err(io)?;
    for (j, p) in grid.pixels.iter().enumerate() {
        write!(w, "{},{},{},{}", p.pixel_id, p.row, p.col, p.ward_id).map_err(io)?;
        for k in 1..grid.covariates.ncols() {
            write!(w, ",{}", grid.covariates[(j, k)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_wards(path: &Path, wards: &WardTable) -> Result<()> {
    let file = File::create(path).map_err(|e| DisaggError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DisaggError::io(path, e);
    writeln!(w, "{}", WARD_HEADER.join(",")).map_err(io)?;
    for ward in &wards.wards {
        writeln!(w, "{},{}", ward.ward_id, ward.population).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `log((Y_i + c) / |A_i|)` with information `Y_i + c`.
///
/// Zero counts are rejected unless a positive pseudo-count is supplied.
pub fn empirical_log_intensity(
    wards: &WardTable,
    correction: Option<f64>,
) -> Result<EmpiricalLogIntensity> {
    let c = correction.unwrap_or(0.0);
    if !(c >= 0.0 && c.is_finite()) {
        return Err(DisaggError::validation(format!(
            "pseudo-count must be non-negative, got {c}"
        )));
    }
    let l = wards.len();
    let mut lambda_hat = DVector::zeros(l);
    let mut precision = DVector::zeros(l);
    for (i, w) in wards.wards.iter().enumerate() {
        let y = w.population as f64 + c;
        if y <= 0.0 {
            return Err(DisaggError::validation(format!(
                "zero count ward {}: supply a pseudo-count",
                w.ward_id
            )));
        }
        lambda_hat[i] = (y / w.pixel_count as f64).ln();
        precision[i] = y;
    }
    Ok(EmpiricalLogIntensity {
        lambda_hat,
        precision,
    })
}
