//! Empirical semivariogram of ward residuals and its exponential fit.
//!
//! The model `γ(h) = nugget + sill·(1 − exp(−h/range))` is linear in
//! `(nugget, sill)` for fixed range, so the weighted least-squares problem
//! is profiled: at each range the non-negative linear part is solved in
//! closed form, and the one-dimensional profile is searched over a log grid
//! and refined by golden-section search around its best local minima.

use std::path::Path;

use crate::error::{DisaggError, Result};
use crate::format::sig9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariogramBin {
    /// Mean pair distance within the bin.
    pub h: f64,
    pub gamma: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariogramFit {
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
    /// Weighted residual sum of squares at the optimum.
    pub wsse: f64,
    pub no_spatial_structure: bool,
}

impl VariogramFit {
    pub fn gamma(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-h / self.range).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variogram {
    pub bins: Vec<VariogramBin>,
    pub empty_bins: usize,
    pub fit: Option<VariogramFit>,
}

/// Bins `½(Z_i − Z_j)²` by centroid distance into `n_bins` equal-width bins
/// on `[0, max_dist]`; pairs farther than `max_dist` are ignored.
pub fn empirical_variogram(
    residuals: &[f64],
    centroids: &[(f64, f64)],
    n_bins: usize,
    max_dist: f64,
) -> Result<Variogram> {
    if residuals.len() != centroids.len() {
        return Err(DisaggError::validation("residuals and centroids differ in length"));
    }
    if residuals.len() < 2 {
        return Err(DisaggError::validation("a variogram needs at least two wards"));
    }
    if n_bins == 0 || !(max_dist > 0.0) {
        return Err(DisaggError::validation("need at least one bin and a positive max distance"));
    }
    let width = max_dist / n_bins as f64;
    let mut sum_sq = vec![0.0; n_bins];
    let mut sum_h = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..residuals.len() {
        for j in i + 1..residuals.len() {
            let (dx, dy) = (centroids[i].0 - centroids[j].0, centroids[i].1 - centroids[j].1);
            let d = (dx * dx + dy * dy).sqrt();
            if d > max_dist {
                continue;
            }
            let k = ((d / width) as usize).min(n_bins - 1);
            let diff = residuals[i] - residuals[j];
            sum_sq[k] += diff * diff;
            sum_h[k] += d;
            count[k] += 1;
        }
    }
    let bins: Vec<VariogramBin> = (0..n_bins)
        .filter(|&k| count[k] > 0)
        .map(|k| VariogramBin {
            h: sum_h[k] / count[k] as f64,
            gamma: sum_sq[k] / (2.0 * count[k] as f64),
            n_pairs: count[k],
        })
        .collect();
    Ok(Variogram {
        empty_bins: n_bins - bins.len(),
        bins,
        fit: None,
    })
}

struct Profile<'a> {
    h: &'a [f64],
    g: &'a [f64],
    w: &'a [f64],
}

impl Profile<'_> {
    fn sse(&self, nugget: f64, sill: f64, range: f64) -> f64 {
        self.h
            .iter()
            .zip(self.g)
            .zip(self.w)
            .map(|((&h, &g), &w)| {
                let r = g - nugget - sill * (1.0 - (-h / range).exp());
                w * r * r
            })
            .sum()
    }

    /// Non-negative weighted least squares for `(nugget, sill)`.
    fn linear_part(&self, range: f64) -> (f64, f64, f64) {
        let f: Vec<f64> = self.h.iter().map(|&h| 1.0 - (-h / range).exp()).collect();
        let (mut s11, mut s1f, mut sff, mut s1g, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..self.h.len() {
            let w = self.w[k];
            s11 += w;
            s1f += w * f[k];
            sff += w * f[k] * f[k];
            s1g += w * self.g[k];
            sfg += w * f[k] * self.g[k];
        }
        // nugget only first so that exact ties favour no structure
        let mut best = {
            let n = (s1g / s11).max(0.0);
            (n, 0.0, self.sse(n, 0.0, range))
        };
        let mut consider = |n: f64, s: f64| {
            let e = self.sse(n, s, range);
            if e < best.2 * (1.0 - 1e-12) {
                best = (n, s, e);
            }
        };
        if sff > 0.0 {
            consider(0.0, (sfg / sff).max(0.0));
        }
        let det = s11 * sff - s1f * s1f;
        if det > 1e-12 * s11 * sff {
            let n = (sff * s1g - s1f * sfg) / det;
            let s = (s11 * sfg - s1f * s1g) / det;
            if n >= 0.0 && s >= 0.0 {
                consider(n, s);
            }
        }
        best
    }
}

const GRID_POINTS: usize = 80;
const STARTS: usize = 3;

/// Weighted least-squares exponential fit with weights `n_pairs/h²`.
pub fn fit_exponential_variogram(vg: &Variogram) -> Result<VariogramFit> {
    let usable: Vec<&VariogramBin> = vg.bins.iter().filter(|b| b.n_pairs > 0 && b.h > 0.0).collect();
    if usable.len() < 3 {
        return Err(DisaggError::validation(format!(
            "variogram fit needs at least 3 non-empty bins, got {}",
            usable.len()
        )));
    }
    let h: Vec<f64> = usable.iter().map(|b| b.h).collect();
    let g: Vec<f64> = usable.iter().map(|b| b.gamma).collect();
    let w: Vec<f64> = usable.iter().map(|b| b.n_pairs as f64 / (b.h * b.h)).collect();
    let prof = Profile { h: &h, g: &g, w: &w };

    let h_min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let h_max = h.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = ((h_min * 1e-2).ln(), (h_max * 1e2).ln());
    let objective = |u: f64| prof.linear_part(u.exp()).2;

    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&u| objective(u)).collect();
    let mut minima: Vec<usize> = (0..GRID_POINTS)
        .filter(|&k| {
            let left = k == 0 || values[k] <= values[k - 1];
            let right = k + 1 == GRID_POINTS || values[k] <= values[k + 1];
            left && right && values[k].is_finite()
        })
        .collect();
    minima.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    minima.truncate(STARTS);
    if minima.is_empty() {
        return Err(DisaggError::numerical(format!(
            "variogram fit failed from every start; h in [{h_min}, {h_max}], gamma in [{}, {}]",
            g.iter().cloned().fold(f64::INFINITY, f64::min),
            g.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        )));
    }

    let mut best: Option<(f64, f64)> = None;
    for &k in &minima {
        let a = grid[k.saturating_sub(1)];
        let b = grid[(k + 1).min(GRID_POINTS - 1)];
        let u = golden_section(&objective, a, b);
        let f = objective(u);
        let (u, f) = if f <= values[k] { (u, f) } else { (grid[k], values[k]) };
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((u, f));
        }
    }
    let (u, _) = best.expect("at least one start");
    let range = u.exp();
    let (nugget, sill, wsse) = prof.linear_part(range);
    let total = nugget + sill;
    let at_lower = (u - lo) < 1e-3 * (hi - lo);
    let no_spatial_structure = sill <= 1e-8 * total.max(f64::MIN_POSITIVE) || at_lower;
    Ok(VariogramFit {
        sill,
        range,
        nugget,
        wsse,
        no_spatial_structure,
    })
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `h,gamma,n_pairs,fitted`; `fitted` is empty without a fit.
pub fn write_variogram(path: &Path, vg: &Variogram) -> Result<()> {
    let mut s = String::from("h,gamma,n_pairs,fitted\n");
    for b in &vg.bins {
        let fitted = vg.fit.map(|f| sig9(f.gamma(b.h))).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", sig9(b.h), sig9(b.gamma), b.n_pairs, fitted));
    }
    std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
}

/// `sill,range,nugget,wsse,no_spatial_structure,empty_bins`.
pub fn write_variogram_fit(path: &Path, vg: &Variogram) -> Result<()> {
    let mut s = String::from("sill,range,nugget,wsse,no_spatial_structure,empty_bins\n");
    if let Some(f) = vg.fit {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig9(f.sill),
            sig9(f.range),
            sig9(f.nugget),
            sig9(f.wsse),
            f.no_spatial_structure,
            vg.empty_bins
        ));
    }
    std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
}
