//! Accuracy, uncertainty and information-criterion summaries.

use std::path::Path;

use statrs::function::gamma::ln_gamma;

use crate::chain::PosteriorChain;
use crate::error::{DisaggError, Result};
use crate::format::sig9;
use crate::grid::WardTable;
use crate::predict::PixelPosterior;

/// Half-width multiplier of the pointwise 95% normal interval.
pub const COVER_Z: f64 = 1.96;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub mad: f64,
    pub pos_sd: f64,
    pub cover: f64,
    pub dic: f64,
    pub waic: f64,
    pub time_seconds: f64,
}

impl MetricReport {
    /// Componentwise mean.
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = MetricReport::default();
        for r in reports {
            acc.rmse += r.rmse;
            acc.mad += r.mad;
            acc.pos_sd += r.pos_sd;
            acc.cover += r.cover;
            acc.dic += r.dic;
            acc.waic += r.waic;
            acc.time_seconds += r.time_seconds;
        }
        Some(MetricReport {
            rmse: acc.rmse / n,
            mad: acc.mad / n,
            pos_sd: acc.pos_sd / n,
            cover: acc.cover / n,
            dic: acc.dic / n,
            waic: acc.waic / n,
            time_seconds: acc.time_seconds / n,
        })
    }
}

/// `log Poisson(y; a·e^λ)`.
pub fn ward_log_lik(y: f64, size: f64, lambda: f64) -> f64 {
    let mu = size * lambda.exp();
    if y == 0.0 {
        -mu
    } else {
        y * mu.ln() - mu - ln_gamma(y + 1.0)
    }
}

/// `−2 Σ_i log Poisson(Y_i; |A_i| e^{λ_i})`.
pub fn deviance(wards: &WardTable, lambda: &[f64]) -> f64 {
    let y = wards.populations();
    let a = wards.pixel_counts();
    -2.0 * (0..wards.len())
        .map(|i| ward_log_lik(y[i] as f64, a[i] as f64, lambda[i]))
        .sum::<f64>()
}

/// `(DIC, WAIC)` of the chain's ward log-intensities.
pub fn information_criteria(chain: &PosteriorChain, wards: &WardTable) -> Result<(f64, f64)> {
    let b = chain.len();
    if b < 2 {
        return Err(DisaggError::validation("information criteria need at least two draws"));
    }
    if chain.n_wards() != wards.len() {
        return Err(DisaggError::validation("chain and ward table sizes differ"));
    }
    let y = wards.populations();
    let a = wards.pixel_counts();
    let lam_bar = chain.lambda_mean();
    let d_bar_theta = deviance(wards, &lam_bar);
    let mut mean_d = 0.0;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut ll = vec![0.0; b];
    for i in 0..wards.len() {
        for (k, v) in ll.iter_mut().enumerate() {
            *v = ward_log_lik(y[i] as f64, a[i] as f64, chain.lambda_star[(k, i)]);
        }
        mean_d += -2.0 * ll.iter().sum::<f64>() / b as f64;
        let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (ll.iter().map(|v| (v - max).exp()).sum::<f64>() / b as f64).ln();
        lppd += lse;
        let m = ll.iter().sum::<f64>() / b as f64;
        p_waic += ll.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    }
    let p_d = mean_d - d_bar_theta;
    Ok((d_bar_theta + 2.0 * p_d, -2.0 * (lppd - p_waic)))
}

/// All metrics except timing.
pub fn metrics(
    estimated: &PixelPosterior,
    truth: &[f64],
    chain: &PosteriorChain,
    wards: &WardTable,
) -> Result<MetricReport> {
    let p = truth.len();
    if estimated.mean.len() != p || estimated.sd.len() != p {
        return Err(DisaggError::validation("posterior and truth lengths differ"));
    }
    if p == 0 {
        return Err(DisaggError::validation("no pixels to evaluate"));
    }
    let n = p as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut covered = 0usize;
    for j in 0..p {
        let e = estimated.mean[j] - truth[j];
        sq += e * e;
        abs += e.abs();
        if e.abs() <= COVER_Z * estimated.sd[j] {
            covered += 1;
        }
    }
    let (dic, waic) = information_criteria(chain, wards)?;
    Ok(MetricReport {
        rmse: sq.sqrt() / n.sqrt(),
        mad: abs / n,
        pos_sd: estimated.sd.iter().sum::<f64>() / n,
        cover: covered as f64 / n,
        dic,
        waic,
        time_seconds: 0.0,
    })
}

/// `model,rmse,mad,pos_sd,cover,dic,waic[,time_seconds]`.
pub fn write_metrics(path: &Path, rows: &[(&str, MetricReport)], with_time: bool) -> Result<()> {
    let mut s = String::from("model,rmse,mad,pos_sd,cover,dic,waic");
    if with_time {
        s.push_str(",time_seconds");
    }
    s.push('\n');
    for (label, m) in rows {
        s.push_str(&format!(
            "{label},{},{},{},{},{},{}",
            sig9(m.rmse),
            sig9(m.mad),
            sig9(m.pos_sd),
            sig9(m.cover),
            sig9(m.dic),
            sig9(m.waic)
        ));
        if with_time {
            s.push(',');
            s.push_str(&sig9(m.time_seconds));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
}
