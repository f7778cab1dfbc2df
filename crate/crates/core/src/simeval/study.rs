//! Replicated simulation study over settings and models.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use super::metrics::{metrics, MetricReport};
use super::simulate::{simulate, synthetic_grid, SimKind, SimSetting, Tiling, DEFAULT_BETA};
use crate::baselines::{fit_baseline, white_noise_bundle, BaselineKind};
use crate::chain::{ModelKind, PosteriorChain};
use crate::error::{DisaggError, Result};
use crate::format::sig9;
use crate::grid::{PixelGrid, WardTable};
use crate::kernel::{build_bundle, prepare_bundles, CovarianceBundle, PhiGrid, DEFAULT_JITTER};
use crate::predict::{pixel_posterior, LatentField, PixelPosterior, PredictConfig};
use crate::rng;
use crate::sampler::{run_chain, ChainConfig, Hyperpriors};

/// Covariance structures needed to fit and predict with every model.
#[derive(Clone, Debug)]
pub struct Structures {
    pub gp: Vec<CovarianceBundle>,
    pub wn: Option<CovarianceBundle>,
}

impl Structures {
    pub fn field(&self, model: ModelKind) -> Result<LatentField<'_>> {
        match model {
            ModelKind::Gp if !self.gp.is_empty() => Ok(LatentField::Kernel(&self.gp)),
            ModelKind::Gp => Err(DisaggError::validation("no covariance bundles for the GP model")),
            ModelKind::WhiteNoise => self
                .wn
                .as_ref()
                .map(LatentField::Single)
                .ok_or_else(|| DisaggError::validation("no white-noise structure")),
            ModelKind::Laplace | ModelKind::BayesGlm => Ok(LatentField::FixedEffects),
        }
    }
}

/// Fits `model`; the GP uses `gp_bundles`, which must match the priors' φ grid.
pub fn fit_model(
    model: ModelKind,
    grid: &PixelGrid,
    wards: &WardTable,
    gp_bundles: &[CovarianceBundle],
    priors: &Hyperpriors,
    config: &ChainConfig,
) -> Result<PosteriorChain> {
    match BaselineKind::from_model(model) {
        Some(kind) => fit_baseline(kind, grid, wards, priors, config),
        None => run_chain(wards, gp_bundles, priors, config),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    seed: u64,
    settings: Option<Vec<String>>,
    models: Option<Vec<String>>,
    replicates: Option<usize>,
    rows: Option<usize>,
    cols: Option<usize>,
    wards: Option<String>,
    covariate_seed: Option<u64>,
    burn_in: Option<usize>,
    samples: Option<usize>,
    thin: Option<usize>,
    phi: Option<f64>,
    phi_grid: Option<String>,
    beta_true: Option<Vec<f64>>,
    beta_sd: Option<f64>,
    ig_shape: Option<f64>,
    ig_rate: Option<f64>,
    jitter: Option<f64>,
    record_time: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub seed: u64,
    pub settings: Vec<SimKind>,
    pub models: Vec<ModelKind>,
    pub replicates: usize,
    pub rows: usize,
    pub cols: usize,
    pub tiling: Tiling,
    pub covariate_seed: u64,
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub priors: Hyperpriors,
    pub beta_true: Vec<f64>,
    pub jitter: f64,
    pub record_time: bool,
    /// Σ₀₀/Σₚ₀ cache; bundles are held in memory when `None`.
    pub cache_dir: Option<PathBuf>,
}

impl StudyConfig {
    /// Single φ = 10, 20 replicates of S1–S3 on a 100×100 grid with 5×4
    /// wards, all four models.
    pub fn new(seed: u64) -> Self {
        StudyConfig {
            seed,
            settings: vec![SimKind::S1, SimKind::S2, SimKind::S3],
            models: ModelKind::ALL.to_vec(),
            replicates: 20,
            rows: 100,
            cols: 100,
            tiling: Tiling { block_rows: 5, block_cols: 4 },
            covariate_seed: seed,
            burn_in: 500,
            samples: 1500,
            thin: 1,
            priors: Hyperpriors::with_phi_grid(PhiGrid::single(10.0).expect("positive")),
            beta_true: DEFAULT_BETA.to_vec(),
            jitter: DEFAULT_JITTER,
            record_time: false,
            cache_dir: None,
        }
    }

    /// Parses `key = value` lines (TOML syntax).
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let f: StudyFile = toml::from_str(text).map_err(|e| DisaggError::parse(origin, e.to_string()))?;
        let mut c = StudyConfig::new(f.seed);
        if let Some(s) = f.settings {
            c.settings = s.iter().map(|v| v.parse()).collect::<Result<_>>()?;
        }
        if let Some(m) = f.models {
            c.models = m.iter().map(|v| v.parse()).collect::<Result<_>>()?;
        }
        c.replicates = f.replicates.unwrap_or(c.replicates);
        c.rows = f.rows.unwrap_or(c.rows);
        c.cols = f.cols.unwrap_or(c.cols);
        if let Some(w) = f.wards {
            c.tiling = w.parse()?;
        }
        c.covariate_seed = f.covariate_seed.unwrap_or(f.seed);
        c.burn_in = f.burn_in.unwrap_or(c.burn_in);
        c.samples = f.samples.unwrap_or(c.samples);
        c.thin = f.thin.unwrap_or(c.thin);
        c.priors.phi_grid = match (f.phi_grid, f.phi) {
            (Some(g), _) => PhiGrid::parse(&g)?,
            (None, Some(p)) => PhiGrid::single(p)?,
            (None, None) => c.priors.phi_grid,
        };
        c.priors.beta_sd = f.beta_sd.unwrap_or(c.priors.beta_sd);
        c.priors.ig_shape = f.ig_shape.unwrap_or(c.priors.ig_shape);
        c.priors.ig_rate = f.ig_rate.unwrap_or(c.priors.ig_rate);
        if let Some(b) = f.beta_true {
            c.beta_true = b;
        }
        c.jitter = f.jitter.unwrap_or(c.jitter);
        c.record_time = f.record_time.unwrap_or(false);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DisaggError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.models.is_empty() {
            return Err(DisaggError::validation("a study needs at least one setting and one model"));
        }
        if self.replicates == 0 {
            return Err(DisaggError::validation("replicates must be at least 1"));
        }
        if self.samples < 2 {
            return Err(DisaggError::validation("samples must be at least 2"));
        }
        if self.beta_true.len() != super::simulate::SYNTHETIC_COVARIATES.len() + 1 {
            return Err(DisaggError::validation(format!(
                "beta_true needs {} entries",
                super::simulate::SYNTHETIC_COVARIATES.len() + 1
            )));
        }
        self.priors.validate()
    }

    fn chain_config(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            burn_in: self.burn_in,
            samples: self.samples,
            thin: self.thin,
            ..ChainConfig::new(seed)
        }
    }
}

fn setting_tag(k: SimKind) -> u64 {
    match k {
        SimKind::S1 => 1,
        SimKind::S2 => 2,
        SimKind::S3 => 3,
        SimKind::Custom(a) => a.to_bits(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub setting: SimKind,
    pub model: ModelKind,
    pub mean: Option<MetricReport>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    /// Per-replicate reports in (setting, replicate, model) order; `None`
    /// marks a failed fit.
    pub replicates: Vec<(SimKind, usize, ModelKind, Option<MetricReport>)>,
    pub warnings: Vec<String>,
}

fn one_fit(
    model: ModelKind,
    grid: &PixelGrid,
    wards: &WardTable,
    truth: &[f64],
    structures: &Structures,
    config: &StudyConfig,
    seed: u64,
) -> Result<MetricReport> {
    let start = Instant::now();
    let chain = fit_model(model, grid, wards, &structures.gp, &config.priors, &config.chain_config(seed))?;
    let post: PixelPosterior = pixel_posterior(&chain, structures.field(model)?, grid, wards, &PredictConfig::default())?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = metrics(&post, truth, &chain, wards)?;
    report.time_seconds = if config.record_time { elapsed } else { 0.0 };
    Ok(report)
}

/// Runs every (setting, replicate) cell in parallel; averages are reduced in
/// a fixed order so the result does not depend on scheduling.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let (grid, base_wards) = synthetic_grid(config.rows, config.cols, config.tiling, config.covariate_seed)?;
    let gp = if config.models.contains(&ModelKind::Gp) {
        match &config.cache_dir {
            Some(dir) => prepare_bundles(&grid, &base_wards, &config.priors.phi_grid, dir, config.jitter)?.0,
            None => config
                .priors
                .phi_grid
                .values()
                .iter()
                .map(|&phi| build_bundle(&grid, &base_wards, phi, config.jitter))
                .collect::<Result<_>>()?,
        }
    } else {
        Vec::new()
    };
    let wn = if config.models.contains(&ModelKind::WhiteNoise) {
        Some(white_noise_bundle(&grid, &base_wards)?)
    } else {
        None
    };
    let structures = Structures { gp, wn };

    let cells: Vec<(SimKind, usize)> = config
        .settings
        .iter()
        .flat_map(|&s| (0..config.replicates).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<Vec<Result<MetricReport>>>> = cells
        .par_iter()
        .map(|&(kind, rep)| {
            let tag = setting_tag(kind);
            let setting = SimSetting { kind, beta_true: config.beta_true.clone(), seed: config.seed };
            let mut r = rng::stream(config.seed, &[tag, rep as u64]);
            let (truth, y) = simulate(&setting, &grid, &base_wards, &mut r)?;
            let wards = base_wards.with_populations(&y)?;
            Ok(config
                .models
                .iter()
                .map(|&m| {
                    let seed = rng::derive_seed(config.seed, &[tag, rep as u64, 100 + m.code() as u64]);
                    one_fit(m, &grid, &wards, &truth, &structures, config, seed)
                })
                .collect())
        })
        .collect();

    let mut replicates = Vec::new();
    let mut warnings = Vec::new();
    for (&(kind, rep), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(per_model) => {
                for (&m, res) in config.models.iter().zip(per_model) {
                    match res {
                        Ok(r) => replicates.push((kind, rep, m, Some(r))),
                        Err(e) => {
                            warnings.push(format!("{kind} replicate {rep} {}: {e}", m.label()));
                            replicates.push((kind, rep, m, None));
                        }
                    }
                }
            }
            Err(e) => {
                warnings.push(format!("{kind} replicate {rep}: {e}"));
                for &m in &config.models {
                    replicates.push((kind, rep, m, None));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for &s in &config.settings {
        for &m in &config.models {
            let ok: Vec<MetricReport> = replicates
                .iter()
                .filter(|(k, _, mm, _)| *k == s && *mm == m)
                .filter_map(|(_, _, _, r)| *r)
                .collect();
            rows.push(StudyRow {
                setting: s,
                model: m,
                mean: MetricReport::average(&ok),
                succeeded: ok.len(),
                failed: config.replicates - ok.len(),
            });
        }
    }
    Ok(StudyResult { rows, replicates, warnings })
}

impl StudyResult {
    pub fn row(&self, setting: SimKind, model: ModelKind) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.setting == setting && r.model == model)
    }
}

/// `setting,model,rmse,mad,pos_sd,cover,dic,waic[,time_seconds],replicates,failed`.
pub fn write_table2(path: &Path, result: &StudyResult, with_time: bool) -> Result<()> {
    let io = |e| DisaggError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let time_col = if with_time { ",time_seconds" } else { "" };
    writeln!(w, "setting,model,rmse,mad,pos_sd,cover,dic,waic{time_col},replicates,failed").map_err(io)?;
    for r in &result.rows {
        let metrics = match r.mean {
            Some(m) => {
                let mut s = format!(
                    "{},{},{},{},{},{}",
                    sig9(m.rmse),
                    sig9(m.mad),
                    sig9(m.pos_sd),
                    sig9(m.cover),
                    sig9(m.dic),
                    sig9(m.waic)
                );
                if with_time {
                    s.push(',');
                    s.push_str(&sig9(m.time_seconds));
                }
                s
            }
            None => vec![""; if with_time { 7 } else { 6 }].join(","),
        };
        writeln!(w, "{},{},{},{},{}", r.setting, r.model.label(), metrics, r.succeeded, r.failed).map_err(io)?;
    }
    w.flush().map_err(io)
}
