use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use disagg_core::baselines::{self, write_glm_table};
use disagg_core::grid::{load_grid, write_pixels, write_wards};
use disagg_core::kernel::{build_bundle, prepare_bundles};
use disagg_core::predict::{
    aggregate_check, pixel_posterior, read_pixel_posterior, write_aggregate_check, write_pgm,
    write_pixel_posterior, PosteriorMeta,
};
use disagg_core::rng;
use disagg_core::simeval::metrics::write_metrics;
use disagg_core::simeval::simulate::{
    read_truth, synthetic_grid, ward_residuals, write_truth, DEFAULT_BETA,
};
use disagg_core::simeval::study::{fit_model, write_table2, Structures};
use disagg_core::simeval::variogram::{write_variogram, write_variogram_fit};
use disagg_core::simeval::{
    empirical_variogram, fit_exponential_variogram, metrics, run_study, SimKind, SimSetting,
    StudyConfig, Tiling,
};
use disagg_core::{
    ChainConfig, CovarianceBundle, CovariateTransform, Hyperpriors, InitStrategy, ModelKind, PhiGrid,
    PixelGrid, PixelPosterior, PosteriorChain, PredictConfig, WardTable,
};

use crate::manifest::{sha256_file, Recorder};
use crate::{CacheArgs, EvaluateArgs, FitArgs, GlmArgs, GridArgs, PrecomputeArgs, PredictArgs, SimulateArgs, VariogramArgs};

/// Stream tag of the count draws in `simulate`.
const SIMULATE_TAG: u64 = 1;

fn load(args: &GridArgs, rec: &mut Recorder) -> Result<(PixelGrid, WardTable)> {
    rec.input(&args.pixels);
    rec.input(&args.wards);
    let t = CovariateTransform { log1p: args.log1p.clone(), standardize: args.standardize };
    Ok(load_grid(&args.pixels, &args.wards, &t, args.pixel_side)?)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("{}: cannot create directory", d.display()))?;
    }
    Ok(())
}

/// `dir/stem<suffix>` next to `p`.
fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}{suffix}"))
}

fn gp_bundles(
    grid: &PixelGrid,
    wards: &WardTable,
    phi: &PhiGrid,
    cache: &CacheArgs,
) -> Result<Vec<CovarianceBundle>> {
    match &cache.cache_dir {
        Some(dir) => {
            let (b, stats) = prepare_bundles(grid, wards, phi, dir, cache.jitter)?;
            eprintln!("covariance cache: {} reused, {} computed", stats.hits, stats.misses);
            Ok(b)
        }
        None => Ok(phi
            .values()
            .iter()
            .map(|&p| build_bundle(grid, wards, p, cache.jitter))
            .collect::<disagg_core::Result<_>>()?),
    }
}

pub fn precompute(a: &PrecomputeArgs) -> Result<()> {
    let mut rec = Recorder::new("precompute-cov", a, None)?;
    let (grid, wards) = load(&a.grid, &mut rec)?;
    let phi = PhiGrid::parse(&a.phi_grid)?;
    let (_, stats) = prepare_bundles(&grid, &wards, &phi, &a.cache_dir, a.jitter)?;
    eprintln!("covariance cache: {} reused, {} computed", stats.hits, stats.misses);
    let mut files: Vec<PathBuf> = fs::read_dir(&a.cache_dir)
        .with_context(|| format!("{}: cannot list", a.cache_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    files.sort();
    for f in &files {
        rec.output(f);
    }
    rec.finish()?;
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let mut rec = Recorder::new("fit", a, Some(a.seed))?;
    let model: ModelKind = a.model.parse()?;
    let (grid, wards) = load(&a.grid, &mut rec)?;
    let phi = PhiGrid::parse(&a.phi_grid)?;
    let priors = Hyperpriors {
        beta_sd: a.priors.beta_sd,
        ig_shape: a.priors.ig_shape,
        ig_rate: a.priors.ig_rate,
        phi_grid: phi.clone(),
    };
    let init = match a.init.as_str() {
        "empirical" => InitStrategy::Empirical,
        "prior-mean" => InitStrategy::PriorMean,
        other => bail!(disagg_core::DisaggError::validation(format!(
            "unknown --init `{other}`; expected empirical or prior-mean"
        ))),
    };
    let config = ChainConfig {
        burn_in: a.burn_in,
        samples: a.samples,
        seed: a.seed,
        thin: a.thin,
        init,
        pseudo_count: a.pseudo_count,
    };
    let bundles = if model == ModelKind::Gp {
        gp_bundles(&grid, &wards, &phi, &a.cache)?
    } else {
        Vec::new()
    };
    let chain = fit_model(model, &grid, &wards, &bundles, &priors, &config)?;

    ensure_parent(&a.out)?;
    chain.write(&a.out)?;
    rec.output(&a.out);
    let summary = a.summary.clone().unwrap_or_else(|| sibling(&a.out, "_summary.csv"));
    ensure_parent(&summary)?;
    chain.write_summary(&summary)?;
    rec.output(&summary);
    if model.has_phi() {
        let p = sibling(&a.out, "_phi.csv");
        chain.write_phi_distribution(&p)?;
        rec.output(&p);
    }
    if let Some(t) = &a.trace {
        ensure_parent(t)?;
        chain.write_trace(t, &a.trace_wards)?;
        rec.output(t);
    }
    rec.finish()?;
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let mut rec = Recorder::new("predict", a, None)?;
    let (grid, wards) = load(&a.grid, &mut rec)?;
    rec.input(&a.chain);
    let chain = PosteriorChain::read(&a.chain)?;
    let structures = Structures {
        gp: if chain.model.has_phi() {
            gp_bundles(&grid, &wards, &PhiGrid::new(chain.phi_grid.clone())?, &a.cache)?
        } else {
            Vec::new()
        },
        wn: if chain.model == ModelKind::WhiteNoise {
            Some(baselines::white_noise_bundle(&grid, &wards)?)
        } else {
            None
        },
    };
    let cfg = PredictConfig { block_budget_bytes: a.budget_mb.saturating_mul(1 << 20) };
    let mut post = pixel_posterior(&chain, structures.field(chain.model)?, &grid, &wards, &cfg)?;
    post.meta.chain_checksum = Some(sha256_file(&a.chain)?);

    ensure_parent(&a.out)?;
    write_pixel_posterior(&a.out, &grid, &post)?;
    rec.output(&a.out);
    for (path, values) in [(&a.png_mean, &post.mean), (&a.png_sd, &post.sd)] {
        if let Some(p) = path {
            ensure_parent(p)?;
            write_pgm(p, &grid, values)?;
            rec.output(p);
            let mut side = p.as_os_str().to_owned();
            side.push(".txt");
            rec.output(Path::new(&side));
        }
    }
    if let Some(p) = &a.aggregate_check {
        ensure_parent(p)?;
        write_aggregate_check(p, &aggregate_check(&post, &wards, &chain))?;
        rec.output(p);
    }
    rec.finish()?;
    Ok(())
}

/// Last comma-separated field of every line that parses as a number.
fn read_beta(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.rsplit(',').next().and_then(|v| v.trim().parse::<f64>().ok()))
        .collect())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut rec = Recorder::new("simulate", a, Some(a.seed))?;
    let kind: SimKind = a.setting.parse()?;
    let tiling: Tiling = a.wards.parse()?;
    let beta = match &a.beta_file {
        Some(p) => {
            rec.input(p);
            read_beta(p)?
        }
        None => DEFAULT_BETA.to_vec(),
    };
    if beta.len() != DEFAULT_BETA.len() {
        bail!(disagg_core::DisaggError::validation(format!(
            "expected {} coefficients (intercept, smooth, binary, count), got {}",
            DEFAULT_BETA.len(),
            beta.len()
        )));
    }
    let (grid, empty) = synthetic_grid(a.rows, a.cols, tiling, a.covariate_seed.unwrap_or(a.seed))?;
    let setting = SimSetting { kind, beta_true: beta, seed: a.seed };
    let mut r = rng::stream(a.seed, &[SIMULATE_TAG]);
    let (truth, y) = disagg_core::simeval::simulate(&setting, &grid, &empty, &mut r)?;
    let wards = empty.with_populations(&y)?;

    let out = |name: &str| PathBuf::from(format!("{}{name}", a.out_prefix));
    let (px, wd, tr) = (out("pixels.csv"), out("wards.csv"), out("truth.csv"));
    ensure_parent(&px)?;
    write_pixels(&px, &grid)?;
    write_wards(&wd, &wards)?;
    write_truth(&tr, &truth)?;
    for p in [&px, &wd, &tr] {
        rec.output(p);
    }
    rec.finish()?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if let Some(study) = &a.study {
        let mut config = StudyConfig::load(study)?;
        config.record_time |= a.record_time;
        config.cache_dir = a.cache_dir.clone();
        let mut rec = Recorder::new("evaluate", &(a, config.seed), Some(config.seed))?;
        rec.input(study);
        let result = run_study(&config)?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        ensure_parent(&a.out)?;
        write_table2(&a.out, &result, config.record_time)?;
        rec.output(&a.out);
        rec.finish()?;
        return Ok(());
    }
    let (Some(post_path), Some(truth_path), Some(chain_path), Some(pixels), Some(wards)) =
        (&a.posterior, &a.truth, &a.chain, &a.pixels, &a.wards)
    else {
        bail!(disagg_core::DisaggError::validation(
            "evaluate needs --study, or all of --posterior --truth --chain --pixels --wards"
        ));
    };
    let mut rec = Recorder::new("evaluate", a, None)?;
    let grid_args = GridArgs {
        pixels: pixels.clone(),
        wards: wards.clone(),
        log1p: a.log1p.clone(),
        standardize: a.standardize,
        pixel_side: a.pixel_side,
    };
    let (grid, wards) = load(&grid_args, &mut rec)?;
    for p in [post_path, truth_path, chain_path] {
        rec.input(p);
    }
    let chain = PosteriorChain::read(chain_path)?;
    let (mean, sd) = read_pixel_posterior(post_path, grid.len())?;
    let truth = read_truth(truth_path, grid.len())?;
    let post = PixelPosterior {
        mean,
        sd,
        meta: PosteriorMeta {
            draws: chain.len(),
            seed: chain.seed,
            phi_grid: chain.phi_grid.clone(),
            chain_checksum: Some(sha256_file(chain_path)?),
        },
    };
    let report = metrics(&post, &truth, &chain, &wards)?;
    ensure_parent(&a.out)?;
    write_metrics(&a.out, &[(chain.model.label(), report)], false)?;
    rec.output(&a.out);
    rec.finish()?;
    Ok(())
}

pub fn glm(a: &GlmArgs) -> Result<()> {
    let mut rec = Recorder::new("glm", a, None)?;
    let (grid, wards) = load(&a.grid, &mut rec)?;
    let fit = baselines::fit_poisson_glm(&wards)?;
    if !fit.converged {
        eprintln!("warning: IRLS stopped after {} iterations without converging", fit.iterations);
    }
    ensure_parent(&a.out)?;
    write_glm_table(&a.out, &fit, grid.covariate_names())?;
    rec.output(&a.out);
    rec.finish()?;
    Ok(())
}

/// `ward_id,x,y,residual`.
fn read_residuals(path: &Path) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("{}: cannot open", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != ["ward_id", "x", "y", "residual"] {
        bail!(disagg_core::DisaggError::parse(path, "expected header ward_id,x,y,residual"));
    }
    let mut res = Vec::new();
    let mut xy = Vec::new();
    for (line, r) in rdr.records().enumerate() {
        let r = r.with_context(|| format!("{}: malformed record", path.display()))?;
        let num = |k: usize| -> Result<f64> {
            r[k].trim().parse::<f64>().map_err(|_| {
                disagg_core::DisaggError::parse(path, format!("record {}: `{}` is not a number", line + 1, &r[k]))
                    .into()
            })
        };
        xy.push((num(1)?, num(2)?));
        res.push(num(3)?);
    }
    Ok((res, xy))
}

pub fn variogram(a: &VariogramArgs) -> Result<()> {
    let mut rec = Recorder::new("variogram", a, None)?;
    let (res, xy) = match (&a.residuals, &a.pixels, &a.wards) {
        (Some(r), _, _) => {
            rec.input(r);
            read_residuals(r)?
        }
        (None, Some(p), Some(w)) => {
            let g = GridArgs {
                pixels: p.clone(),
                wards: w.clone(),
                log1p: a.log1p.clone(),
                standardize: a.standardize,
                pixel_side: a.pixel_side,
            };
            let (grid, wards) = load(&g, &mut rec)?;
            (ward_residuals(&wards, a.pseudo_count)?, wards.centroids(&grid))
        }
        _ => bail!(disagg_core::DisaggError::validation(
            "variogram needs --residuals, or --pixels with --wards"
        )),
    };
    let max_dist = match a.max_dist {
        Some(d) => d,
        None => {
            let mut far = 0.0f64;
            for i in 0..xy.len() {
                for j in i + 1..xy.len() {
                    far = far.max(((xy[i].0 - xy[j].0).powi(2) + (xy[i].1 - xy[j].1).powi(2)).sqrt());
                }
            }
            far / 2.0
        }
    };
    let mut vg = empirical_variogram(&res, &xy, a.bins, max_dist)?;
    match fit_exponential_variogram(&vg) {
        Ok(f) => vg.fit = Some(f),
        Err(e) => eprintln!("warning: no variogram fit: {e}"),
    }
    if vg.fit.is_some_and(|f| f.no_spatial_structure) {
        eprintln!("warning: residuals show no spatial structure");
    }
    ensure_parent(&a.out)?;
    write_variogram(&a.out, &vg)?;
    rec.output(&a.out);
    let fit_path = a.fit_out.clone().unwrap_or_else(|| sibling(&a.out, "_fit.csv"));
    ensure_parent(&fit_path)?;
    write_variogram_fit(&fit_path, &vg)?;
    rec.output(&fit_path);
    rec.finish()?;
    Ok(())
}
