//! `disagg`: areal counts to pixel-level log-intensity surfaces.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disagg_core::DisaggError;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "disagg", version, about = "Bayesian spatial disaggregation of ward counts onto a pixel grid")]
struct Cli {
    /// Worker threads for covariance assembly and prediction [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Pixel and ward tables plus load-time covariate transforms.
#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    /// Pixel CSV: pixel_id,row,col,ward_id,cov_1,...,cov_m
    #[arg(long)]
    pub pixels: PathBuf,
    /// Ward CSV: ward_id,population
    #[arg(long)]
    pub wards: PathBuf,
    /// Covariate columns to transform with log(1+x), comma separated
    #[arg(long, value_delimiter = ',')]
    pub log1p: Vec<String>,
    /// Z-score every covariate after log1p
    #[arg(long)]
    pub standardize: bool,
    /// Distance units per lattice step
    #[arg(long, default_value_t = 1.0)]
    pub pixel_side: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CacheArgs {
    /// Directory for Σ₀₀/Σₚ₀ files; matrices stay in memory when absent
    #[arg(long, env = "DISAGG_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Diagonal jitter added to Σ₀₀ before factorisation
    #[arg(long, default_value_t = 1e-8)]
    pub jitter: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    /// Prior standard deviation of every β_k
    #[arg(long, default_value_t = 100.0)]
    pub beta_sd: f64,
    /// Inverse-gamma shape of σ²
    #[arg(long, default_value_t = 0.01)]
    pub ig_shape: f64,
    /// Inverse-gamma rate of σ²
    #[arg(long, default_value_t = 0.01)]
    pub ig_rate: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PrecomputeArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// start:end:step, a comma list, or one value
    #[arg(long, default_value = "2.5:17.5:0.25")]
    pub phi_grid: String,
    #[arg(long, env = "DISAGG_CACHE_DIR")]
    pub cache_dir: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub jitter: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(flatten)]
    pub priors: PriorArgs,
    /// gp, wn, laplace or bayesglm
    #[arg(long, default_value = "gp")]
    pub model: String,
    /// Support of the uniform φ prior (gp only)
    #[arg(long, default_value = "2.5:17.5:0.25")]
    pub phi_grid: String,
    /// Discarded sweeps
    #[arg(long, default_value_t = 500)]
    pub burn_in: usize,
    /// Retained draws
    #[arg(long, default_value_t = 1500)]
    pub samples: usize,
    /// Sweeps per retained draw
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// empirical or prior-mean
    #[arg(long, default_value = "empirical")]
    pub init: String,
    /// Added to every ward count before taking logs
    #[arg(long)]
    pub pseudo_count: Option<f64>,
    /// Master seed of the chain
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "chain.bin")]
    pub out: PathBuf,
    /// Posterior summary [default: <out stem>_summary.csv]
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Trace CSV of β, σ², φ and the wards in --trace-wards
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ward positions (0-based, ascending ward_id order) to include in the trace
    #[arg(long, value_delimiter = ',')]
    pub trace_wards: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long, default_value = "pixel_posterior.csv")]
    pub out: PathBuf,
    /// Working-memory budget for pixel blocks, in MiB
    #[arg(long, default_value_t = 256)]
    pub budget_mb: usize,
    /// Binary PGM of the posterior mean; scale goes to <path>.txt
    #[arg(long)]
    pub png_mean: Option<PathBuf>,
    /// Binary PGM of the posterior sd; scale goes to <path>.txt
    #[arg(long)]
    pub png_sd: Option<PathBuf>,
    /// Ward-level comparison of aggregated pixel means with the chain
    #[arg(long)]
    pub aggregate_check: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// s1, s2, s3 or custom:<amplitude>
    #[arg(long)]
    pub setting: String,
    #[arg(long, default_value_t = 100)]
    pub rows: usize,
    #[arg(long, default_value_t = 100)]
    pub cols: usize,
    /// Ward tiling, <block rows>x<block cols>
    #[arg(long, default_value = "5x4")]
    pub wards: String,
    /// Coefficients (intercept, smooth, binary, count): the last field of each
    /// numeric line is read, other lines are skipped
    #[arg(long)]
    pub beta_file: Option<PathBuf>,
    /// Seed of the count draws
    #[arg(long)]
    pub seed: u64,
    /// Seed of the synthetic covariates [default: --seed]
    #[arg(long)]
    pub covariate_seed: Option<u64>,
    /// Prefix of pixels.csv, wards.csv and truth.csv; a trailing `/` names a directory
    #[arg(long, default_value = "")]
    pub out_prefix: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// TOML study file; runs the full simulation study
    #[arg(long, conflicts_with_all = ["posterior", "truth", "chain"])]
    pub study: Option<PathBuf>,
    /// Include time_seconds (not reproducible across runs)
    #[arg(long)]
    pub record_time: bool,
    #[arg(long, env = "DISAGG_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Pixel posterior CSV from `predict`
    #[arg(long, requires_all = ["truth", "chain", "pixels", "wards"])]
    pub posterior: Option<PathBuf>,
    /// Truth CSV: pixel_id,log_intensity
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long)]
    pub pixels: Option<PathBuf>,
    #[arg(long)]
    pub wards: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub log1p: Vec<String>,
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value_t = 1.0)]
    pub pixel_side: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GlmArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value = "glm.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VariogramArgs {
    /// Residual CSV: ward_id,x,y,residual
    #[arg(long, conflicts_with_all = ["pixels", "wards"])]
    pub residuals: Option<PathBuf>,
    /// Pixel CSV; residuals are OLS residuals of the ward log-intensities
    #[arg(long, requires = "wards")]
    pub pixels: Option<PathBuf>,
    #[arg(long, requires = "pixels")]
    pub wards: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub log1p: Vec<String>,
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value_t = 1.0)]
    pub pixel_side: f64,
    #[arg(long)]
    pub pseudo_count: Option<f64>,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// Largest pair distance [default: half the largest centroid distance]
    #[arg(long)]
    pub max_dist: Option<f64>,
    #[arg(long, default_value = "variogram.csv")]
    pub out: PathBuf,
    /// Fitted parameters [default: <out stem>_fit.csv]
    #[arg(long)]
    pub fit_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble and cache Σ₀₀ and Σₚ₀ for every φ on a grid
    #[command(after_help = "Writes sigma00_phi<φ>.bin, sigmap0_phi<φ>.bin and chol00_phi<φ>.bin \
                            plus an index file into --cache-dir.")]
    PrecomputeCov(PrecomputeArgs),
    /// Run a posterior sampler and write the chain
    #[command(after_help = "Outputs:\n  <out>                binary chain (magic DSGS)\n  \
                            <stem>_summary.csv   parameter,mean,sd,q2.5,q97.5\n  \
                            <stem>_phi.csv       phi,probability (gp only)\n  \
                            --trace              iteration,beta_0..beta_m,sigma2,phi,lambda_star_<i>...")]
    Fit(FitArgs),
    /// Pixel posterior mean and sd from a chain
    #[command(after_help = "Outputs:\n  <out>               pixel_id,row,col,ward_id,post_mean,post_sd\n  \
                            --aggregate-check   ward_id,pixel_aggregate,chain_mean,difference")]
    Predict(PredictArgs),
    /// Synthetic grid, ward counts and true log-intensities
    #[command(after_help = "Outputs:\n  <prefix>pixels.csv  pixel_id,row,col,ward_id,smooth,binary,count\n  \
                            <prefix>wards.csv   ward_id,population\n  \
                            <prefix>truth.csv   pixel_id,log_intensity")]
    Simulate(SimulateArgs),
    /// Simulation study table, or metrics of one fit against a truth file
    #[command(after_help = "Outputs:\n  --study   setting,model,rmse,mad,pos_sd,cover,dic,waic[,time_seconds],replicates,failed\n  \
                            otherwise model,rmse,mad,pos_sd,cover,dic,waic")]
    Evaluate(EvaluateArgs),
    /// Maximum-likelihood Poisson GLM of ward counts
    #[command(after_help = "Output: term,estimate,std_error,z_value,p_value")]
    Glm(GlmArgs),
    /// Empirical ward-residual variogram with an exponential fit
    #[command(after_help = "Outputs:\n  <out>            h,gamma,n_pairs,fitted\n  \
                            <stem>_fit.csv   sill,range,nugget,wsse,no_spatial_structure,empty_bins")]
    Variogram(VariogramArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DisaggError>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::PrecomputeCov(a) => commands::precompute(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Glm(a) => commands::glm(a),
        Command::Variogram(a) => commands::variogram(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
