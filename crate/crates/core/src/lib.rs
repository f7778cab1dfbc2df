//! Bayesian spatial disaggregation of ward-level Poisson counts onto a pixel
//! grid with a latent exponential-covariance Gaussian field.

pub mod baselines;
pub mod cache;
pub mod chain;
pub mod error;
pub mod format;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod simeval;

pub use chain::{ModelKind, PosteriorChain};
pub use error::{DisaggError, Result};
pub use grid::{CovariateTransform, EmpiricalLogIntensity, Pixel, PixelGrid, Ward, WardTable};
pub use kernel::{CovarianceBundle, CrossCov, KernelParams, PhiGrid};
pub use predict::{LatentField, PixelPosterior, PredictConfig};
pub use sampler::{ChainConfig, Hyperpriors, InitStrategy};
