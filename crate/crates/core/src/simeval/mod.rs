//! Simulation settings, evaluation metrics and variogram tools.

pub mod metrics;
pub mod simulate;
pub mod study;
pub mod variogram;

pub use metrics::{metrics, MetricReport};
pub use simulate::{simulate, SimKind, SimSetting, Tiling};
pub use study::{run_study, StudyConfig, StudyResult};
pub use variogram::{empirical_variogram, fit_exponential_variogram, Variogram, VariogramFit};
