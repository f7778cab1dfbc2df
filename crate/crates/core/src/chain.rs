//! Stored posterior draws and their on-disk formats.
//!
//! The binary chain file starts with a little-endian header
//!
//! ```text
//! magic "DSGS" | version u32 | model u32 | L u32 | m u32 | B u32 | n_phi u32 | flags u32
//! seed u64 | burn_in u64 | thin u64 | phi grid (n_phi × f64)
//! ```
//!
//! followed by `B` row-major draw blocks of `f64`:
//! `λ*₁..λ*_L, β₀..β_m, [σ²], [φ, φ-index]`. Flag bit 0 marks the presence of
//! σ², bit 1 the presence of φ.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{DisaggError, Result};
use crate::format::sig9;

const MAGIC: [u8; 4] = *b"DSGS";
const VERSION: u32 = 1;
const FLAG_SIGMA2: u32 = 1;
const FLAG_PHI: u32 = 2;

/// Which latent structure a chain was fitted with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Latent Gaussian process with exponential kernel (Laplace-GP).
    Gp,
    /// Pixel-level white noise (Laplace-WN).
    WhiteNoise,
    /// No latent term, Gaussian working likelihood (Laplace).
    Laplace,
    /// Poisson regression with normal priors (BayesGLM).
    BayesGlm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::BayesGlm,
        ModelKind::Laplace,
        ModelKind::WhiteNoise,
        ModelKind::Gp,
    ];

    pub fn code(self) -> u32 {
        match self {
            ModelKind::Gp => 0,
            ModelKind::WhiteNoise => 1,
            ModelKind::Laplace => 2,
            ModelKind::BayesGlm => 3,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }

    /// CLI spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gp => "gp",
            ModelKind::WhiteNoise => "wn",
            ModelKind::Laplace => "laplace",
            ModelKind::BayesGlm => "bayesglm",
        }
    }

    /// Display name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Gp => "Laplace-GP",
            ModelKind::WhiteNoise => "Laplace-WN",
            ModelKind::Laplace => "Laplace",
            ModelKind::BayesGlm => "BayesGLM",
        }
    }

    pub fn has_sigma2(self) -> bool {
        matches!(self, ModelKind::Gp | ModelKind::WhiteNoise)
    }

    pub fn has_phi(self) -> bool {
        matches!(self, ModelKind::Gp)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = DisaggError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp" | "laplace-gp" => Ok(ModelKind::Gp),
            "wn" | "laplace-wn" => Ok(ModelKind::WhiteNoise),
            "laplace" => Ok(ModelKind::Laplace),
            "bayesglm" | "glm" => Ok(ModelKind::BayesGlm),
            other => Err(DisaggError::validation(format!("unknown model `{other}`"))),
        }
    }
}

/// Retained draws. Rows index draws; `sigma2` is empty for models without a
/// variance parameter and `phi_index` is empty unless the model samples φ.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorChain {
    pub model: ModelKind,
    pub seed: u64,
    pub burn_in: usize,
    pub thin: usize,
    pub phi_grid: Vec<f64>,
    pub lambda_star: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub phi_index: Vec<usize>,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.lambda_star.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_wards(&self) -> usize {
        self.lambda_star.ncols()
    }

    pub fn n_coef(&self) -> usize {
        self.beta.ncols()
    }

    pub fn phi(&self, b: usize) -> Option<f64> {
        self.phi_index.get(b).map(|&k| self.phi_grid[k])
    }

    pub fn phi_draws(&self) -> Vec<f64> {
        self.phi_index.iter().map(|&k| self.phi_grid[k]).collect()
    }

    /// Posterior mean of the ward log-intensities.
    pub fn lambda_mean(&self) -> Vec<f64> {
        mean_columns(&self.lambda_star)
    }

    pub fn beta_mean(&self) -> Vec<f64> {
        mean_columns(&self.beta)
    }

    /// Posterior probability of each φ grid value.
    pub fn phi_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.phi_grid.len()];
        for &k in &self.phi_index {
            counts[k] += 1.0;
        }
        let n = self.phi_index.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if !self.sigma2.is_empty() {
            f |= FLAG_SIGMA2;
        }
        if !self.phi_index.is_empty() {
            f |= FLAG_PHI;
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        if self.beta.nrows() != b
            || (!self.sigma2.is_empty() && self.sigma2.len() != b)
            || (!self.phi_index.is_empty() && self.phi_index.len() != b)
        {
            return Err(DisaggError::validation("chain components have unequal lengths"));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(DisaggError::validation("chain contains non-positive sigma2"));
        }
        if self.phi_index.iter().any(|&k| k >= self.phi_grid.len()) {
            return Err(DisaggError::validation("chain phi index outside grid"));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let io = |e| DisaggError::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let flags = self.flags();
        let mut head = Vec::with_capacity(64);
        head.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            self.model.code(),
            self.n_wards() as u32,
            (self.n_coef() - 1) as u32,
            self.len() as u32,
            self.phi_grid.len() as u32,
            flags,
        ] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.seed, self.burn_in as u64, self.thin as u64] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.phi_grid {
            head.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&head).map_err(io)?;
        let mut row = Vec::new();
        for b in 0..self.len() {
            row.clear();
            row.extend(self.lambda_star.row(b).iter());
            row.extend(self.beta.row(b).iter());
            if flags & FLAG_SIGMA2 != 0 {
                row.push(self.sigma2[b]);
            }
            if flags & FLAG_PHI != 0 {
                let k = self.phi_index[b];
                row.push(self.phi_grid[k]);
                row.push(k as f64);
            }
            for v in &row {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DisaggError::io(path, e))?;
        let bad = |m: &str| DisaggError::parse(path, m.to_string());
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a chain file (bad magic)"));
        }
        let mut u32s = [0u32; 7];
        for v in u32s.iter_mut() {
            *v = cur.u32().ok_or_else(|| bad("truncated header"))?;
        }
        let [version, model, l, m, b, n_phi, flags] = u32s;
        if version != VERSION {
            return Err(bad("unsupported chain version"));
        }
        let model = ModelKind::from_code(model).ok_or_else(|| bad("unknown model code"))?;
        let seed = cur.u64().ok_or_else(|| bad("truncated header"))?;
        let burn_in = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let thin = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let phi_grid = (0..n_phi)
            .map(|_| cur.f64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated phi grid"))?;
        let (l, m, b) = (l as usize, m as usize + 1, b as usize);
        let has_s = flags & FLAG_SIGMA2 != 0;
        let has_p = flags & FLAG_PHI != 0;
        let mut lambda_star = DMatrix::zeros(b, l);
        let mut beta = DMatrix::zeros(b, m);
        let mut sigma2 = Vec::new();
        let mut phi_index = Vec::new();
        for r in 0..b {
            for i in 0..l {
                lambda_star[(r, i)] = cur.f64().ok_or_else(|| bad("truncated draws"))?;
            }
            for k in 0..m {
                beta[(r, k)] = cur.f64().ok_or_else(|| bad("truncated draws"))?;
            }
            if has_s {
                sigma2.push(cur.f64().ok_or_else(|| bad("truncated draws"))?);
            }
            if has_p {
                let _phi = cur.f64().ok_or_else(|| bad("truncated draws"))?;
                phi_index.push(cur.f64().ok_or_else(|| bad("truncated draws"))? as usize);
            }
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after draws"));
        }
        let chain = PosteriorChain {
            model,
            seed,
            burn_in,
            thin,
            phi_grid,
            lambda_star,
            beta,
            sigma2,
            phi_index,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Per-parameter posterior summaries in a fixed row order: `beta_k`,
    /// `sigma2`, `phi`, then `lambda_star_i`.
    pub fn summary(&self) -> Vec<ParamSummary> {
        let mut out = Vec::new();
        for k in 0..self.n_coef() {
            out.push(ParamSummary::of(format!("beta_{k}"), self.beta.column(k).iter().copied().collect()));
        }
        if !self.sigma2.is_empty() {
            out.push(ParamSummary::of("sigma2".into(), self.sigma2.clone()));
        }
        if !self.phi_index.is_empty() {
            out.push(ParamSummary::of("phi".into(), self.phi_draws()));
        }
        for i in 0..self.n_wards() {
            out.push(ParamSummary::of(
                format!("lambda_star_{i}"),
                self.lambda_star.column(i).iter().copied().collect(),
            ));
        }
        out
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut s = String::from("parameter,mean,sd,q2.5,q97.5\n");
        for p in self.summary() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.name,
                sig9(p.mean),
                sig9(p.sd),
                sig9(p.q025),
                sig9(p.q975)
            ));
        }
        std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
    }

    /// Discrete posterior over the φ grid.
    pub fn write_phi_distribution(&self, path: &Path) -> Result<()> {
        let mut s = String::from("phi,probability\n");
        for (phi, p) in self.phi_grid.iter().zip(self.phi_distribution()) {
            s.push_str(&format!("{phi},{}\n", sig9(p)));
        }
        std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
    }

    /// Iteration-indexed values of `β`, `σ²`, `φ` and the selected `λ*_i`.
    pub fn write_trace(&self, path: &Path, lambda_indices: &[usize]) -> Result<()> {
        if let Some(&bad) = lambda_indices.iter().find(|&&i| i >= self.n_wards()) {
            return Err(DisaggError::validation(format!(
                "trace index {bad} out of range for {} wards",
                self.n_wards()
            )));
        }
        let mut s = String::from("iteration");
        for k in 0..self.n_coef() {
            s.push_str(&format!(",beta_{k}"));
        }
        if !self.sigma2.is_empty() {
            s.push_str(",sigma2");
        }
        if !self.phi_index.is_empty() {
            s.push_str(",phi");
        }
        for i in lambda_indices {
            s.push_str(&format!(",lambda_star_{i}"));
        }
        s.push('\n');
        for b in 0..self.len() {
            s.push_str(&(self.burn_in + (b + 1) * self.thin).to_string());
            for k in 0..self.n_coef() {
                s.push(',');
                s.push_str(&sig9(self.beta[(b, k)]));
            }
            if !self.sigma2.is_empty() {
                s.push(',');
                s.push_str(&sig9(self.sigma2[b]));
            }
            if let Some(phi) = self.phi(b) {
                s.push_str(&format!(",{phi}"));
            }
            for &i in lambda_indices {
                s.push(',');
                s.push_str(&sig9(self.lambda_star[(b, i)]));
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| DisaggError::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn mean_columns(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    (0..m.ncols()).map(|k| m.column(k).sum() / n).collect()
}

/// Mean, standard deviation and equal-tailed 95% interval of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl ParamSummary {
    fn of(name: String, mut draws: Vec<f64>) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = if draws.len() > 1 {
            draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        draws.sort_by(f64::total_cmp);
        ParamSummary {
            name,
            mean,
            sd: var.sqrt(),
            q025: quantile_sorted(&draws, 0.025),
            q975: quantile_sorted(&draws, 0.975),
        }
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
