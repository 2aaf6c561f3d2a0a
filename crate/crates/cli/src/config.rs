//! Flag values merged over an optional TOML config file (flags win).

use std::path::{Path, PathBuf};

use clap::Args;
use contbcf::sampler::SamplerConfig;
use contbcf::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every setting a config file may carry. Keys match the long flag names
/// with dashes replaced by underscores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub rows: Option<PathBuf>,
    pub chains: Option<usize>,
    pub burnin: Option<usize>,
    pub draws: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub homogeneous: Option<bool>,
    pub keep_forests: Option<bool>,
    pub threads: Option<usize>,
    pub groups: Option<String>,
    pub case: Option<String>,
    pub b: Option<f64>,
    pub n: Option<usize>,
    pub cut_height: Option<f64>,
    pub span: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub tree_min_leaf: Option<f64>,
    pub tree_folds: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplerFlags {
    /// Number of chains [default: 4]
    #[arg(long)]
    pub chains: Option<usize>,
    /// Burn-in sweeps per chain [default: 5000]
    #[arg(long)]
    pub burnin: Option<usize>,
    /// Kept draws per chain [default: 2500]
    #[arg(long)]
    pub draws: Option<usize>,
    /// Keep every k-th sweep after burn-in [default: 1]
    #[arg(long)]
    pub thin: Option<usize>,
    /// Base seed; per-chain seeds are derived from it [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit a single effect (τ ≡ 1 times a scale)
    #[arg(long)]
    pub homogeneous: bool,
    /// Store forest snapshots so `predict` can evaluate new rows
    #[arg(long)]
    pub keep_forests: bool,
}

impl SamplerFlags {
    pub fn resolve(&self, file: &FileConfig) -> Result<SamplerConfig> {
        let chains = self.chains.or(file.chains).unwrap_or(4);
        let seed = self.seed.or(file.seed).unwrap_or(0);
        let mut cfg = SamplerConfig::desk(chains, seed);
        if let Some(b) = self.burnin.or(file.burnin) {
            cfg.burn_in = b;
        }
        if let Some(d) = self.draws.or(file.draws) {
            cfg.kept_draws = d;
        }
        if let Some(t) = self.thin.or(file.thin) {
            cfg.thinning = t;
        }
        cfg.homogeneous = self.homogeneous || file.homogeneous.unwrap_or(false);
        cfg.keep_forests = self.keep_forests || file.keep_forests.unwrap_or(false);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalysisFlags {
    /// Categorical column (or the unit column) for per-group ATEs
    #[arg(long)]
    pub groups: Option<String>,
    /// Dendrogram cut height for the diagnostic clustering [default: SD of τ̂]
    #[arg(long)]
    pub cut_height: Option<f64>,
    /// Loess span of the global smoother check [default: 0.75]
    #[arg(long)]
    pub span: Option<f64>,
}

/// Resolved analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSettings {
    pub groups: Option<String>,
    pub cut_height: Option<f64>,
    pub span: f64,
    pub lambda: Option<Vec<f64>>,
    pub tree_min_leaf: f64,
    pub tree_folds: usize,
}

impl AnalysisFlags {
    pub fn resolve(&self, file: &FileConfig) -> Result<AnalysisSettings> {
        let span = self.span.or(file.span).unwrap_or(contbcf::diagnostics::DEFAULT_SPAN);
        if !(span > 0.0 && span <= 1.0) {
            return Err(Error::Config(format!("span must lie in (0, 1], got {span}")));
        }
        if let Some(h) = self.cut_height.or(file.cut_height) {
            if !(h > 0.0) {
                return Err(Error::Config(format!("cut height must be positive, got {h}")));
            }
        }
        Ok(AnalysisSettings {
            groups: self.groups.clone().or_else(|| file.groups.clone()),
            cut_height: self.cut_height.or(file.cut_height),
            span,
            lambda: file.lambda.clone(),
            tree_min_leaf: file.tree_min_leaf.unwrap_or(0.05),
            tree_folds: file.tree_folds.unwrap_or(10),
        })
    }
}

/// A path that must exist, from a flag or the config file.
pub fn existing_path(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required")))?;
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    Ok(path)
}

pub fn required_path(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required")))
}
