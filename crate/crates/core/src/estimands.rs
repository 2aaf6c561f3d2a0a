//! Causal estimands computed from posterior draws, in natural units.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;
use crate::stats::{mean, quantile_sorted, sorted};

/// Interval levels reported by default.
pub const DEFAULT_LEVELS: [f64; 2] = [0.5, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandPosterior {
    pub name: String,
    pub draws: Vec<f64>,
    pub point: f64,
    /// Keyed by the level in permille (500, 950, ...) so the map stays ordered.
    pub intervals: BTreeMap<u32, (f64, f64)>,
}

impl EstimandPosterior {
    pub fn new(name: impl Into<String>, draws: Vec<f64>) -> Result<Self> {
        Self::with_levels(name, draws, &DEFAULT_LEVELS)
    }

    pub fn with_levels(name: impl Into<String>, draws: Vec<f64>, levels: &[f64]) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Shape("estimand has no draws".into()));
        }
        let mut intervals = BTreeMap::new();
        if draws.len() >= 2 {
            let s = sorted(&draws);
            for &level in levels {
                intervals.insert(level_key(level), interval_sorted(&s, level)?);
            }
        }
        Ok(EstimandPosterior {
            name: name.into(),
            point: mean(&draws),
            draws,
            intervals,
        })
    }

    pub fn interval(&self, level: f64) -> Option<(f64, f64)> {
        self.intervals.get(&level_key(level)).copied()
    }
}

fn level_key(level: f64) -> u32 {
    (level * 1000.0).round() as u32
}

/// Equal-tailed interval from linear-interpolation quantiles.
pub fn equal_tailed_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() < 2 {
        return Err(Error::Shape("an interval needs at least two draws".into()));
    }
    interval_sorted(&sorted(draws), level)
}

fn interval_sorted(s: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level {level} is outside (0, 1)")));
    }
    Ok((
        quantile_sorted(s, (1.0 - level) / 2.0),
        quantile_sorted(s, (1.0 + level) / 2.0),
    ))
}

/// Per-draw mean over units of a draws × n row-major matrix.
pub fn row_means(rows: &[f64], n: usize) -> Vec<f64> {
    rows.chunks(n).map(mean).collect()
}

/// ATE posterior from a row-major draws × n matrix of natural-unit τ.
pub fn ate_from_matrix(tau: &[f64], n: usize) -> Result<EstimandPosterior> {
    if n == 0 || tau.is_empty() {
        return Err(Error::Shape("no τ draws".into()));
    }
    EstimandPosterior::new("ATE", row_means(tau, n))
}

/// Row-major natural-unit τ draws.
pub fn tau_matrix_natural(draws: &PosteriorDraws) -> Vec<f64> {
    let f = draws.standardization().slope_factor();
    draws.tau.iter().map(|t| t * f).collect()
}

pub fn posterior_ate(draws: &PosteriorDraws) -> Result<EstimandPosterior> {
    ate_from_matrix(&tau_matrix_natural(draws), draws.n)
}

/// A labeled partition of units.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    pub names: Vec<String>,
    /// Group index per unit.
    pub codes: Vec<u32>,
}

impl Groups {
    pub fn single(n: usize) -> Self {
        Groups { names: vec!["all".into()], codes: vec![0; n] }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.names.len()];
        for &c in &self.codes {
            s[c as usize] += 1;
        }
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.names.len()];
        for (i, &c) in self.codes.iter().enumerate() {
            m[c as usize].push(i);
        }
        m
    }
}

/// Per-group τ means per draw over a row-major draws × n matrix.
pub fn group_ate_from_matrix(tau: &[f64], n: usize, groups: &Groups) -> Result<Vec<EstimandPosterior>> {
    if groups.codes.len() != n {
        return Err(Error::Shape(format!(
            "partition covers {} units, draws cover {n}",
            groups.codes.len()
        )));
    }
    if groups.codes.iter().any(|&c| c as usize >= groups.names.len()) {
        return Err(Error::Shape("group code out of range".into()));
    }
    let members = groups.members();
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroup(groups.names[k].clone()));
    }
    members
        .iter()
        .zip(&groups.names)
        .map(|(idx, name)| {
            let d: Vec<f64> = tau
                .chunks(n)
                .map(|row| idx.iter().map(|&i| row[i]).sum::<f64>() / idx.len() as f64)
                .collect();
            EstimandPosterior::new(name.clone(), d)
        })
        .collect()
}

pub fn group_ate(draws: &PosteriorDraws, groups: &Groups) -> Result<Vec<EstimandPosterior>> {
    group_ate_from_matrix(&tau_matrix_natural(draws), draws.n, groups)
}

/// CATE between two exposure levels: τ·(z_hi − z_lo) per draw.
pub fn finite_difference_cate(tau_draws: &[f64], z_hi: f64, z_lo: f64) -> Result<EstimandPosterior> {
    let dz = z_hi - z_lo;
    EstimandPosterior::new(
        format!("CATE({z_lo}->{z_hi})"),
        tau_draws.iter().map(|t| t * dz).collect(),
    )
}

/// CSV table: name, mean, lo50, hi50, lo95, hi95, n_draws.
pub fn write_estimand_table<W: Write>(rows: &[EstimandPosterior], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "mean", "lo50", "hi50", "lo95", "hi95", "n_draws"])?;
    let nan = (f64::NAN, f64::NAN);
    for r in rows {
        let (l50, h50) = r.interval(0.5).unwrap_or(nan);
        let (l95, h95) = r.interval(0.95).unwrap_or(nan);
        w.write_record([
            r.name.clone(),
            r.point.to_string(),
            l50.to_string(),
            h50.to_string(),
            l95.to_string(),
            h95.to_string(),
            r.draws.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<estimand table>", e))?;
    Ok(())
}
