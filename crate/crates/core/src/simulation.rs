//! Synthetic experiments with a quadratic exposure effect.
//!
//! `y = x/2 + h(z) + ε` with `h(z) = (z + 1)²/2 + 1/4`, `x ~ N(0, 1)`,
//! `z' | x ~ N(b·x − 1, 1)` and `z = z' / sd(z')` (scaled, not recentered).
//! A linear-effect variant `y = x/2 + (c₀ + c₁·x)·z + ε` serves as a positive
//! control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, CovariateSpec, ColumnData, PanelDataset, Role};
use crate::diagnostics::{grid_over, loess, run_diagnostics, DiagnosticsReport, DEFAULT_SPAN};
use crate::error::{Error, Result};
use crate::estimands::{posterior_ate, EstimandPosterior};
use crate::sampler::{run_chains, ModelInputs, PosteriorDraws, SamplerConfig};
use crate::stats::{mean, quantile_sorted, sample_sd, sorted, spearman};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// The quadratic `h(z)` of the synthetic study.
    Quadratic,
    /// `τ(x) = c0 + c1·x`, exposure drawn as in the unconfounded case.
    Linear { c0: f64, c1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub b: f64,
    pub n: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub effect: Effect,
}

impl SimulationScenario {
    pub fn quadratic_case(case: u32, seed: u64) -> Result<Self> {
        let b = match case {
            1 => 0.0,
            2 => 1.0,
            other => return Err(Error::Config(format!("unknown simulation case {other} (expected 1 or 2)"))),
        };
        Ok(SimulationScenario { b, n: 1000, seed, noise_sd: 0.5, effect: Effect::Quadratic })
    }

    pub fn linear_control(seed: u64) -> Self {
        SimulationScenario {
            b: 0.0,
            n: 1000,
            seed,
            noise_sd: 0.5,
            effect: Effect::Linear { c0: -0.2, c1: 0.1 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("simulation needs n ≥ 2".into()));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        Ok(())
    }
}

pub fn h(z: f64) -> f64 {
    (z + 1.0) * (z + 1.0) / 2.0 + 0.25
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub mu_true: Vec<f64>,
    /// Exposure part of the outcome: `h(z)` or `τ(x)·z`.
    pub exposure_part: Vec<f64>,
    /// Local slope in z: `z + 1` or `τ(x)`.
    pub slope_true: Vec<f64>,
    /// `τ(x)` when the effect is linear in z.
    pub tau_true: Option<Vec<f64>>,
    pub noise: Vec<f64>,
}

/// Pure function of the scenario: x first, then z', then ε.
pub fn generate_synthetic(s: &SimulationScenario) -> Result<SyntheticData> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let n = s.n;
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let x: Vec<f64> = (0..n).map(|_| normal()).collect();
    let zp: Vec<f64> = x.iter().map(|xi| s.b * xi - 1.0 + normal()).collect();
    let eps: Vec<f64> = (0..n).map(|_| s.noise_sd * normal()).collect();
    let sd = sample_sd(&zp);
    let z: Vec<f64> = zp.iter().map(|v| v / sd).collect();
    let mu_true: Vec<f64> = x.iter().map(|v| v / 2.0).collect();
    let (exposure_part, slope_true, tau_true) = match s.effect {
        Effect::Quadratic => (
            z.iter().map(|&v| h(v)).collect::<Vec<_>>(),
            z.iter().map(|v| v + 1.0).collect(),
            None,
        ),
        Effect::Linear { c0, c1 } => {
            let tau: Vec<f64> = x.iter().map(|v| c0 + c1 * v).collect();
            (
                tau.iter().zip(&z).map(|(t, v)| t * v).collect(),
                tau.clone(),
                Some(tau),
            )
        }
    };
    let y = (0..n).map(|i| mu_true[i] + exposure_part[i] + eps[i]).collect();
    Ok(SyntheticData { x, z, y, mu_true, exposure_part, slope_true, tau_true, noise: eps })
}

/// The synthetic sample as a panel with `x` in both roles.
pub fn to_panel(data: &SyntheticData) -> PanelDataset {
    PanelDataset {
        outcome_name: "y".into(),
        exposure_name: "z".into(),
        y: data.y.clone(),
        z: data.z.clone(),
        covariates: vec![Covariate {
            spec: CovariateSpec::numeric("x", &[Role::Control, Role::Moderator]),
            data: ColumnData::Numeric(data.x.clone()),
        }],
        unit: None,
        time: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    /// RMSE of the posterior-mean μ̂ against the true μ(x) = x/2.
    pub mu_rmse: f64,
    pub tau_mean: f64,
    pub tau_sd: f64,
    /// Spearman correlation of τ̂ with x; absent when τ̂ is constant.
    pub spearman: Option<f64>,
    /// Max gap between the partial-residual loess and h(z) on the central
    /// 90% of z, after matching their means (quadratic effect only).
    pub smoother_gap: Option<f64>,
    /// RMSE of τ̂ against τ(x) (linear effect only).
    pub tau_rmse: Option<f64>,
    /// x where τ̂ turns from positive to negative, if it does.
    pub sign_change_x: Option<f64>,
    pub ate_mean: f64,
    pub ate_lo95: f64,
    pub ate_hi95: f64,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Changepoint `c` of the sign step (`+` below `c` and `−` above, or the
/// reverse, whichever fits better) with the fewest disagreements with the
/// sign of τ̂; tied optima are averaged. `None` if τ̂ never changes sign.
pub fn sign_change_point(x: &[f64], tau_hat: &[f64]) -> Option<f64> {
    let down = step_fit(x, tau_hat, true)?;
    let up = step_fit(x, tau_hat, false)?;
    Some(if up.0 < down.0 { up.1 } else { down.1 })
}

/// (disagreements, changepoint) of the best step with the given orientation.
fn step_fit(x: &[f64], tau_hat: &[f64], positive_first: bool) -> Option<(usize, f64)> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let first = |t: f64| if positive_first { t > 0.0 } else { t <= 0.0 };
    let pos = tau_hat.iter().filter(|t| **t > 0.0).count();
    if pos == 0 || pos == tau_hat.len() {
        return None;
    }
    let cut_at = |k: usize| match k {
        0 => x[idx[0]],
        k if k == idx.len() => x[idx[k - 1]],
        k => 0.5 * (x[idx[k - 1]] + x[idx[k]]),
    };
    // errors(c after k points) = wrong-signed among the first k + among the rest
    let mut err = tau_hat.iter().filter(|t| first(**t)).count();
    let mut best = (usize::MAX, Vec::new());
    for k in 0..=idx.len() {
        if k > 0 {
            if first(tau_hat[idx[k - 1]]) {
                err -= 1;
            } else {
                err += 1;
            }
        }
        let boundary_ok = k == 0 || k == idx.len() || x[idx[k - 1]] < x[idx[k]];
        if !boundary_ok {
            continue;
        }
        if err < best.0 {
            best = (err, vec![cut_at(k)]);
        } else if err == best.0 {
            best.1.push(cut_at(k));
        }
    }
    Some((best.0, mean(&best.1)))
}

/// Max |loess(r̂) − h| over the central 90% of z after removing the mean
/// difference on that range. The intercept is shared between μ and h and is
/// not identified, so only the shape is compared.
pub fn smoother_gap_to_h(residuals: &[f64], z: &[f64], h_of: impl Fn(f64) -> f64) -> Result<f64> {
    let s = sorted(z);
    let (lo, hi) = (quantile_sorted(&s, 0.05), quantile_sorted(&s, 0.95));
    let grid: Vec<f64> = grid_over(&[lo, hi], 100);
    let fitted = loess(z, residuals, DEFAULT_SPAN, &grid)?;
    let diff: Vec<f64> = grid.iter().zip(&fitted).map(|(g, f)| f - h_of(*g)).collect();
    let shift = mean(&diff);
    Ok(diff.iter().map(|d| (d - shift).abs()).fold(0.0, f64::max))
}

/// Posterior-mean μ̂ and τ̂ per unit, natural units.
pub fn posterior_means(draws: &PosteriorDraws) -> (Vec<f64>, Vec<f64>) {
    (draws.mu_mean_natural(), draws.tau_mean_natural())
}

pub fn recovery_metrics(draws: &PosteriorDraws, truth: &SyntheticData) -> Result<RecoveryMetrics> {
    if draws.n != truth.x.len() {
        return Err(Error::Shape("draws and truth differ in length".into()));
    }
    let (mu_hat, tau_hat) = posterior_means(draws);
    let ate = posterior_ate(draws)?;
    metrics_from_fits(&mu_hat, &tau_hat, &ate, truth)
}

pub fn metrics_from_fits(
    mu_hat: &[f64],
    tau_hat: &[f64],
    ate: &EstimandPosterior,
    truth: &SyntheticData,
) -> Result<RecoveryMetrics> {
    let residuals = crate::diagnostics::partial_residuals(&truth.y, mu_hat)?;
    let quadratic = truth.tau_true.is_none();
    let (lo, hi) = ate.interval(0.95).unwrap_or((ate.point, ate.point));
    Ok(RecoveryMetrics {
        mu_rmse: rmse(mu_hat, &truth.mu_true),
        tau_mean: mean(tau_hat),
        tau_sd: sample_sd(tau_hat),
        spearman: spearman(tau_hat, &truth.x),
        smoother_gap: if quadratic && truth.z.len() >= 10 {
            Some(smoother_gap_to_h(&residuals, &truth.z, h)?)
        } else {
            None
        },
        tau_rmse: truth.tau_true.as_ref().map(|t| rmse(tau_hat, t)),
        sign_change_x: sign_change_point(&truth.x, tau_hat),
        ate_mean: ate.point,
        ate_lo95: lo,
        ate_hi95: hi,
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub data: SyntheticData,
    pub draws: PosteriorDraws,
    pub metrics: RecoveryMetrics,
    pub diagnostics: DiagnosticsReport,
}

/// Generate, fit, and evaluate one scenario.
pub fn run_scenario(s: &SimulationScenario, config: &SamplerConfig) -> Result<ScenarioRun> {
    let data = generate_synthetic(s)?;
    let inputs = ModelInputs::from_panel(&to_panel(&data))?;
    let draws = run_chains(&inputs, config)?;
    let metrics = recovery_metrics(&draws, &data)?;
    let (mu_hat, tau_hat) = posterior_means(&draws);
    let diagnostics = run_diagnostics(&data.y, &mu_hat, &data.z, &tau_hat, None, DEFAULT_SPAN)?;
    Ok(ScenarioRun { data, draws, metrics, diagnostics })
}
