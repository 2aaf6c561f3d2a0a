//! Additive projection of τ draws:
//! `τ(x) ≈ α + Σ_s b_s·1(unit = s) + Σ_j h_j(x_j)`.
//!
//! Smoothing parameters are chosen once by GCV on the posterior-mean surface
//! and then frozen, so each draw is mapped by the same linear operator.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::check_rank;
use super::spline::{SplineBasis, DEFAULT_BASIS_DIM};
use crate::dataset::{ColumnData, CovariateKind, PanelDataset, Role};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::sampler::PosteriorDraws;
use crate::stats::{quantile_sorted, sorted};

/// Unpenalized indicator block with its reference level dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct DummyBlock {
    pub name: String,
    pub reference: String,
    pub levels: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTerm {
    pub basis: SplineBasis,
    pub x: Vec<f64>,
}

/// Covariate side of the additive summary. Holds no outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveSpec {
    pub n: usize,
    pub dummies: Vec<DummyBlock>,
    pub smooths: Vec<SmoothTerm>,
}

impl AdditiveSpec {
    pub fn new(n: usize) -> Self {
        AdditiveSpec { n, dummies: Vec::new(), smooths: Vec::new() }
    }

    /// Unit dummies, categorical moderators as dummies, and one smooth per
    /// numeric moderator and for time.
    pub fn from_panel(data: &PanelDataset) -> Result<Self> {
        let mut spec = AdditiveSpec::new(data.n());
        if let Some(unit) = &data.unit {
            spec.add_dummies(&unit.name, &unit.levels, &unit.codes)?;
        }
        for cov in data.covariates.iter().filter(|c| c.spec.has_role(Role::Moderator)) {
            match (&cov.data, &cov.spec.kind) {
                (ColumnData::Numeric(x), _) => spec.add_smooth(&cov.spec.name, x.clone())?,
                (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                    spec.add_dummies(&cov.spec.name, levels, codes)?
                }
                _ => unreachable!("validated dataset"),
            }
        }
        if let Some((name, t)) = &data.time {
            spec.add_smooth(name, t.clone())?;
        }
        Ok(spec)
    }

    /// Adds indicators for every level but the first (the reference).
    pub fn add_dummies(&mut self, name: &str, levels: &[String], codes: &[u32]) -> Result<()> {
        if codes.len() != self.n {
            return Err(Error::Shape(format!("{name}: {} codes for {} units", codes.len(), self.n)));
        }
        if levels.is_empty() {
            return Err(Error::Shape(format!("{name} has no levels")));
        }
        let columns = (1..levels.len())
            .map(|k| codes.iter().map(|&c| f64::from(c as usize == k)).collect())
            .collect();
        self.dummies.push(DummyBlock {
            name: name.to_string(),
            reference: levels[0].clone(),
            levels: levels[1..].to_vec(),
            columns,
        });
        Ok(())
    }

    pub fn add_smooth(&mut self, name: &str, x: Vec<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape(format!("{name}: {} values for {} units", x.len(), self.n)));
        }
        let basis = SplineBasis::build(name, &x, DEFAULT_BASIS_DIM)?;
        self.smooths.push(SmoothTerm { basis, x });
        Ok(())
    }

    /// Column names in design order.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["(intercept)".to_string()];
        for d in &self.dummies {
            names.extend(d.levels.iter().map(|l| format!("{}={l}", d.name)));
        }
        for s in &self.smooths {
            names.extend((1..=s.basis.dim()).map(|k| format!("s({}).{k}", s.basis.name)));
        }
        names
    }

    fn num_dummy_columns(&self) -> usize {
        self.dummies.iter().map(|d| d.columns.len()).sum()
    }

    /// Column offset of smooth `j`.
    fn smooth_offset(&self, j: usize) -> usize {
        1 + self.num_dummy_columns() + self.smooths[..j].iter().map(|s| s.basis.dim()).sum::<usize>()
    }

    pub fn ncols(&self) -> usize {
        self.smooth_offset(self.smooths.len())
    }

    fn design(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut x = DMatrix::zeros(n, self.ncols());
        x.column_mut(0).fill(1.0);
        let mut c = 1;
        for d in &self.dummies {
            for col in &d.columns {
                x.column_mut(c).copy_from_slice(col);
                c += 1;
            }
        }
        for s in &self.smooths {
            let b = s.basis.design(&s.x);
            x.view_mut((0, c), (n, b.ncols())).copy_from(&b);
            c += b.ncols();
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPolicy {
    /// Coordinate search of GCV over a log grid, on the posterior mean.
    Gcv,
    /// One value per smooth term, on the normalized penalty scale.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveSummaryFit {
    pub spec: AdditiveSpec,
    pub column_names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub num_draws: usize,
    /// Row-major draws × columns.
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialEffectCurve {
    pub name: String,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo90: Vec<f64>,
    pub hi90: Vec<f64>,
    /// max − min of the posterior-mean curve.
    pub span: f64,
}

impl AdditiveSummaryFit {
    fn p(&self) -> usize {
        self.column_names.len()
    }

    pub fn draw(&self, d: usize) -> &[f64] {
        &self.coefficients[d * self.p()..(d + 1) * self.p()]
    }

    pub fn intercept(&self, d: usize) -> f64 {
        self.draw(d)[0]
    }

    /// Coefficient of `block=level` in draw `d`; 0 for the reference level.
    pub fn dummy(&self, d: usize, block: &str, level: &str) -> Option<f64> {
        let mut off = 1;
        for b in &self.spec.dummies {
            if b.name == block {
                if b.reference == level {
                    return Some(0.0);
                }
                return b.levels.iter().position(|l| l == level).map(|k| self.draw(d)[off + k]);
            }
            off += b.columns.len();
        }
        None
    }

    /// Smooth `j` evaluated at `x` for draw `d`.
    pub fn smooth_values(&self, j: usize, d: usize, x: &[f64]) -> Vec<f64> {
        let basis = &self.spec.smooths[j].basis;
        let off = self.spec.smooth_offset(j);
        let coef = DVector::from_column_slice(&self.draw(d)[off..off + basis.dim()]);
        (basis.design(x) * coef).iter().copied().collect()
    }

    /// Posterior curves of every smooth on an evenly spaced grid over its
    /// observed range.
    pub fn partial_effects(&self, grid_points: usize) -> Vec<PartialEffectCurve> {
        (0..self.spec.smooths.len())
            .map(|j| {
                let s = &self.spec.smooths[j];
                let lo = s.x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = s.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m = grid_points.max(2);
                let grid: Vec<f64> = (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect();
                let basis = s.basis.design(&grid);
                let off = self.spec.smooth_offset(j);
                let dim = s.basis.dim();
                let mut per_point = vec![Vec::with_capacity(self.num_draws); m];
                for d in 0..self.num_draws {
                    let coef = DVector::from_column_slice(&self.draw(d)[off..off + dim]);
                    for (g, v) in (&basis * coef).iter().enumerate() {
                        per_point[g].push(*v);
                    }
                }
                let mut mean = Vec::with_capacity(m);
                let mut lo90 = Vec::with_capacity(m);
                let mut hi90 = Vec::with_capacity(m);
                for vals in &per_point {
                    let sv = sorted(vals);
                    mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
                    lo90.push(quantile_sorted(&sv, 0.05));
                    hi90.push(quantile_sorted(&sv, 0.95));
                }
                let span = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - mean.iter().copied().fold(f64::INFINITY, f64::min);
                PartialEffectCurve { name: s.basis.name.clone(), grid, mean, lo90, hi90, span }
            })
            .collect()
    }
}

const LOG10_LAMBDA_GRID: (f64, f64, usize) = (-8.0, 8.0, 33);
const GCV_PASSES: usize = 3;
const DRAW_BLOCK: usize = 256;

/// Projects every draw of natural-unit τ onto the additive family.
pub fn fit_additive_summary(
    draws: &PosteriorDraws,
    spec: &AdditiveSpec,
    policy: &LambdaPolicy,
) -> Result<AdditiveSummaryFit> {
    let tau = crate::estimands::tau_matrix_natural(draws);
    fit_additive_matrix(&tau, draws.n, spec, policy, Execution::default())
}

/// As [`fit_additive_summary`] on a row-major draws × n matrix.
pub fn fit_additive_matrix(
    tau: &[f64],
    n: usize,
    spec: &AdditiveSpec,
    policy: &LambdaPolicy,
    execution: Execution,
) -> Result<AdditiveSummaryFit> {
    if n != spec.n || n == 0 || tau.len() % n != 0 || tau.is_empty() {
        return Err(Error::Shape("τ draws do not match the additive design".into()));
    }
    let names = spec.column_names();
    let x = spec.design();
    check_rank(&x, &names)?;
    let num_draws = tau.len() / n;
    let xtx = x.transpose() * &x;
    let penalties = normalized_penalties(spec, &xtx);

    let lambdas = match policy {
        LambdaPolicy::Fixed(l) => {
            if l.len() != spec.smooths.len() || l.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!(
                    "{} nonnegative smoothing parameters expected",
                    spec.smooths.len()
                )));
            }
            l.clone()
        }
        LambdaPolicy::Gcv => {
            let mut mean = DVector::zeros(n);
            for row in tau.chunks(n) {
                mean += DVector::from_column_slice(row);
            }
            mean /= num_draws as f64;
            select_lambdas_gcv(&x, &xtx, &penalties, &mean)
        }
    };

    let a = penalized_gram(&xtx, &penalties, &lambdas);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { columns: names.clone() })?;
    // M = (XᵀX + S_λ)⁻¹ Xᵀ, shared by every draw
    let m = chol.solve(&x.transpose());
    let p = names.len();
    let blocks = map_indexed(num_draws.div_ceil(DRAW_BLOCK), execution, |b| {
        let lo = b * DRAW_BLOCK;
        let hi = (lo + DRAW_BLOCK).min(num_draws);
        let t = DMatrix::from_column_slice(n, hi - lo, &tau[lo * n..hi * n]);
        let coef = &m * t;
        let mut out = Vec::with_capacity((hi - lo) * p);
        for c in coef.column_iter() {
            out.extend(c.iter());
        }
        out
    });
    Ok(AdditiveSummaryFit {
        spec: spec.clone(),
        column_names: names,
        lambdas,
        num_draws,
        coefficients: blocks.concat(),
    })
}

/// Penalties embedded at full size, each scaled to the Frobenius norm of its
/// block of XᵀX so that λ is comparable across terms.
fn normalized_penalties(spec: &AdditiveSpec, xtx: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let p = xtx.nrows();
    (0..spec.smooths.len())
        .map(|j| {
            let s = &spec.smooths[j].basis.penalty;
            let off = spec.smooth_offset(j);
            let d = s.nrows();
            let block_norm = xtx.view((off, off), (d, d)).norm();
            let s_norm = s.norm();
            let scale = if s_norm > 0.0 { block_norm / s_norm } else { 0.0 };
            let mut full = DMatrix::zeros(p, p);
            full.view_mut((off, off), (d, d)).copy_from(&(s * scale));
            full
        })
        .collect()
}

fn penalized_gram(xtx: &DMatrix<f64>, penalties: &[DMatrix<f64>], lambdas: &[f64]) -> DMatrix<f64> {
    let mut a = xtx.clone();
    for (s, l) in penalties.iter().zip(lambdas) {
        a += s * *l;
    }
    a
}

fn gcv_score(x: &DMatrix<f64>, xtx: &DMatrix<f64>, xty: &DVector<f64>, y: &DVector<f64>, a: DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let Some(chol) = a.cholesky() else {
        return f64::INFINITY;
    };
    let beta = chol.solve(xty);
    let rss = (y - x * &beta).norm_squared();
    let edf = chol.solve(xtx).trace();
    let denom = n - edf;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    n * rss / (denom * denom)
}

fn select_lambdas_gcv(
    x: &DMatrix<f64>,
    xtx: &DMatrix<f64>,
    penalties: &[DMatrix<f64>],
    y: &DVector<f64>,
) -> Vec<f64> {
    let (lo, hi, steps) = LOG10_LAMBDA_GRID;
    let grid: Vec<f64> = (0..steps)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (steps - 1) as f64))
        .collect();
    let xty = x.transpose() * y;
    let mut lambdas = vec![1.0; penalties.len()];
    for _ in 0..GCV_PASSES {
        let before = lambdas.clone();
        for j in 0..penalties.len() {
            let mut best = (f64::INFINITY, lambdas[j]);
            for &cand in &grid {
                lambdas[j] = cand;
                let score = gcv_score(x, xtx, &xty, y, penalized_gram(xtx, penalties, &lambdas));
                if score < best.0 {
                    best = (score, cand);
                }
            }
            lambdas[j] = best.1;
        }
        if lambdas == before {
            break;
        }
    }
    lambdas
}
