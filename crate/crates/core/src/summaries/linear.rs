//! Linear comparators: the ATE as the exposure coefficient of a linear
//! projection of each fitted surface, and a flat-prior linear refit of y.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

use super::check_rank;
use crate::dataset::{ColumnData, CovariateKind, PanelDataset, Role};
use crate::error::{Error, Result};
use crate::estimands::EstimandPosterior;
use crate::par::{map_indexed, Execution};
use crate::sampler::PosteriorDraws;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDesign {
    pub names: Vec<String>,
    /// n × p.
    pub x: DMatrix<f64>,
    /// Index of the exposure column.
    pub z_column: usize,
}

impl LinearDesign {
    /// Builds from named columns; `z_name` must be one of them.
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, z_name: &str) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if names.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("linear design columns are ragged".into()));
        }
        let z_column = names
            .iter()
            .position(|s| s == z_name)
            .ok_or_else(|| Error::Shape(format!("no column named {z_name}")))?;
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        Ok(LinearDesign { names, x, z_column })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Row of (XᵀX)⁻¹Xᵀ that yields the exposure coefficient.
    fn z_weights(&self) -> Result<(DVector<f64>, f64)> {
        check_rank(&self.x, &self.names)?;
        let xtx = self.x.transpose() * &self.x;
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::RankDeficient { columns: self.names.clone() })?;
        let mut e = DVector::zeros(self.x.ncols());
        e[self.z_column] = 1.0;
        let v = chol.solve(&e);
        Ok((&self.x * &v, v[self.z_column]))
    }
}

/// Intercept, control covariates (categoricals as dummies minus the first
/// level), unit and time dummies minus their first level, then the exposure,
/// all in natural units.
pub fn linear_design(data: &PanelDataset) -> Result<LinearDesign> {
    let n = data.n();
    let mut names = vec!["(intercept)".to_string()];
    let mut cols = vec![vec![1.0; n]];
    let dummies = |name: &str, levels: &[String], codes: &[u32], names: &mut Vec<String>, cols: &mut Vec<Vec<f64>>| {
        for (k, level) in levels.iter().enumerate().skip(1) {
            names.push(format!("{name}={level}"));
            cols.push(codes.iter().map(|&c| f64::from(c as usize == k)).collect());
        }
    };
    for cov in data.covariates.iter().filter(|c| c.spec.has_role(Role::Control)) {
        match (&cov.data, &cov.spec.kind) {
            (ColumnData::Numeric(v), _) => {
                names.push(cov.spec.name.clone());
                cols.push(v.clone());
            }
            (ColumnData::Categorical(codes), CovariateKind::Categorical { levels }) => {
                dummies(&cov.spec.name, levels, codes, &mut names, &mut cols)
            }
            _ => unreachable!("validated dataset"),
        }
    }
    if let Some(unit) = &data.unit {
        dummies(&unit.name, &unit.levels, &unit.codes, &mut names, &mut cols);
    }
    if let Some((name, t)) = &data.time {
        let f = crate::dataset::Factor::from_labels(name.clone(), &t.iter().map(|v| format!("{v}")).collect::<Vec<_>>());
        // numeric order of periods, not lexical
        let mut levels: Vec<(f64, usize)> = f
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| (l.parse::<f64>().unwrap_or(f64::NAN), k))
            .collect();
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(value, _) in levels.iter().skip(1) {
            names.push(format!("{name}={value}"));
            cols.push(t.iter().map(|v| f64::from(*v == value)).collect());
        }
    }
    let z_name = data.exposure_name.clone();
    names.push(z_name.clone());
    cols.push(data.z.clone());
    LinearDesign::new(names, cols, &z_name)
}

/// Per draw, the exposure coefficient of the OLS projection of
/// `μ(xᵢ) + τ(xᵢ)·zᵢ` (natural units) onto the design.
pub fn project_linear_ate(draws: &PosteriorDraws, design: &LinearDesign) -> Result<EstimandPosterior> {
    if design.n() != draws.n {
        return Err(Error::Shape("design rows differ from draw width".into()));
    }
    let (w, _) = design.z_weights()?;
    let z = design.x.column(design.z_column);
    let ate = map_indexed(draws.num_draws(), Execution::default(), |d| {
        let mu = draws.mu_natural(d);
        let tau = draws.tau_natural(d);
        (0..draws.n).map(|i| w[i] * (mu[i] + tau[i] * z[i])).sum::<f64>()
    });
    EstimandPosterior::new("ATE (linear projection)", ate)
}

/// As [`project_linear_ate`] on row-major natural-unit matrices.
pub fn project_linear_ate_matrix(mu: &[f64], tau: &[f64], design: &LinearDesign) -> Result<EstimandPosterior> {
    let n = design.n();
    if n == 0 || mu.len() != tau.len() || mu.len() % n != 0 {
        return Err(Error::Shape("surface draws do not match the design".into()));
    }
    let (w, _) = design.z_weights()?;
    let z = design.x.column(design.z_column);
    let ate = mu
        .chunks(n)
        .zip(tau.chunks(n))
        .map(|(m, t)| (0..n).map(|i| w[i] * (m[i] + t[i] * z[i])).sum::<f64>())
        .collect();
    EstimandPosterior::new("ATE (linear projection)", ate)
}

/// Exposure-coefficient posterior of `y ~ X` under a flat prior on the
/// coefficients and p(σ²) ∝ 1/σ²: β̂_z + √(s²·V_zz)·t_{n−p}.
pub fn refit_linear_flat(y: &[f64], design: &LinearDesign, num_draws: usize, seed: u64) -> Result<EstimandPosterior> {
    let n = design.n();
    let p = design.x.ncols();
    if y.len() != n {
        return Err(Error::Shape("outcome length differs from design".into()));
    }
    if n <= p {
        return Err(Error::Shape(format!("{n} rows cannot support {p} coefficients")));
    }
    let (w, v_zz) = design.z_weights()?;
    let yv = DVector::from_column_slice(y);
    let xtx = design.x.transpose() * &design.x;
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { columns: design.names.clone() })?
        .solve(&(design.x.transpose() * &yv));
    let rss = (&yv - &design.x * &beta).norm_squared();
    let df = (n - p) as f64;
    let scale = (rss / df * v_zz).sqrt();
    let centre = w.dot(&yv);
    let t = StudentT::new(df).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (0..num_draws).map(|_| centre + scale * t.sample(&mut rng)).collect();
    EstimandPosterior::new("ATE (flat linear refit)", d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn design_xz(x: &[f64], z: &[f64]) -> LinearDesign {
        LinearDesign::new(
            vec!["(intercept)".into(), "x".into(), "z".into()],
            vec![vec![1.0; x.len()], x.to_vec(), z.to_vec()],
            "z",
        )
        .unwrap()
    }

    #[test]
    fn linear_surface_projects_to_its_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = design_xz(&x, &z);
        let mu: Vec<f64> = (0..2 * n).map(|k| 1.0 + 2.0 * x[k % n]).collect();
        let tau: Vec<f64> = (0..2 * n).map(|k| if k < n { 0.7 } else { -1.3 }).collect();
        let ate = project_linear_ate_matrix(&mu, &tau, &d).unwrap();
        assert!((ate.draws[0] - 0.7).abs() < 1e-12);
        assert!((ate.draws[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_exposure_projects_to_zero() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let z = [1.0, 1.0, -1.0, -1.0];
        let d = design_xz(&x, &z);
        let mu = [0.5, -0.5, 0.5, -0.5];
        let ate = project_linear_ate_matrix(&mu, &[0.0; 4], &d).unwrap();
        assert!(ate.draws[0].abs() < 1e-15);
    }

    #[test]
    fn flat_refit_centres_on_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = z.iter().map(|v| 2.0 * v + 1e-3 * rng.gen_range(-1.0..1.0)).collect();
        let d = LinearDesign::new(vec!["(intercept)".into(), "z".into()], vec![vec![1.0; n], z.clone()], "z").unwrap();
        let (_, slope) = crate::stats::simple_ols(&z, &y).unwrap();
        let post = refit_linear_flat(&y, &d, 20_000, 3).unwrap();
        let se = crate::stats::sample_sd(&post.draws) / (20_000f64).sqrt();
        assert!((post.point - slope).abs() < 5.0 * se + 1e-12);
    }

    #[test]
    fn one_residual_degree_of_freedom() {
        let z = [0.0, 1.0, 3.0];
        let y = [0.1, 0.9, 3.2];
        let d = LinearDesign::new(vec!["(intercept)".into(), "z".into()], vec![vec![1.0; 3], z.to_vec()], "z").unwrap();
        let post = refit_linear_flat(&y, &d, 1000, 1).unwrap();
        let (lo, hi) = post.interval(0.95).unwrap();
        assert!(lo.is_finite() && hi.is_finite() && lo < hi);
        let d2 = LinearDesign::new(vec!["(intercept)".into(), "z".into()], vec![vec![1.0; 2], vec![0.0, 1.0]], "z").unwrap();
        assert!(refit_linear_flat(&[0.0, 1.0], &d2, 10, 1).is_err());
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let z = [0.0, 1.0, 3.0, 4.0];
        let d = LinearDesign::new(
            vec!["(intercept)".into(), "z".into(), "z2".into()],
            vec![vec![1.0; 4], z.to_vec(), z.to_vec()],
            "z",
        )
        .unwrap();
        match refit_linear_flat(&[1.0, 2.0, 3.0, 5.0], &d, 10, 1) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["z2".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn projection_is_tighter_than_refit() {
        // denoised surface vs noisy outcome on the same design
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = design_xz(&x, &z);
        let y: Vec<f64> = (0..n).map(|i| x[i] - 0.2 * z[i] + rng.gen_range(-1.0..1.0)).collect();
        let draws = 200;
        let mut mu = Vec::new();
        let mut tau = Vec::new();
        for _ in 0..draws {
            let s: f64 = -0.2 + 0.01 * rng.gen_range(-1.0..1.0);
            mu.extend(x.iter().copied());
            tau.extend(std::iter::repeat(s).take(n));
        }
        let proj = project_linear_ate_matrix(&mu, &tau, &d).unwrap();
        let refit = refit_linear_flat(&y, &d, draws, 5).unwrap();
        assert!(crate::stats::sample_sd(&proj.draws) < crate::stats::sample_sd(&refit.draws));
    }
}
