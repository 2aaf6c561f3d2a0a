//! Linearity check: cluster units by posterior-mean effect, then compare the
//! partial residuals `y − μ̂` against straight lines in the exposure within
//! each cluster, plus a global loess smoother.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimands::Groups;
use crate::stats::{mean, sample_sd, sorted};

/// Elementwise `y − μ̂`.
pub fn partial_residuals(y: &[f64], mu_hat: &[f64]) -> Result<Vec<f64>> {
    if y.len() != mu_hat.len() {
        return Err(Error::Shape("outcome and control fit differ in length".into()));
    }
    Ok(y.iter().zip(mu_hat).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    /// Group per unit; group 0 has the smallest mean effect.
    pub labels: Vec<u32>,
    pub num_groups: usize,
    pub cut_height: f64,
}

impl Clustering {
    pub fn groups(&self) -> Groups {
        Groups {
            names: (1..=self.num_groups).map(|k| format!("g{k}")).collect(),
            codes: self.labels.clone(),
        }
    }
}

/// Complete-linkage clustering of 1-D effects, cut at `cut_height` (the
/// sample SD of τ̂ when `None`).
///
/// In one dimension complete-linkage clusters are intervals of the sorted
/// values, and the linkage between neighbours is the span of their union, so
/// the dendrogram is built by repeatedly merging the adjacent pair with the
/// smallest merged span (leftmost on ties).
pub fn cluster_effects(tau_hat: &[f64], cut_height: Option<f64>) -> Result<Clustering> {
    let n = tau_hat.len();
    if n < 2 {
        return Err(Error::Shape("clustering needs at least two units".into()));
    }
    let height = cut_height.unwrap_or_else(|| sample_sd(tau_hat));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tau_hat[a].total_cmp(&tau_hat[b]).then(a.cmp(&b)));
    let v: Vec<f64> = order.iter().map(|&i| tau_hat[i]).collect();
    // clusters as [start, end] index ranges into the sorted values
    let mut clusters: Vec<(usize, usize)> = (0..n).map(|k| (k, k)).collect();
    while clusters.len() > 1 {
        let (k, h) = clusters
            .windows(2)
            .enumerate()
            .map(|(k, w)| (k, v[w[1].1] - v[w[0].0]))
            .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        if h > height {
            break;
        }
        clusters[k].1 = clusters[k + 1].1;
        clusters.remove(k + 1);
    }
    let mut labels = vec![0u32; n];
    for (g, &(s, e)) in clusters.iter().enumerate() {
        for &i in &order[s..=e] {
            labels[i] = g as u32;
        }
    }
    Ok(Clustering { labels, num_groups: clusters.len(), cut_height: height })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLinearity {
    pub group: String,
    pub size: usize,
    /// Slope of the overall-ATE line through the origin.
    pub overall_slope: f64,
    /// Slope of the group-ATE line through the origin.
    pub group_slope: f64,
    /// With-intercept least-squares fit of r̂ on z (two or more distinct z).
    pub ols: Option<Line>,
    /// R² gain of adding a quadratic term to the OLS fit (three or more
    /// distinct z).
    pub nonlinearity: Option<f64>,
    /// Whether the group slope lies between the overall slope and the OLS
    /// slope.
    pub shrunk_toward_overall: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmootherCheck {
    pub grid: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Slope of the comparison line `τ̄·z`.
    pub line_slope: f64,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub clustering: Clustering,
    pub groups: Vec<GroupLinearity>,
    pub residuals: Vec<f64>,
    pub smoother: Option<SmootherCheck>,
}

/// R² of least squares of `y` on polynomial terms of `z` up to `degree`.
fn poly_r2(z: &[f64], y: &[f64], degree: usize) -> Option<f64> {
    let n = z.len();
    let p = degree + 1;
    if n < p {
        return None;
    }
    let zm = mean(z);
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| (z[i] - zm).powi(j as i32));
    let yv = nalgebra::DVector::from_column_slice(y);
    let beta = x.clone().svd(true, true).solve(&yv, 1e-12).ok()?;
    let ym = mean(y);
    let tss: f64 = y.iter().map(|v| (v - ym) * (v - ym)).sum();
    if tss <= 0.0 {
        return Some(1.0);
    }
    let rss = (yv - x * beta).norm_squared();
    Some((1.0 - rss / tss).clamp(0.0, 1.0))
}

fn distinct_count(z: &[f64]) -> usize {
    let mut s = sorted(z);
    s.dedup();
    s.len()
}

/// Per-group straight-line comparisons of partial residuals against z.
pub fn group_linearity_report(groups: &Groups, residuals: &[f64], z: &[f64], tau_hat: &[f64]) -> Result<Vec<GroupLinearity>> {
    let n = residuals.len();
    if z.len() != n || tau_hat.len() != n || groups.codes.len() != n {
        return Err(Error::Shape("diagnostic inputs differ in length".into()));
    }
    let overall = mean(tau_hat);
    Ok(groups
        .members()
        .iter()
        .zip(&groups.names)
        .map(|(idx, name)| {
            let r: Vec<f64> = idx.iter().map(|&i| residuals[i]).collect();
            let zg: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
            let group_slope = if idx.is_empty() { f64::NAN } else { idx.iter().map(|&i| tau_hat[i]).sum::<f64>() / idx.len() as f64 };
            let distinct = distinct_count(&zg);
            let ols = (distinct >= 2)
                .then(|| crate::stats::simple_ols(&zg, &r))
                .flatten()
                .map(|(intercept, slope)| Line { intercept, slope });
            let nonlinearity = (distinct >= 3)
                .then(|| Some(poly_r2(&zg, &r, 2)? - poly_r2(&zg, &r, 1)?))
                .flatten()
                .map(|g| g.max(0.0));
            let shrunk_toward_overall = ols.map(|l| {
                let (lo, hi) = if overall <= l.slope { (overall, l.slope) } else { (l.slope, overall) };
                group_slope >= lo && group_slope <= hi
            });
            GroupLinearity {
                group: name.clone(),
                size: idx.len(),
                overall_slope: overall,
                group_slope,
                ols,
                nonlinearity,
                shrunk_toward_overall,
            }
        })
        .collect())
}

pub const DEFAULT_SPAN: f64 = 0.75;
pub const DEFAULT_GRID: usize = 100;

/// Local quadratic regression with tricube weights at each point of `at`.
///
/// The bandwidth at `x` is the smallest distance that covers a `span`
/// fraction of the data, so duplicating every point leaves the curve
/// unchanged.
pub fn loess(z: &[f64], r: &[f64], span: f64, at: &[f64]) -> Result<Vec<f64>> {
    let n = z.len();
    if r.len() != n {
        return Err(Error::Shape("smoother inputs differ in length".into()));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::Config(format!("span {span} is outside (0, 1]")));
    }
    if n < 3 {
        return Err(Error::Shape("smoother needs at least three points".into()));
    }
    let q = ((span * n as f64).ceil() as usize).clamp(1, n);
    let mut dist = vec![0.0; n];
    at.iter()
        .map(|&x0| {
            for (d, zi) in dist.iter_mut().zip(z) {
                *d = (zi - x0).abs();
            }
            let mut sd = dist.clone();
            let (_, h, _) = sd.select_nth_unstable_by(q - 1, f64::total_cmp);
            let h = *h;
            let h = if h > 0.0 { h * (1.0 + 1e-10) } else { f64::MIN_POSITIVE };
            let mut m = [[0.0f64; 3]; 3];
            let mut b = [0.0f64; 3];
            for i in 0..n {
                let u = dist[i] / h;
                if u >= 1.0 {
                    continue;
                }
                let w = (1.0 - u * u * u).powi(3);
                let t = z[i] - x0;
                let basis = [1.0, t, t * t];
                for a in 0..3 {
                    b[a] += w * basis[a] * r[i];
                    for c in 0..3 {
                        m[a][c] += w * basis[a] * basis[c];
                    }
                }
            }
            Ok(solve_local(&m, &b))
        })
        .collect()
}

/// Intercept of the weighted local fit; drops to linear, then constant,
/// when the local design is singular.
fn solve_local(m: &[[f64; 3]; 3], b: &[f64; 3]) -> f64 {
    for p in (1..=3).rev() {
        let a = nalgebra::DMatrix::from_fn(p, p, |i, j| m[i][j]);
        let rhs = nalgebra::DVector::from_fn(p, |i, _| b[i]);
        let scale = a.diagonal().max();
        if let Some(sol) = a.clone().lu().solve(&rhs) {
            let det = a.determinant();
            if sol.iter().all(|v| v.is_finite()) && det.abs() > 1e-12 * scale.powi(p as i32) {
                return sol[0];
            }
        }
    }
    f64::NAN
}

/// Evenly spaced grid over `[min z, max z]`.
pub fn grid_over(z: &[f64], points: usize) -> Vec<f64> {
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = points.max(2);
    (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect()
}

/// Loess of all partial residuals on z, compared with the line `τ̄·z`.
pub fn global_smoother_check(residuals: &[f64], z: &[f64], line_slope: f64, span: f64) -> Result<SmootherCheck> {
    if residuals.len() < 10 {
        return Err(Error::Shape("smoother check needs at least ten points".into()));
    }
    let grid = grid_over(z, DEFAULT_GRID);
    let fitted = loess(z, residuals, span, &grid)?;
    let max_gap = grid
        .iter()
        .zip(&fitted)
        .map(|(g, f)| (f - line_slope * g).abs())
        .fold(0.0, f64::max);
    Ok(SmootherCheck { grid, fitted, line_slope, max_gap })
}

/// The full check: clustering, per-group lines and the global smoother.
pub fn run_diagnostics(
    y: &[f64],
    mu_hat: &[f64],
    z: &[f64],
    tau_hat: &[f64],
    cut_height: Option<f64>,
    span: f64,
) -> Result<DiagnosticsReport> {
    let residuals = partial_residuals(y, mu_hat)?;
    let clustering = cluster_effects(tau_hat, cut_height)?;
    let groups = group_linearity_report(&clustering.groups(), &residuals, z, tau_hat)?;
    let smoother = (residuals.len() >= 10)
        .then(|| global_smoother_check(&residuals, z, mean(tau_hat), span))
        .transpose()?;
    Ok(DiagnosticsReport { clustering, groups, residuals, smoother })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_examples() {
        assert!((partial_residuals(&[1.0], &[0.3]).unwrap()[0] - 0.7).abs() < 1e-15);
        assert_eq!(partial_residuals(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cluster_examples() {
        let c = cluster_effects(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], None).unwrap();
        assert!((c.cut_height - 0.5477).abs() < 1e-4);
        assert_eq!(c.labels, vec![0, 0, 0, 1, 1, 1]);
        let c = cluster_effects(&[2.0; 5], None).unwrap();
        assert_eq!(c.num_groups, 1);
        let c = cluster_effects(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert_eq!(c.labels, vec![1, 0, 1, 0, 0, 1]);
    }

    /// O(n³) agglomeration over all pairs with complete linkage.
    fn brute_force_clusters(v: &[f64], height: f64) -> Vec<Vec<usize>> {
        let mut clusters: Vec<Vec<usize>> = (0..v.len()).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let d = clusters[a]
                        .iter()
                        .flat_map(|&i| clusters[b].iter().map(move |&j| (v[i] - v[j]).abs()))
                        .fold(0.0, f64::max);
                    if best.map_or(true, |x| d < x.2) {
                        best = Some((a, b, d));
                    }
                }
            }
            match best {
                Some((a, b, d)) if d <= height => {
                    let moved = clusters.remove(b);
                    clusters[a].extend(moved);
                }
                _ => break,
            }
        }
        for c in &mut clusters {
            c.sort();
        }
        clusters.sort();
        clusters
    }

    proptest! {
        #[test]
        fn matches_brute_force(v in prop::collection::vec(-3.0f64..3.0, 2..25)) {
            let h = sample_sd(&v);
            let c = cluster_effects(&v, None).unwrap();
            let mut ours: Vec<Vec<usize>> = vec![Vec::new(); c.num_groups];
            for (i, &l) in c.labels.iter().enumerate() {
                ours[l as usize].push(i);
            }
            ours.sort();
            prop_assert_eq!(ours, brute_force_clusters(&v, h));
        }

        #[test]
        fn labels_follow_group_means(v in prop::collection::vec(-3.0f64..3.0, 2..40), seed in 0u64..100) {
            let c = cluster_effects(&v, None).unwrap();
            let mut perm: Vec<usize> = (0..v.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pv: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let pc = cluster_effects(&pv, None).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pc.labels[k], c.labels[i]);
            }
        }

        #[test]
        fn residuals_reconstruct_outcome(y in prop::collection::vec(-1e3f64..1e3, 1..30), shift in -10.0f64..10.0) {
            let mu: Vec<f64> = y.iter().map(|v| v * 0.3 + shift).collect();
            let r = partial_residuals(&y, &mu).unwrap();
            // exact up to the rounding of one subtraction and one addition
            for i in 0..y.len() {
                let tol = 2.0 * f64::EPSILON * y[i].abs().max(mu[i].abs());
                prop_assert!((r[i] + mu[i] - y[i]).abs() <= tol);
            }
        }
    }

    #[test]
    fn group_line_examples() {
        let g = Groups { names: vec!["a".into()], codes: vec![0, 0] };
        let rep = group_linearity_report(&g, &[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let l = rep[0].ols.unwrap();
        assert!((l.slope - 1.0).abs() < 1e-12 && l.intercept.abs() < 1e-12);
        assert!(rep[0].nonlinearity.is_none());

        let z = [-2.0, -1.0, 0.5, 1.0, 2.0];
        let r: Vec<f64> = z.iter().map(|v| 0.4 * v).collect();
        let g = Groups { names: vec!["a".into()], codes: vec![0; 5] };
        let rep = group_linearity_report(&g, &r, &z, &[0.4; 5]).unwrap();
        assert!((rep[0].ols.unwrap().slope - 0.4).abs() < 1e-12);
        assert!((rep[0].group_slope - 0.4).abs() < 1e-12);
        assert!(rep[0].nonlinearity.unwrap() < 1e-12);

        // r = z² on symmetric z: linear R² is 0, quadratic R² is 1
        let z = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let r: Vec<f64> = z.iter().map(|v| v * v).collect();
        let rep = group_linearity_report(&g, &r, &z, &[0.0; 5]).unwrap();
        assert!(rep[0].nonlinearity.unwrap() > 0.9);
    }

    #[test]
    fn smoother_reproduces_lines() {
        let z: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * (i as f64 / 199.0).powf(1.3)).collect();
        let r: Vec<f64> = z.iter().map(|v| 0.5 * v).collect();
        let c = global_smoother_check(&r, &z, 0.5, DEFAULT_SPAN).unwrap();
        let m = c.grid.len();
        for k in m / 10..m - m / 10 {
            assert!((c.fitted[k] - 0.5 * c.grid[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn smoother_tracks_a_parabola() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..1000).map(|_| rng.gen_range(-3.0..1.0)).collect();
        let r: Vec<f64> = z.iter().map(|v| (v + 1.0) * (v + 1.0) / 2.0 + 0.2 * rng.gen_range(-1.0..1.0)).collect();
        let c = global_smoother_check(&r, &z, 0.0, DEFAULT_SPAN).unwrap();
        let (a, b) = crate::stats::simple_ols(&c.grid, &c.fitted).unwrap();
        let gap = c.grid.iter().zip(&c.fitted).map(|(g, f)| (f - a - b * g).abs()).fold(0.0, f64::max);
        assert!(gap > 0.2, "{gap}");
        // and stays near the parabola itself
        for (g, f) in c.grid.iter().zip(&c.fitted) {
            assert!((f - (g + 1.0) * (g + 1.0) / 2.0).abs() < 0.15, "{g} {f}");
        }
    }

    #[test]
    fn duplicating_points_leaves_the_curve_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = z.iter().map(|v| v.sin() + rng.gen_range(-0.1..0.1)).collect();
        let grid = grid_over(&z, 40);
        let once = loess(&z, &r, 0.75, &grid).unwrap();
        let z2: Vec<f64> = z.iter().chain(&z).copied().collect();
        let r2: Vec<f64> = r.iter().chain(&r).copied().collect();
        let twice = loess(&z2, &r2, 0.75, &grid).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
