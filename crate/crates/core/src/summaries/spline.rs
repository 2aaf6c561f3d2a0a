//! Penalized cubic regression spline for one moderator.
//!
//! The spline is a natural cubic spline parameterized by its values at
//! quantile knots, with penalty `∫ f''(u)² du`. Its null space is
//! {constant, linear}. The sum-to-zero constraint over the training values is
//! absorbed by a Householder reflection, leaving `k − 1` columns whose fitted
//! curve has mean zero on the training data. Outside the knot range the curve
//! continues linearly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sorted};

pub const DEFAULT_BASIS_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub name: String,
    pub knots: Vec<f64>,
    /// Maps knot values to second derivatives at the knots (k × k).
    f: DMatrix<f64>,
    /// Null-space basis of the centering constraint (k × (k − 1)).
    z: DMatrix<f64>,
    /// Penalty on the constrained coefficients, `Zᵀ DᵀB⁻¹D Z`.
    pub penalty: DMatrix<f64>,
}

impl SplineBasis {
    /// Builds a basis of dimension `dim` (reduced to the number of distinct
    /// values when fewer).
    pub fn build(name: impl Into<String>, x: &[f64], dim: usize) -> Result<Self> {
        let name = name.into();
        let s = sorted(x);
        let mut distinct = s.clone();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Degenerate(format!("moderator {name} is constant")));
        }
        let k = dim.max(2).min(distinct.len());
        if k < dim {
            log::warn!("moderator {name}: basis dimension reduced to {k}");
        }
        let mut knots: Vec<f64> = if k == distinct.len() {
            distinct
        } else {
            (0..k)
                .map(|j| quantile_sorted(&s, j as f64 / (k - 1) as f64))
                .collect()
        };
        knots.dedup();
        if knots.len() < 2 {
            return Err(Error::Degenerate(format!("moderator {name} has no spread")));
        }
        let k = knots.len();
        let (f, s_full) = natural_spline_operators(&knots);

        let mut basis = SplineBasis {
            name,
            knots,
            f,
            z: DMatrix::identity(k, k),
            penalty: DMatrix::zeros(0, 0),
        };
        let raw = basis.raw_design(x);
        let c = DVector::from_iterator(k, raw.row_sum().iter().copied());
        basis.z = constraint_null_space(&c);
        let p = basis.z.transpose() * &s_full * &basis.z;
        basis.penalty = (&p + p.transpose()) * 0.5;
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Coefficients of the knot-value parameterization at one point.
    fn raw_row(&self, x: f64) -> Vec<f64> {
        let k = self.knots.len();
        let kn = &self.knots;
        let mut row = vec![0.0; k];
        let add = |coef: &mut [f64], j: usize, a_lo: f64, a_hi: f64, c_lo: f64, c_hi: f64| {
            coef[j] += a_lo;
            coef[j + 1] += a_hi;
            for m in 0..k {
                coef[m] += c_lo * self.f[(j, m)] + c_hi * self.f[(j + 1, m)];
            }
        };
        if x < kn[0] {
            // f(x₀) + f'(x₀)(x − x₀)
            let h = kn[1] - kn[0];
            let d = x - kn[0];
            add(&mut row, 0, 1.0 - d / h, d / h, -h * d / 3.0, -h * d / 6.0);
        } else if x > kn[k - 1] {
            let h = kn[k - 1] - kn[k - 2];
            let d = x - kn[k - 1];
            add(&mut row, k - 2, -d / h, 1.0 + d / h, h * d / 6.0, h * d / 3.0);
        } else {
            let j = match kn.partition_point(|&t| t <= x) {
                0 => 0,
                p => (p - 1).min(k - 2),
            };
            let h = kn[j + 1] - kn[j];
            let am = (kn[j + 1] - x) / h;
            let ap = (x - kn[j]) / h;
            let cm = ((kn[j + 1] - x).powi(3) / h - h * (kn[j + 1] - x)) / 6.0;
            let cp = ((x - kn[j]).powi(3) / h - h * (x - kn[j])) / 6.0;
            add(&mut row, j, am, ap, cm, cp);
        }
        row
    }

    fn raw_design(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.knots.len();
        let mut m = DMatrix::zeros(x.len(), k);
        for (i, &v) in x.iter().enumerate() {
            for (j, c) in self.raw_row(v).into_iter().enumerate() {
                m[(i, j)] = c;
            }
        }
        m
    }

    /// Constrained basis evaluated at `x` (len(x) × dim).
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        self.raw_design(x) * &self.z
    }
}

/// Returns (F, S): F maps knot values to knot second derivatives (natural
/// end conditions), S = DᵀB⁻¹D is the integrated squared second derivative.
fn natural_spline_operators(knots: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = knots.len();
    if k < 3 {
        return (DMatrix::zeros(k, k), DMatrix::zeros(k, k));
    }
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = DMatrix::zeros(k - 2, k);
    let mut b = DMatrix::zeros(k - 2, k - 2);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let binv_d = b
        .cholesky()
        .expect("tridiagonal spline system is positive definite")
        .solve(&d);
    let mut f = DMatrix::zeros(k, k);
    f.view_mut((1, 0), (k - 2, k)).copy_from(&binv_d);
    let s = d.transpose() * binv_d;
    (f, s)
}

/// Orthonormal basis of {β : cᵀβ = 0} via a Householder reflection.
fn constraint_null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vv = v.dot(&v);
    let mut h = DMatrix::identity(k, k);
    if vv > 0.0 {
        h -= (&v * v.transpose()) * (2.0 / vv);
    }
    h.columns(1, k - 1).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lstsq(x: &DMatrix<f64>, y: &[f64], pen: Option<(&DMatrix<f64>, f64)>) -> DVector<f64> {
        let n = x.nrows();
        let mut xa = DMatrix::zeros(n, x.ncols() + 1);
        xa.column_mut(0).fill(1.0);
        xa.view_mut((0, 1), (n, x.ncols())).copy_from(x);
        let mut a = xa.transpose() * &xa;
        if let Some((s, lam)) = pen {
            let p = s.nrows();
            let mut v = a.view_mut((1, 1), (p, p));
            v += s * lam;
        }
        let rhs = xa.transpose() * DVector::from_column_slice(y);
        let sol = a.lu().solve(&rhs).unwrap();
        &xa * sol
    }

    #[test]
    fn penalty_is_symmetric_psd_with_linear_null_space() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.1).collect();
        let b = SplineBasis::build("u", &x, 10).unwrap();
        assert_eq!(b.dim(), 9);
        let eig = b.penalty.clone().symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0] > -1e-10);
        // one zero eigenvalue left after centering removes the constant
        assert!(ev[0].abs() < 1e-9 && ev[1] > 1e-6, "{ev:?}");
    }

    #[test]
    fn linear_functions_are_reproduced_and_unpenalized() {
        let x: Vec<f64> = (0..40).map(|i| (i * i) as f64 / 40.0).collect();
        let b = SplineBasis::build("u", &x, 10).unwrap();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let fit = lstsq(&b.design(&x), &y, Some((&b.penalty, 1e6)));
        for (f, t) in fit.iter().zip(&y) {
            assert!((f - t).abs() < 1e-8);
        }
        // linear extrapolation beyond the knots
        let far = [-5.0, 100.0];
        let xa = b.design(&x);
        let n = x.len();
        let mut full = DMatrix::zeros(n, xa.ncols() + 1);
        full.column_mut(0).fill(1.0);
        full.view_mut((0, 1), (n, xa.ncols())).copy_from(&xa);
        let coef = full.clone().svd(true, true).solve(&DVector::from_column_slice(&y), 1e-12).unwrap();
        let ext = b.design(&far);
        for (r, v) in far.iter().enumerate() {
            let pred = coef[0] + (ext.row(r) * coef.rows(1, xa.ncols())).x;
            assert!((pred - (3.0 - 2.0 * v)).abs() < 1e-7, "{pred}");
        }
    }

    #[test]
    fn columns_are_centered() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sqrt()).collect();
        let b = SplineBasis::build("u", &x, 10).unwrap();
        let m = b.design(&x);
        for j in 0..m.ncols() {
            assert!(m.column(j).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn sine_fit_matches_unpenalized_oracle() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let b = SplineBasis::build("u", &x, 10).unwrap();
        let d = b.design(&x);
        let pen = lstsq(&d, &y, Some((&b.penalty, 1e-10)));
        let ols = lstsq(&d, &y, None);
        let gap = pen.iter().zip(ols.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 0.01, "{gap}");
        let err = ols.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn few_distinct_values_shrink_the_basis() {
        let x = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let b = SplineBasis::build("u", &x, 10).unwrap();
        assert_eq!(b.dim(), 2);
        assert!(SplineBasis::build("c", &[4.0; 5], 10).is_err());
        let two = SplineBasis::build("t", &[0.0, 1.0, 0.0], 10).unwrap();
        assert_eq!(two.dim(), 1);
    }
}
