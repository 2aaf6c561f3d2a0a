//! Posterior summaries by projection.
//!
//! Every summary here is a fixed map applied to each posterior draw, and none
//! takes the outcome as input. The one exception, [`linear::refit_linear_flat`],
//! is a separate flat-prior regression kept for comparison.

pub mod additive;
pub mod linear;
pub mod spline;
pub mod tree;

pub use additive::{fit_additive_summary, AdditiveSpec, AdditiveSummaryFit, LambdaPolicy, PartialEffectCurve};
pub use linear::{linear_design, project_linear_ate, refit_linear_flat, LinearDesign};
pub use spline::SplineBasis;
pub use tree::{fit_tree_summary, TreeSummary, TreeSummaryConfig};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-9;

/// Greedy Gram-Schmidt rank check; names every column that is (numerically)
/// a combination of the columns before it.
pub(crate) fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        // two passes keep the projection accurate
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= RANK_TOL * norm.max(1.0) {
            collinear.push(names[j].clone());
        } else {
            basis.push(r / rn);
        }
    }
    if collinear.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: collinear })
    }
}
