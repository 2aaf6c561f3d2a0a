//! Draw-only analysis outputs shared by `analyze` and `simulate`.
//!
//! Everything here is a function of the draws and the covariates; the
//! outcome is read only for the partial residuals of the diagnostic.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use contbcf::dataset::{design_matrices, Design, PanelDataset};
use contbcf::diagnostics::{run_diagnostics, DiagnosticsReport};
use contbcf::estimands::{group_ate, posterior_ate, tau_matrix_natural, write_estimand_table, EstimandPosterior, Groups};
use contbcf::sampler::PosteriorDraws;
use contbcf::summaries::{
    fit_additive_summary, fit_tree_summary, linear_design, project_linear_ate, AdditiveSpec, LambdaPolicy,
    TreeSummaryConfig,
};
use contbcf::{Error, Result};
use serde::Serialize;

use crate::config::AnalysisSettings;

const CURVE_POINTS: usize = 101;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_table(path: &Path, rows: &[EstimandPosterior]) -> Result<()> {
    write_estimand_table(rows, create(path)?)
}

pub fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {}", msg.to_string().replace('\n', " "));
}

/// An estimand without its draws.
#[derive(Debug, Serialize)]
struct Interval {
    name: String,
    mean: f64,
    lo95: f64,
    hi95: f64,
    prob_positive: f64,
}

impl From<&EstimandPosterior> for Interval {
    fn from(e: &EstimandPosterior) -> Self {
        let (lo95, hi95) = e.interval(0.95).unwrap_or((f64::NAN, f64::NAN));
        let pos = e.draws.iter().filter(|&&d| d > 0.0).count();
        Interval {
            name: e.name.clone(),
            mean: e.point,
            lo95,
            hi95,
            prob_positive: pos as f64 / e.draws.len() as f64,
        }
    }
}

#[derive(Serialize)]
struct TreeSummaryOut<'a> {
    variables: &'a [String],
    tree: &'a contbcf::summaries::tree::CartTree,
    subgroups: Vec<Interval>,
    differences: Vec<DifferenceOut>,
}

#[derive(Serialize)]
struct DifferenceOut {
    lower: String,
    upper: String,
    #[serde(flatten)]
    posterior: Interval,
}

/// Moderator columns for the summary tree: the moderator design without the
/// unit indicators, whose effect is removed beforehand.
fn summary_moderators(data: &PanelDataset) -> Result<Design> {
    let (_, moderator) = design_matrices(data)?;
    let unit_prefix = data.unit.as_ref().map(|u| format!("{}=", u.name));
    let mut out = Design::new(data.n());
    for (name, col) in moderator.names.iter().zip(&moderator.columns) {
        if unit_prefix.as_deref().is_some_and(|p| name.starts_with(p)) {
            continue;
        }
        out.push(name.clone(), col.clone());
    }
    Ok(out)
}

/// Writes every analysis file into `out` and returns the diagnostics report.
pub fn write_analysis(
    data: &PanelDataset,
    draws: &PosteriorDraws,
    settings: &AnalysisSettings,
    out: &Path,
) -> Result<DiagnosticsReport> {
    let group_rows = match &settings.groups {
        Some(col) => {
            let (names, codes) = data.groups_by(col)?;
            Some(group_ate(draws, &Groups { names, codes })?)
        }
        None => None,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = data.n();

    let mut ates = vec![posterior_ate(draws)?];
    ates[0].name = "ATE".into();
    match linear_design(data).and_then(|d| project_linear_ate(draws, &d)) {
        Ok(mut p) => {
            p.name = "ATE_linear_projection".into();
            ates.push(p);
        }
        Err(e) => warn(format_args!("linear projection skipped: {e}")),
    }
    write_table(&out.join("ate.csv"), &ates)?;

    if let Some(rows) = &group_rows {
        write_table(&out.join("group_ate.csv"), rows)?;
    }

    let spec = AdditiveSpec::from_panel(data)?;
    if spec.smooths.is_empty() && spec.dummies.is_empty() {
        warn("additive summary skipped: no moderators");
    } else {
        let policy = match &settings.lambda {
            Some(l) => LambdaPolicy::Fixed(l.clone()),
            None => LambdaPolicy::Gcv,
        };
        let fit = fit_additive_summary(draws, &spec, &policy)?;
        let curves = fit.partial_effects(CURVE_POINTS);
        let mut w = csv::Writer::from_writer(create(&out.join("additive_curves.csv"))?);
        w.write_record(["term", "x", "mean", "lo90", "hi90"])?;
        for c in &curves {
            for k in 0..c.grid.len() {
                w.write_record([
                    c.name.clone(),
                    c.grid[k].to_string(),
                    c.mean[k].to_string(),
                    c.lo90[k].to_string(),
                    c.hi90[k].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(out.join("additive_curves.csv"), e))?;

        let mut w = csv::Writer::from_writer(create(&out.join("additive_terms.csv"))?);
        w.write_record(["term", "span", "lambda"])?;
        for (c, l) in curves.iter().zip(&fit.lambdas) {
            w.write_record([c.name.clone(), c.span.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(out.join("additive_terms.csv"), e))?;
    }

    let tau_hat = draws.tau_mean_natural();
    let moderators = summary_moderators(data)?;
    if moderators.ncols() == 0 {
        warn("tree summary skipped: no moderators besides the unit");
    } else {
        let units = data.unit.as_ref().map(|u| Groups { names: u.levels.clone(), codes: u.codes.clone() });
        let cfg = TreeSummaryConfig {
            min_leaf_fraction: settings.tree_min_leaf,
            folds: settings.tree_folds,
            ..TreeSummaryConfig::default()
        };
        let s = fit_tree_summary(&tau_hat, &tau_matrix_natural(draws), &moderators, units.as_ref(), &cfg)?;
        let compact = TreeSummaryOut {
            variables: &s.variables,
            tree: &s.tree,
            subgroups: s.subgroups.iter().map(Interval::from).collect(),
            differences: s
                .differences
                .iter()
                .map(|d| DifferenceOut {
                    lower: d.lower.clone(),
                    upper: d.upper.clone(),
                    posterior: Interval::from(&d.posterior),
                })
                .collect(),
        };
        write_json(&out.join("tree_summary.json"), &compact)?;
    }

    let mu_hat = draws.mu_mean_natural();
    let report = run_diagnostics(&data.y, &mu_hat, &data.z, &tau_hat, settings.cut_height, settings.span)?;
    write_json(&out.join("diagnostics.json"), &report)?;

    let path = out.join("partial_residuals.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["row", "unit", "z", "residual", "tau_hat", "group"])?;
    for i in 0..n {
        let unit = data
            .unit
            .as_ref()
            .map(|u| u.levels[u.codes[i] as usize].clone())
            .unwrap_or_default();
        w.write_record([
            i.to_string(),
            unit,
            data.z[i].to_string(),
            report.residuals[i].to_string(),
            tau_hat[i].to_string(),
            format!("g{}", report.clustering.labels[i] + 1),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
