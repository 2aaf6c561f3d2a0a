mod analyze;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contbcf::artifacts::{check_fingerprint, read_draws, read_manifest, write_draws};
use contbcf::dataset::{load_panel, write_panel, Design, PanelDataset, Schema};
use contbcf::estimands::EstimandPosterior;
use contbcf::sampler::{predict, run_chains, ModelInputs};
use contbcf::simulation::{generate_synthetic, recovery_metrics, to_panel, RecoveryMetrics, SimulationScenario};
use contbcf::{Error, ErrorKind, Result};
use serde::{Deserialize, Serialize};

use analyze::{create, warn, write_analysis, write_json, write_table};
use config::{existing_path, required_path, AnalysisFlags, FileConfig, SamplerFlags};

const RUN_RECORD: &str = "run.json";

#[derive(Parser)]
#[command(name = "contbcf", version, about = "Tree-ensemble effects of a continuous exposure")]
struct Cli {
    /// TOML file with default values for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for chains and per-draw work [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the posterior and write draw files
    Fit(FitArgs),
    /// Estimands, summaries and diagnostics from a fitted run
    Analyze(AnalyzeArgs),
    /// Generate a synthetic case, fit it, analyze it and score recovery
    Simulate(SimulateArgs),
    /// Evaluate stored forests on new rows
    Predict(PredictArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Panel CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// TOML file declaring column roles
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run directory to create
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory written by `fit`
    #[arg(long)]
    run: Option<PathBuf>,
    /// Data and schema; default to the ones recorded by `fit`
    #[command(flatten)]
    data: DataArgs,
    /// Output directory [default: <run>/analysis]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisFlags,
}

#[derive(Args)]
struct SimulateArgs {
    /// `1` (b = 0), `2` (b = 1) or `linear`
    #[arg(long)]
    case: Option<String>,
    /// Confounding strength, overriding the case's value
    #[arg(long)]
    b: Option<f64>,
    /// Sample size [default: 1000]
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[command(flatten)]
    analysis: AnalysisFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Run directory fitted with --keep-forests
    #[arg(long)]
    run: Option<PathBuf>,
    /// CSV of new rows, one column per design column of the run
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where `fit` found its inputs, so `analyze` can find them again.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    data: PathBuf,
    schema: PathBuf,
    fingerprint: String,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_data(data: &Path, schema: &Path) -> Result<PanelDataset> {
    let schema = Schema::load(schema)?;
    load_panel(data, &schema)
}

fn fit(args: &FitArgs, file: &FileConfig) -> Result<()> {
    let data_path = existing_path(&args.data.data, &file.data, "data")?;
    let schema_path = existing_path(&args.data.schema, &file.schema, "schema")?;
    let out = required_path(&args.out, &file.out, "out")?;
    let cfg = args.sampler.resolve(file)?;
    let data = load_data(&data_path, &schema_path)?;

    let draws = run_chains(&ModelInputs::from_panel(&data)?, &cfg)?;
    write_draws(&out, &draws)?;

    // The flat-prior linear refit reads y, so it belongs to this stage.
    let refit = contbcf::summaries::linear_design(&data).and_then(|d| {
        let seed = cfg.seeds.first().copied().unwrap_or(0);
        contbcf::summaries::refit_linear_flat(&data.y, &d, draws.num_draws(), seed)
    });
    match refit {
        Ok(mut r) => {
            r.name = "ATE_linear_refit".into();
            write_table(&out.join("linear_refit.csv"), &[r])?;
        }
        Err(e) => warn(format_args!("linear refit skipped: {e}")),
    }

    write_json(
        &out.join(RUN_RECORD),
        &RunRecord {
            data: absolute(&data_path),
            schema: absolute(&schema_path),
            fingerprint: draws.provenance.fingerprint.clone(),
        },
    )
}

fn analyze(args: &AnalyzeArgs, file: &FileConfig) -> Result<()> {
    let run = existing_path(&args.run, &file.run, "run")?;
    let manifest = read_manifest(&run)?;
    let record: Option<RunRecord> = std::fs::read_to_string(run.join(RUN_RECORD))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let data_flag = args.data.data.clone().or_else(|| record.as_ref().map(|r| r.data.clone()));
    let schema_flag = args.data.schema.clone().or_else(|| record.as_ref().map(|r| r.schema.clone()));
    let data_path = existing_path(&data_flag, &file.data, "data")?;
    let schema_path = existing_path(&schema_flag, &file.schema, "schema")?;
    let settings = args.analysis.resolve(file)?;

    let data = load_data(&data_path, &schema_path)?;
    check_fingerprint(&manifest.provenance, &data)?;
    let draws = read_draws(&run)?;
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| run.join("analysis"));
    write_analysis(&data, &draws, &settings, &out)?;
    Ok(())
}

#[derive(Serialize)]
struct GroupScore {
    group: String,
    size: usize,
    nonlinearity: Option<f64>,
}

#[derive(Serialize)]
struct SimulationReport {
    scenario: SimulationScenario,
    metrics: RecoveryMetrics,
    num_groups: usize,
    group_nonlinearity: Vec<GroupScore>,
}

fn scenario(case: &str, seed: u64) -> Result<SimulationScenario> {
    match case {
        "linear" => Ok(SimulationScenario::linear_control(seed)),
        other => match other.parse::<u32>() {
            Ok(k) => SimulationScenario::quadratic_case(k, seed),
            Err(_) => Err(Error::Config(format!(
                "unknown simulation case `{other}` (expected 1, 2 or linear)"
            ))),
        },
    }
}

fn simulate(args: &SimulateArgs, file: &FileConfig) -> Result<()> {
    let case = args
        .case
        .clone()
        .or_else(|| file.case.clone())
        .ok_or_else(|| Error::Config("--case is required".into()))?;
    let seed = args.sampler.seed.or(file.seed).unwrap_or(0);
    let mut s = scenario(&case, seed)?;
    if let Some(b) = args.b.or(file.b) {
        s.b = b;
    }
    if let Some(n) = args.n.or(file.n) {
        s.n = n;
    }
    let out = required_path(&args.out, &file.out, "out")?;
    let cfg = args.sampler.resolve(file)?;
    let settings = args.analysis.resolve(file)?;

    let truth = generate_synthetic(&s)?;
    let panel = to_panel(&truth);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_panel(&panel, create(&out.join("data.csv"))?)?;
    let schema_path = out.join("schema.toml");
    std::fs::write(&schema_path, panel.schema().to_toml_string()).map_err(|e| Error::io(&schema_path, e))?;

    let path = out.join("truth.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["x", "z", "mu", "exposure_part", "slope"])?;
    for i in 0..s.n {
        w.write_record(
            [truth.x[i], truth.z[i], truth.mu_true[i], truth.exposure_part[i], truth.slope_true[i]]
                .map(|v| v.to_string()),
        )?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let draws = run_chains(&ModelInputs::from_panel(&panel)?, &cfg)?;
    write_draws(&out, &draws)?;
    let report = write_analysis(&panel, &draws, &settings, &out.join("analysis"))?;
    let metrics = recovery_metrics(&draws, &truth)?;
    write_json(
        &out.join("metrics.json"),
        &SimulationReport {
            scenario: s,
            metrics,
            num_groups: report.clustering.num_groups,
            group_nonlinearity: report
                .groups
                .iter()
                .map(|g| GroupScore { group: g.group.clone(), size: g.size, nonlinearity: g.nonlinearity })
                .collect(),
        },
    )
}

/// Reads named numeric columns and returns the design in `names` order.
fn design_from_rows(path: &Path, names: &[String]) -> Result<Design> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers()?.clone();
    let idx = names
        .iter()
        .map(|n| {
            header.iter().position(|h| h == n).ok_or_else(|| Error::Schema {
                column: n.clone(),
                reason: format!("is missing from {}", path.display()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx
            .iter()
            .zip(names)
            .map(|(&j, name)| {
                let cell = rec.get(j).unwrap_or("");
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    row: r + 1,
                    column: name.clone(),
                    reason: format!("`{cell}` is not a finite number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Design::from_rows(names.to_vec(), &rows)
}

fn predict_rows(args: &PredictArgs, file: &FileConfig) -> Result<()> {
    let run = existing_path(&args.run, &file.run, "run")?;
    let rows = existing_path(&args.rows, &file.rows, "rows")?;
    let out = required_path(&args.out, &file.out, "out")?;
    let draws = read_draws(&run)?;
    if draws.snapshots.is_none() {
        return Err(Error::Config(format!(
            "{} has no stored forests; refit with --keep-forests",
            run.display()
        )));
    }
    let prov = &draws.provenance;
    let control = design_from_rows(&rows, &prov.control_columns)?;
    let moderator = design_from_rows(&rows, &prov.moderator_columns)?;
    let p = predict(&draws, &control, &moderator)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut summary = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let col: Vec<f64> = (0..p.num_draws).map(|d| p.tau_natural[d * p.n + i]).collect();
        summary.push(EstimandPosterior::new(format!("tau[{i}]"), col)?);
    }
    for i in 0..p.n {
        let col: Vec<f64> = (0..p.num_draws).map(|d| p.mu_natural[d * p.n + i]).collect();
        summary.push(EstimandPosterior::new(format!("mu[{i}]"), col)?);
    }
    write_table(&out.join("predictions.csv"), &summary)?;
    for (name, m) in [("tau.csv", &p.tau_natural), ("mu.csv", &p.mu_natural)] {
        let path = out.join(name);
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record((0..p.n).map(|i| format!("r{i}")))?;
        for row in m.chunks(p.n.max(1)) {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn set_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_threads: usize) -> Result<()> {
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads.or(file.threads) {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        set_threads(t)?;
    }
    match &cli.command {
        Command::Fit(a) => fit(a, &file),
        Command::Analyze(a) => analyze(a, &file),
        Command::Simulate(a) => simulate(a, &file),
        Command::Predict(a) => predict_rows(a, &file),
    }
}

fn fail(kind: &str, code: u8, msg: &str) -> ExitCode {
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{kind}]: {line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            return fail("input", 2, first.trim_start_matches("error: "));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Input => ("input", 2),
                ErrorKind::Consistency => ("consistency", 3),
                ErrorKind::Internal => ("internal", 1),
            };
            fail(kind, code, &e.to_string())
        }
    }
}
