//! Gibbs sampler for `y = μ(x_C) + τ(x_M)·z + ε`.
//!
//! Each sweep backfits the control trees, then the moderator trees, then
//! draws the error variance (Jeffreys prior) and the moderator scale
//! (half-Gaussian prior). The moderating function is parameterized as
//! `τ(x) = σ_τ·g(x)` with `g` a unit-scale forest, which keeps every
//! conditional in closed form.
//!
//! The exposure is internally re-signed so that its first nonzero value is
//! positive. Negating the exposure therefore produces bit-identical chains
//! with every `τ` draw negated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{design_matrices, standardize, Design, PanelDataset, Standardization};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::stats::{inverse_gamma, truncated_normal_positive};
use crate::trees::mcmc::{add_leaf_values, MoveOutcome, Scratch, TreeIndex, TreeUpdate};
use crate::trees::{forest_predict, CutpointGrid, DecisionTree, Forest, TreePriorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_chains: usize,
    pub burn_in: usize,
    pub kept_draws: usize,
    pub thinning: usize,
    /// One seed per chain.
    pub seeds: Vec<u64>,
    pub control_prior: TreePriorConfig,
    pub moderator_prior: TreePriorConfig,
    /// Prior SD of the moderator scale, in standardized units.
    pub tau_scale_prior_sd: f64,
    /// Fix the moderating forest at the constant 1 (a single effect).
    pub homogeneous: bool,
    /// When false, tree shapes stay as initialized and only leaf values move.
    pub update_structure: bool,
    /// Store per-draw forest snapshots for out-of-sample prediction.
    pub keep_forests: bool,
    pub max_cuts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::desk(4, 0)
    }
}

impl SamplerConfig {
    /// Desk-scale defaults: 5,000 burn-in and 2,500 kept sweeps per chain.
    pub fn desk(num_chains: usize, seed: u64) -> Self {
        SamplerConfig {
            num_chains,
            burn_in: 5000,
            kept_draws: 2500,
            thinning: 1,
            seeds: chain_seeds(seed, num_chains),
            control_prior: TreePriorConfig::control_default(),
            moderator_prior: TreePriorConfig::moderator_default(),
            tau_scale_prior_sd: 0.5,
            homogeneous: false,
            update_structure: true,
            keep_forests: false,
            max_cuts: CutpointGrid::DEFAULT_MAX_CUTS,
        }
    }

    pub fn with_chains(mut self, num_chains: usize, seed: u64) -> Self {
        self.num_chains = num_chains;
        self.seeds = chain_seeds(seed, num_chains);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_chains == 0 {
            return Err(Error::Config("num_chains must be positive".into()));
        }
        if self.kept_draws == 0 {
            return Err(Error::Config("kept_draws must be positive".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be positive".into()));
        }
        if self.seeds.len() != self.num_chains {
            return Err(Error::Config(format!(
                "{} seeds given for {} chains",
                self.seeds.len(),
                self.num_chains
            )));
        }
        if !(self.tau_scale_prior_sd > 0.0) {
            return Err(Error::Config("tau_scale_prior_sd must be positive".into()));
        }
        self.control_prior.validate()?;
        self.moderator_prior.validate()?;
        Ok(())
    }
}

/// Distinct per-chain seeds derived from one base seed (SplitMix64).
pub fn chain_seeds(base: u64, num_chains: usize) -> Vec<u64> {
    (0..num_chains as u64)
        .map(|k| {
            let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k + 1));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}

/// Standardized outcome, exposure and both designs, ready for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub control: Design,
    pub moderator: Design,
    pub standardization: Standardization,
    pub fingerprint: String,
}

impl ModelInputs {
    pub fn from_panel(data: &PanelDataset) -> Result<Self> {
        let (std_data, standardization) = standardize(data)?;
        let (control, moderator) = design_matrices(data)?;
        Ok(ModelInputs {
            y: std_data.y,
            z: std_data.z,
            control,
            moderator,
            standardization,
            fingerprint: data.fingerprint(),
        })
    }

    /// Inputs already on the model scale (identity standardization).
    pub fn from_parts(y: Vec<f64>, z: Vec<f64>, control: Design, moderator: Design) -> Result<Self> {
        let n = y.len();
        if z.len() != n || control.n != n || moderator.n != n {
            return Err(Error::Shape("outcome, exposure and designs differ in length".into()));
        }
        Ok(ModelInputs {
            y,
            z,
            control,
            moderator,
            standardization: Standardization::identity(),
            fingerprint: String::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Per-fit constants shared read-only by every chain.
pub struct Model<'a> {
    pub inputs: &'a ModelInputs,
    pub config: &'a SamplerConfig,
    z: Vec<f64>,
    ones: Vec<f64>,
    /// ±1; internal exposure is `orientation · z`.
    orientation: f64,
    control_grid: CutpointGrid,
    moderator_grid: CutpointGrid,
}

impl<'a> Model<'a> {
    pub fn new(inputs: &'a ModelInputs, config: &'a SamplerConfig) -> Result<Self> {
        config.validate()?;
        let orientation = match inputs.z.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => -1.0,
            _ => 1.0,
        };
        let z: Vec<f64> = inputs.z.iter().map(|v| orientation * v).collect();
        Ok(Model {
            inputs,
            config,
            ones: vec![1.0; z.len()],
            z,
            orientation,
            control_grid: CutpointGrid::from_design(&inputs.control, config.max_cuts),
            moderator_grid: CutpointGrid::from_design(&inputs.moderator, config.max_cuts),
        })
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }
}

/// Live state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub mu_forest: Forest,
    /// Unit-scale moderator forest `g`; `τ = tau_scale · g`.
    pub tau_forest: Forest,
    pub sigma2: f64,
    pub tau_scale: f64,
    pub mu_hat: Vec<f64>,
    /// Raw moderator forest output `g(xᵢ)` (≡ 1 in homogeneous mode).
    pub g_hat: Vec<f64>,
    mu_index: Vec<TreeIndex>,
    tau_index: Vec<TreeIndex>,
    /// y − μ̂ − τ̂·z on the internal exposure scale.
    resid: Vec<f64>,
    rng: ChaCha8Rng,
    scratch: Scratch,
    sweeps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl ChainState {
    /// Root-only trees with zero leaves, σ² = 1, and τ̂ ≡ 0.
    pub fn init(model: &Model, seed: u64) -> Self {
        let n = model.n();
        let cfg = model.config;
        let mu_forest = Forest::new(model.inputs.control.ncols(), cfg.control_prior.num_trees);
        let (tau_forest, g_hat, tau_scale) = if cfg.homogeneous {
            (Forest::new(model.inputs.moderator.ncols(), 0), vec![1.0; n], 0.0)
        } else {
            (
                Forest::new(model.inputs.moderator.ncols(), cfg.moderator_prior.num_trees),
                vec![0.0; n],
                cfg.tau_scale_prior_sd,
            )
        };
        Self::with_forests(model, mu_forest, tau_forest, 1.0, tau_scale, seed).map_or_else(
            |e| panic!("fresh forests match their designs: {e}"),
            |mut s| {
                s.g_hat = g_hat;
                s.refresh(model);
                s
            },
        )
    }

    /// Starts a chain from given forests (used for fixed-structure runs).
    pub fn with_forests(
        model: &Model,
        mu_forest: Forest,
        tau_forest: Forest,
        sigma2: f64,
        tau_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let inputs = model.inputs;
        if mu_forest.num_vars != inputs.control.ncols()
            || tau_forest.num_vars != inputs.moderator.ncols()
        {
            return Err(Error::Shape("forest covariate count does not match design".into()));
        }
        let index_all = |f: &Forest, d: &Design| -> Vec<TreeIndex> {
            f.trees.iter().map(|t| TreeIndex::build(t, &d.columns, d.n)).collect()
        };
        let n = model.n();
        let mut s = ChainState {
            mu_index: index_all(&mu_forest, &inputs.control),
            tau_index: index_all(&tau_forest, &inputs.moderator),
            mu_forest,
            tau_forest,
            sigma2,
            tau_scale,
            mu_hat: vec![0.0; n],
            g_hat: vec![if model.config.homogeneous { 1.0 } else { 0.0 }; n],
            resid: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            scratch: Scratch::default(),
            sweeps: 0,
        };
        s.refresh(model);
        Ok(s)
    }

    /// Recomputes fitted values and the residual exactly from the trees.
    pub fn refresh(&mut self, model: &Model) {
        let n = model.n();
        sum_leaves(&self.mu_forest, &self.mu_index, n, &mut self.mu_hat);
        if !model.config.homogeneous {
            sum_leaves(&self.tau_forest, &self.tau_index, n, &mut self.g_hat);
        }
        let y = &model.inputs.y;
        for i in 0..n {
            self.resid[i] = y[i] - self.mu_hat[i] - self.tau_scale * self.g_hat[i] * model.z[i];
        }
    }

    /// τ̂ on the standardized scale of the caller's exposure.
    pub fn tau_hat(&self, model: &Model) -> Vec<f64> {
        self.g_hat
            .iter()
            .map(|g| model.orientation * (self.tau_scale * g))
            .collect()
    }

    /// Current residual y − μ̂ − τ̂·z.
    pub fn residual(&self) -> &[f64] {
        &self.resid
    }

    /// One full Gibbs sweep.
    pub fn gibbs_step(&mut self, model: &Model) -> Result<StepStats> {
        let cfg = model.config;
        let mut stats = StepStats::default();
        let mut tally = |o: MoveOutcome| {
            if o.proposed.is_some() {
                stats.proposals += 1;
                stats.accepted += usize::from(o.accepted);
            }
        };

        // (a) control forest, weight ≡ 1
        let update = TreeUpdate {
            columns: &model.inputs.control.columns,
            grid: &model.control_grid,
            cfg: &cfg.control_prior,
            weight: &model.ones,
            sigma2: self.sigma2,
            update_structure: cfg.update_structure,
            unit_weight: true,
        };
        for (tree, index) in self.mu_forest.trees.iter_mut().zip(&mut self.mu_index) {
            tally(update.run(
                tree,
                index,
                &mut self.resid,
                &mut self.mu_hat,
                &mut self.scratch,
                &mut self.rng,
            ));
        }

        // (b) moderator forest, weight = σ_τ·z
        if !cfg.homogeneous {
            let weight: Vec<f64> = model.z.iter().map(|z| self.tau_scale * z).collect();
            let update = TreeUpdate {
                columns: &model.inputs.moderator.columns,
                grid: &model.moderator_grid,
                cfg: &cfg.moderator_prior,
                weight: &weight,
                sigma2: self.sigma2,
                update_structure: cfg.update_structure,
                unit_weight: false,
            };
            for (tree, index) in self.tau_forest.trees.iter_mut().zip(&mut self.tau_index) {
                tally(update.run(
                    tree,
                    index,
                    &mut self.resid,
                    &mut self.g_hat,
                    &mut self.scratch,
                    &mut self.rng,
                ));
            }
        }

        // (c) error variance
        self.sigma2 = sample_sigma2(&self.resid, &mut self.rng)?;

        // (d) moderator scale
        self.update_tau_scale(model);

        self.sweeps += 1;
        if self.sweeps % 64 == 0 {
            self.refresh(model);
        }
        Ok(stats)
    }

    fn update_tau_scale(&mut self, model: &Model) {
        let cfg = model.config;
        let old = self.tau_scale;
        let n = model.n();
        let mut s_aa = 0.0;
        let mut s_au = 0.0;
        for i in 0..n {
            let a = self.g_hat[i] * model.z[i];
            let u = self.resid[i] + old * a;
            s_aa += a * a;
            s_au += a * u;
        }
        let new = if cfg.homogeneous {
            let (mean, var) = scale_conditional(s_aa, s_au, self.sigma2, cfg.tau_scale_prior_sd);
            let xi: f64 = rand::Rng::sample(&mut self.rng, rand_distr::StandardNormal);
            mean + var.sqrt() * xi
        } else {
            sample_tau_scale(s_aa, s_au, self.sigma2, cfg.tau_scale_prior_sd, &mut self.rng)
        };
        for i in 0..n {
            let a = self.g_hat[i] * model.z[i];
            self.resid[i] += (old - new) * a;
        }
        self.tau_scale = new;
    }

    pub fn snapshot(&self, model: &Model) -> ForestSnapshot {
        ForestSnapshot {
            mu: self.mu_forest.clone(),
            tau: self.tau_forest.clone(),
            tau_scale: self.tau_scale,
            orientation: model.orientation,
            homogeneous: model.config.homogeneous,
        }
    }
}

fn sum_leaves(forest: &Forest, index: &[TreeIndex], n: usize, out: &mut [f64]) {
    out[..n].iter_mut().for_each(|v| *v = 0.0);
    for (tree, idx) in forest.trees.iter().zip(index) {
        add_leaf_values(tree, idx, out);
    }
}

/// σ² | rest under p(σ²) ∝ 1/σ²: Inverse-Gamma(n/2, Σe²/2).
pub fn sample_sigma2<R: rand::Rng + ?Sized>(residual: &[f64], rng: &mut R) -> Result<f64> {
    let ss: f64 = residual.iter().map(|e| e * e).sum();
    if residual.is_empty() || ss <= 0.0 {
        return Err(Error::DegenerateFit);
    }
    Ok(inverse_gamma(residual.len() as f64 / 2.0, ss / 2.0, rng))
}

/// Gaussian conditional (mean, variance) of a scale entering as `uᵢ = s·aᵢ + εᵢ`
/// under a Normal(0, s₀²) prior, from `Σa²` and `Σa·u`.
pub fn scale_conditional(s_aa: f64, s_au: f64, sigma2: f64, prior_sd: f64) -> (f64, f64) {
    let var = 1.0 / (1.0 / (prior_sd * prior_sd) + s_aa / sigma2);
    (var * s_au / sigma2, var)
}

/// σ_τ | rest under the half-Gaussian prior: the Gaussian conditional
/// truncated to (0, ∞).
pub fn sample_tau_scale<R: rand::Rng + ?Sized>(
    s_aa: f64,
    s_au: f64,
    sigma2: f64,
    prior_sd: f64,
    rng: &mut R,
) -> f64 {
    let (mean, var) = scale_conditional(s_aa, s_au, sigma2, prior_sd);
    truncated_normal_positive(mean, var.sqrt(), rng)
}

/// Frozen forests of one kept draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestSnapshot {
    pub mu: Forest,
    pub tau: Forest,
    pub tau_scale: f64,
    pub orientation: f64,
    pub homogeneous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SamplerConfig,
    pub fingerprint: String,
    pub standardization: Standardization,
    pub n: usize,
    pub num_draws: usize,
    pub control_columns: Vec<String>,
    pub moderator_columns: Vec<String>,
    /// Fraction of accepted structure proposals per chain.
    pub acceptance: Vec<f64>,
    pub sigma_ess: f64,
}

/// Posterior draws of fitted values, stored in standardized units.
///
/// Row `d` of `mu`/`tau` holds draw `d` for all `n` units. Chains are
/// concatenated in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub n: usize,
    pub mu: Vec<f64>,
    pub tau: Vec<f64>,
    /// Error SD σ per draw.
    pub sigma: Vec<f64>,
    /// Moderator scale σ_τ per draw (the single effect in homogeneous mode,
    /// on the internal exposure orientation).
    pub tau_scale: Vec<f64>,
    pub provenance: Provenance,
    pub snapshots: Option<Vec<ForestSnapshot>>,
}

impl PosteriorDraws {
    pub fn num_draws(&self) -> usize {
        self.sigma.len()
    }

    pub fn standardization(&self) -> &Standardization {
        &self.provenance.standardization
    }

    pub fn mu_row(&self, d: usize) -> &[f64] {
        &self.mu[d * self.n..(d + 1) * self.n]
    }

    pub fn tau_row(&self, d: usize) -> &[f64] {
        &self.tau[d * self.n..(d + 1) * self.n]
    }

    /// τ in natural units (outcome units per exposure unit).
    pub fn tau_natural(&self, d: usize) -> Vec<f64> {
        let f = self.standardization().slope_factor();
        self.tau_row(d).iter().map(|t| t * f).collect()
    }

    /// μ in natural units: the outcome at zero natural exposure.
    pub fn mu_natural(&self, d: usize) -> Vec<f64> {
        let st = self.standardization();
        let f = st.slope_factor();
        self.mu_row(d)
            .iter()
            .zip(self.tau_row(d))
            .map(|(m, t)| st.y.inverse(*m) - t * f * st.z.center)
            .collect()
    }

    pub fn sigma_natural(&self) -> Vec<f64> {
        let s = self.standardization().y.scale;
        self.sigma.iter().map(|v| v * s).collect()
    }

    /// Posterior mean of τ per unit, natural units.
    pub fn tau_mean_natural(&self) -> Vec<f64> {
        column_means(&self.tau, self.n)
            .into_iter()
            .map(|t| t * self.standardization().slope_factor())
            .collect()
    }

    /// Posterior mean of μ per unit, natural units.
    pub fn mu_mean_natural(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n];
        for d in 0..self.num_draws() {
            for (a, v) in acc.iter_mut().zip(self.mu_natural(d)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.num_draws() as f64).collect()
    }
}

pub(crate) fn column_means(rows: &[f64], n: usize) -> Vec<f64> {
    let m = rows.len() / n.max(1);
    let mut acc = vec![0.0; n];
    for row in rows.chunks(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / m as f64).collect()
}

struct ChainOutput {
    mu: Vec<f64>,
    tau: Vec<f64>,
    sigma: Vec<f64>,
    tau_scale: Vec<f64>,
    snapshots: Vec<ForestSnapshot>,
    acceptance: f64,
}

fn run_chain(model: &Model, chain: usize) -> Result<ChainOutput> {
    let cfg = model.config;
    let n = model.n();
    let mut state = ChainState::init(model, cfg.seeds[chain]);
    let mut out = ChainOutput {
        mu: Vec::with_capacity(cfg.kept_draws * n),
        tau: Vec::with_capacity(cfg.kept_draws * n),
        sigma: Vec::with_capacity(cfg.kept_draws),
        tau_scale: Vec::with_capacity(cfg.kept_draws),
        snapshots: Vec::new(),
        acceptance: 0.0,
    };
    let mut totals = StepStats::default();
    for _ in 0..cfg.burn_in {
        let s = state.gibbs_step(model)?;
        totals.proposals += s.proposals;
        totals.accepted += s.accepted;
    }
    for _ in 0..cfg.kept_draws {
        for _ in 0..cfg.thinning {
            let s = state.gibbs_step(model)?;
            totals.proposals += s.proposals;
            totals.accepted += s.accepted;
        }
        state.refresh(model);
        out.mu.extend_from_slice(&state.mu_hat);
        out.tau.extend(state.tau_hat(model));
        out.sigma.push(state.sigma2.sqrt());
        out.tau_scale.push(state.tau_scale);
        if cfg.keep_forests {
            out.snapshots.push(state.snapshot(model));
        }
    }
    out.acceptance = if totals.proposals > 0 {
        totals.accepted as f64 / totals.proposals as f64
    } else {
        0.0
    };
    Ok(out)
}

/// Runs every chain and concatenates their kept draws in chain order.
pub fn run_chains(inputs: &ModelInputs, config: &SamplerConfig) -> Result<PosteriorDraws> {
    run_chains_with(inputs, config, Execution::default())
}

pub fn run_chains_with(
    inputs: &ModelInputs,
    config: &SamplerConfig,
    execution: Execution,
) -> Result<PosteriorDraws> {
    let model = Model::new(inputs, config)?;
    let outputs = map_indexed(config.num_chains, execution, |k| {
        run_chain(&model, k).map_err(|e| Error::Chain {
            chain: k,
            source: Box::new(e),
        })
    });
    let mut draws = PosteriorDraws {
        n: inputs.n(),
        mu: Vec::new(),
        tau: Vec::new(),
        sigma: Vec::new(),
        tau_scale: Vec::new(),
        provenance: Provenance {
            config: config.clone(),
            fingerprint: inputs.fingerprint.clone(),
            standardization: inputs.standardization.clone(),
            n: inputs.n(),
            num_draws: config.num_chains * config.kept_draws,
            control_columns: inputs.control.names.clone(),
            moderator_columns: inputs.moderator.names.clone(),
            acceptance: Vec::new(),
            sigma_ess: 0.0,
        },
        snapshots: config.keep_forests.then(Vec::new),
    };
    let mut ess = 0.0;
    for out in outputs {
        let out = out?;
        ess += crate::stats::effective_sample_size(&out.sigma);
        draws.mu.extend(out.mu);
        draws.tau.extend(out.tau);
        draws.sigma.extend(out.sigma);
        draws.tau_scale.extend(out.tau_scale);
        draws.provenance.acceptance.push(out.acceptance);
        if let Some(s) = draws.snapshots.as_mut() {
            s.extend(out.snapshots);
        }
    }
    draws.provenance.sigma_ess = ess;
    Ok(draws)
}

/// Per-draw evaluations on new rows, standardized and natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub num_draws: usize,
    pub n: usize,
    pub mu: Vec<f64>,
    pub tau: Vec<f64>,
    pub mu_natural: Vec<f64>,
    pub tau_natural: Vec<f64>,
}

/// Evaluates stored forest snapshots on new control/moderator rows.
pub fn predict(draws: &PosteriorDraws, control: &Design, moderator: &Design) -> Result<Prediction> {
    let snaps = draws.snapshots.as_ref().ok_or_else(|| {
        Error::Capability("forest snapshots were not stored for this run".into())
    })?;
    if control.n != moderator.n {
        return Err(Error::Shape("control and moderator rows differ in count".into()));
    }
    let n = control.n;
    let st = draws.standardization();
    let f = st.slope_factor();
    let mut out = Prediction {
        num_draws: snaps.len(),
        n,
        mu: Vec::with_capacity(snaps.len() * n),
        tau: Vec::with_capacity(snaps.len() * n),
        mu_natural: Vec::with_capacity(snaps.len() * n),
        tau_natural: Vec::with_capacity(snaps.len() * n),
    };
    for snap in snaps {
        let mu = forest_predict(&snap.mu, control)?;
        let g = if snap.homogeneous {
            vec![1.0; n]
        } else {
            forest_predict(&snap.tau, moderator)?
        };
        for i in 0..n {
            let t = snap.orientation * (snap.tau_scale * g[i]);
            out.mu.push(mu[i]);
            out.tau.push(t);
            out.tau_natural.push(t * f);
            out.mu_natural.push(st.y.inverse(mu[i]) - t * f * st.z.center);
        }
    }
    Ok(out)
}

/// A single-tree forest fixed at the given shape, for structure-frozen runs.
pub fn forest_of(num_vars: usize, trees: Vec<DecisionTree>) -> Forest {
    Forest { num_vars, trees }
}
