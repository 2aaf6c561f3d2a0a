//! Metropolis–Hastings structure moves and conjugate leaf updates.
//!
//! Every update is weighted: the leaf value `θ` enters observation `i` as
//! `θ·wᵢ`. Control trees use `wᵢ = 1`; moderator trees use the (scaled)
//! exposure, so the same kernel serves both forests.

use std::hint::select_unpredictable;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CutpointGrid, DecisionTree, Node, TreePriorConfig};
use crate::dataset::Design;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LeafStats {
    /// Σ wᵢ rᵢ
    pub s_wr: f64,
    /// Σ wᵢ²
    pub s_ww: f64,
}

impl LeafStats {
    #[inline]
    fn add(self, other: LeafStats) -> LeafStats {
        LeafStats {
            s_wr: self.s_wr + other.s_wr,
            s_ww: self.s_ww + other.s_ww,
        }
    }

    /// Log marginal of the residuals in one leaf with the leaf value
    /// integrated out, up to terms that do not depend on tree structure.
    #[inline]
    pub fn log_marginal(&self, v: f64, sigma2: f64) -> f64 {
        -0.5 * (1.0 + v * self.s_ww / sigma2).ln()
            + v * self.s_wr * self.s_wr / (2.0 * sigma2 * (sigma2 + v * self.s_ww))
    }

    /// Conjugate posterior (mean, variance) of the leaf value.
    #[inline]
    pub fn posterior(&self, v: f64, sigma2: f64) -> (f64, f64) {
        let precision = 1.0 / v + self.s_ww / sigma2;
        let var = 1.0 / precision;
        (var * self.s_wr / sigma2, var)
    }
}

/// Per-leaf statistics, in increasing leaf-id order.
pub fn leaf_sufficient_stats(
    tree: &DecisionTree,
    design: &Design,
    residual: &[f64],
    weight: &[f64],
) -> Vec<(u32, LeafStats)> {
    let mut acc = vec![LeafStats::default(); tree.arena_len()];
    for i in 0..design.n {
        let l = tree.route(&design.columns, i) as usize;
        let w = weight[i];
        acc[l].s_wr += w * residual[i];
        acc[l].s_ww += w * w;
    }
    tree.leaves().map(|l| (l, acc[l as usize])).collect()
}

pub fn integrated_log_marginal(stats: &[LeafStats], v: f64, sigma2: f64) -> f64 {
    stats.iter().map(|s| s.log_marginal(v, sigma2)).sum()
}

pub fn sample_leaf_values<R: Rng + ?Sized>(
    stats: &[LeafStats],
    v: f64,
    sigma2: f64,
    rng: &mut R,
) -> Vec<f64> {
    stats
        .iter()
        .map(|s| {
            let (mean, var) = s.posterior(v, sigma2);
            let xi: f64 = rng.sample(StandardNormal);
            mean + var.sqrt() * xi
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Move {
    Grow { leaf: u32, var: u32, cut: f64 },
    Prune { node: u32 },
    Change { node: u32, var: u32, cut: f64 },
}

/// A structure proposal with exact kernel probabilities.
///
/// `log_q_forward`/`log_q_reverse` include the split-rule selection
/// probabilities; `log_rule_prior_ratio` is the matching change in the
/// uniform split-rule prior, so the full MH log ratio is
/// `Δ tree_log_prior + log_rule_prior_ratio + Δ log marginal + log_q_reverse − log_q_forward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub mv: Move,
    pub log_q_forward: f64,
    pub log_q_reverse: f64,
    pub log_rule_prior_ratio: f64,
    pub log_tree_prior_ratio: f64,
}

const MOVE_WEIGHTS: [f64; 3] = [0.25, 0.25, 0.5];

/// Log probabilities of (GROW, PRUNE, CHANGE) renormalized over the moves
/// possible for a tree.
fn move_log_probs(growable: usize, prunable: usize) -> [f64; 3] {
    let possible = [growable > 0, prunable > 0, prunable > 0];
    let total: f64 = (0..3).filter(|&k| possible[k]).map(|k| MOVE_WEIGHTS[k]).sum();
    let mut out = [f64::NEG_INFINITY; 3];
    if total > 0.0 {
        for k in 0..3 {
            if possible[k] {
                out[k] = (MOVE_WEIGHTS[k] / total).ln();
            }
        }
    }
    out
}

/// Interval constraints on the cell of a node, one entry per constrained variable.
type Cell = Vec<(u32, f64, f64)>;

fn cell_of(tree: &DecisionTree, id: u32) -> Cell {
    let mut cell: Cell = Vec::new();
    let mut child = id;
    let mut p = tree.parent(id);
    while let Some(pid) = p {
        if let Node::Split { var, cut, left, .. } = tree.node(pid) {
            let (lo, hi) = if child == left {
                (f64::NEG_INFINITY, cut)
            } else {
                (cut, f64::INFINITY)
            };
            restrict(&mut cell, var, lo, hi);
        }
        child = pid;
        p = tree.parent(pid);
    }
    cell
}

fn restrict(cell: &mut Cell, var: u32, lo: f64, hi: f64) {
    if let Some(e) = cell.iter_mut().find(|e| e.0 == var) {
        e.1 = e.1.max(lo);
        e.2 = e.2.min(hi);
    } else {
        cell.push((var, lo, hi));
    }
}

fn bounds(cell: &Cell, var: u32) -> (f64, f64) {
    cell.iter()
        .find(|e| e.0 == var)
        .map_or((f64::NEG_INFINITY, f64::INFINITY), |e| (e.1, e.2))
}

fn available_cuts<'g>(grid: &'g CutpointGrid, cell: &Cell, var: u32) -> &'g [f64] {
    let (lo, hi) = bounds(cell, var);
    grid.available(var as usize, lo, hi)
}

/// Number of variables with at least one usable cut in a cell.
fn num_split_vars(grid: &CutpointGrid, cell: &Cell) -> usize {
    let mut count = grid.cuts.iter().filter(|c| !c.is_empty()).count();
    for &(var, lo, hi) in cell {
        if !grid.cuts[var as usize].is_empty() && grid.available(var as usize, lo, hi).is_empty() {
            count -= 1;
        }
    }
    count
}

/// The `k`-th variable (in index order) with a usable cut.
fn nth_split_var(grid: &CutpointGrid, cell: &Cell, mut k: usize) -> u32 {
    for var in 0..grid.num_vars() as u32 {
        if !available_cuts(grid, cell, var).is_empty() {
            if k == 0 {
                return var;
            }
            k -= 1;
        }
    }
    unreachable!("fewer usable variables than counted")
}

fn child_cell(cell: &Cell, var: u32, cut: f64, left: bool) -> Cell {
    let mut c = cell.clone();
    if left {
        restrict(&mut c, var, f64::NEG_INFINITY, cut);
    } else {
        restrict(&mut c, var, cut, f64::INFINITY);
    }
    c
}

fn is_growable(tree: &DecisionTree, grid: &CutpointGrid, leaf: u32) -> bool {
    num_split_vars(grid, &cell_of(tree, leaf)) > 0
}

fn grow_prior_delta(cfg: &TreePriorConfig, depth: u32) -> f64 {
    let p = cfg.split_probability(depth);
    let pc = cfg.split_probability(depth + 1);
    p.ln() + 2.0 * (1.0 - pc).ln() - (1.0 - p).ln()
}

/// Draws a structure move. Returns `None` when no move is possible (a
/// root-only tree over covariates that cannot be split).
pub fn propose_move<R: Rng + ?Sized>(
    tree: &DecisionTree,
    grid: &CutpointGrid,
    cfg: &TreePriorConfig,
    rng: &mut R,
) -> Option<Proposal> {
    let growable: Vec<u32> = tree.leaves().filter(|&l| is_growable(tree, grid, l)).collect();
    let prunable: Vec<u32> = tree.prunable_nodes().collect();
    let lp = move_log_probs(growable.len(), prunable.len());
    if lp.iter().all(|p| *p == f64::NEG_INFINITY) {
        return None;
    }
    let u: f64 = rng.gen();
    let mut kind = 2;
    let mut acc = 0.0;
    for (k, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc && *l > f64::NEG_INFINITY {
            kind = k;
            break;
        }
    }
    if lp[kind] == f64::NEG_INFINITY {
        // Floating shortfall in the cumulative sum: take the last possible move.
        kind = (0..3).rev().find(|&k| lp[k] > f64::NEG_INFINITY).unwrap();
    }

    match kind {
        0 => {
            let leaf = growable[rng.gen_range(0..growable.len())];
            let cell = cell_of(tree, leaf);
            let nvars = num_split_vars(grid, &cell);
            let var = nth_split_var(grid, &cell, rng.gen_range(0..nvars));
            let cuts = available_cuts(grid, &cell, var);
            let cut = cuts[rng.gen_range(0..cuts.len())];
            let rule_lp = -(nvars as f64).ln() - (cuts.len() as f64).ln();

            let parent_was_prunable = tree.parent(leaf).is_some_and(|p| prunable.contains(&p));
            let prunable_after = prunable.len() + 1 - usize::from(parent_was_prunable);
            let children_growable = [true, false]
                .iter()
                .filter(|&&left| num_split_vars(grid, &child_cell(&cell, var, cut, left)) > 0)
                .count();
            let growable_after = growable.len() - 1 + children_growable;
            let lp_after = move_log_probs(growable_after, prunable_after);

            Some(Proposal {
                mv: Move::Grow { leaf, var, cut },
                log_q_forward: lp[0] - (growable.len() as f64).ln() + rule_lp,
                log_q_reverse: lp_after[1] - (prunable_after as f64).ln(),
                log_rule_prior_ratio: rule_lp,
                log_tree_prior_ratio: grow_prior_delta(cfg, tree.depth(leaf)),
            })
        }
        1 => {
            let node = prunable[rng.gen_range(0..prunable.len())];
            let (var, left, right) = match tree.node(node) {
                Node::Split {
                    var, left, right, ..
                } => (var, left, right),
                _ => unreachable!(),
            };
            let cell = cell_of(tree, node);
            let nvars = num_split_vars(grid, &cell);
            let ncuts = available_cuts(grid, &cell, var).len();
            let rule_lp = -(nvars as f64).ln() - (ncuts as f64).ln();

            let lost = usize::from(is_growable(tree, grid, left))
                + usize::from(is_growable(tree, grid, right));
            // The collapsed node can always re-grow its own rule.
            let growable_after = growable.len() - lost + 1;
            let parent_becomes_prunable = tree.parent(node).is_some_and(|p| {
                let (a, b) = tree.children(p).unwrap();
                let sibling = if a == node { b } else { a };
                tree.is_leaf(sibling)
            });
            let prunable_after = prunable.len() - 1 + usize::from(parent_becomes_prunable);
            let lp_after = move_log_probs(growable_after, prunable_after);

            Some(Proposal {
                mv: Move::Prune { node },
                log_q_forward: lp[1] - (prunable.len() as f64).ln(),
                log_q_reverse: lp_after[0] - (growable_after as f64).ln() + rule_lp,
                log_rule_prior_ratio: -rule_lp,
                log_tree_prior_ratio: -grow_prior_delta(cfg, tree.depth(node)),
            })
        }
        _ => {
            let node = prunable[rng.gen_range(0..prunable.len())];
            let (old_var, old_cut) = match tree.node(node) {
                Node::Split { var, cut, .. } => (var, cut),
                _ => unreachable!(),
            };
            let cell = cell_of(tree, node);
            let nvars = num_split_vars(grid, &cell);
            let var = nth_split_var(grid, &cell, rng.gen_range(0..nvars));
            let cuts = available_cuts(grid, &cell, var);
            let cut = cuts[rng.gen_range(0..cuts.len())];
            let ncuts_new = cuts.len();
            let ncuts_old = available_cuts(grid, &cell, old_var).len();

            let grow_count = |v: u32, c: f64| {
                [true, false]
                    .iter()
                    .filter(|&&left| num_split_vars(grid, &child_cell(&cell, v, c, left)) > 0)
                    .count()
            };
            let growable_after = growable.len() - grow_count(old_var, old_cut) + grow_count(var, cut);
            let lp_after = move_log_probs(growable_after, prunable.len());
            let pick = -(prunable.len() as f64).ln() - (nvars as f64).ln();

            Some(Proposal {
                mv: Move::Change { node, var, cut },
                log_q_forward: lp[2] + pick - (ncuts_new as f64).ln(),
                log_q_reverse: lp_after[2] + pick - (ncuts_old as f64).ln(),
                log_rule_prior_ratio: (ncuts_old as f64).ln() - (ncuts_new as f64).ln(),
                log_tree_prior_ratio: 0.0,
            })
        }
    }
}

/// MH log acceptance ratio from its four ingredients.
#[inline]
pub fn mh_log_ratio(log_prior_ratio: f64, log_lik_ratio: f64, log_q_reverse: f64, log_q_forward: f64) -> f64 {
    log_prior_ratio + log_lik_ratio + log_q_reverse - log_q_forward
}

/// Observations of one tree grouped by node. Every live node owns the range
/// `start[id]..end[id]` of `perm`; a split node's children divide its range,
/// left part first.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct TreeIndex {
    perm: Vec<u32>,
    start: Vec<u32>,
    end: Vec<u32>,
}

impl TreeIndex {
    pub(crate) fn build(tree: &DecisionTree, columns: &[Vec<f64>], n: usize) -> Self {
        let mut index = TreeIndex {
            perm: (0..n as u32).collect(),
            start: Vec::new(),
            end: Vec::new(),
        };
        index.set(0, 0, n);
        let mut buf = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            if let Node::Split { var, cut, left, right } = tree.node(id) {
                let (s, e) = index.range(id);
                let col = &columns[var as usize];
                buf.clear();
                buf.extend(index.perm[s..e].iter().copied().filter(|&i| col[i as usize] <= cut));
                let nl = buf.len();
                buf.extend(index.perm[s..e].iter().copied().filter(|&i| col[i as usize] > cut));
                index.perm[s..e].copy_from_slice(&buf);
                index.set(left, s, s + nl);
                index.set(right, s + nl, e);
                stack.push(left);
                stack.push(right);
            }
        }
        index
    }

    #[inline]
    fn range(&self, id: u32) -> (usize, usize) {
        (self.start[id as usize] as usize, self.end[id as usize] as usize)
    }

    #[inline]
    pub(crate) fn members(&self, id: u32) -> &[u32] {
        let (s, e) = self.range(id);
        &self.perm[s..e]
    }

    fn set(&mut self, id: u32, s: usize, e: usize) {
        let k = id as usize;
        if self.start.len() <= k {
            self.start.resize(k + 1, 0);
            self.end.resize(k + 1, 0);
        }
        self.start[k] = s as u32;
        self.end[k] = e as u32;
    }
}

/// Adds each leaf's value to `out` for the observations it holds.
pub(crate) fn add_leaf_values(tree: &DecisionTree, index: &TreeIndex, out: &mut [f64]) {
    for leaf in tree.leaves() {
        let v = tree.leaf_value(leaf);
        for &i in index.members(leaf) {
            out[i as usize] += v;
        }
    }
}

#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    stats: Vec<LeafStats>,
    theta: Vec<f64>,
    new_theta: Vec<f64>,
    buf: Vec<u32>,
    leaves: Vec<u32>,
}

/// (Σ wᵢeᵢ, Σ wᵢ²) over `members`, four partial sums wide.
#[inline]
fn weighted_sums<const UNIT: bool>(members: &[u32], resid: &[f64], weight: &[f64]) -> (f64, f64) {
    let mut we = [0.0; 4];
    let mut ww = [0.0; 4];
    let chunks = members.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..4 {
            let i = c[k] as usize;
            if UNIT {
                we[k] += resid[i];
            } else {
                let w = weight[i];
                we[k] += w * resid[i];
                ww[k] += w * w;
            }
        }
    }
    for (k, &i) in rest.iter().enumerate() {
        let i = i as usize;
        if UNIT {
            we[k] += resid[i];
        } else {
            let w = weight[i];
            we[k] += w * resid[i];
            ww[k] += w * w;
        }
    }
    let s_we = (we[0] + we[1]) + (we[2] + we[3]);
    let s_ww = if UNIT { members.len() as f64 } else { (ww[0] + ww[1]) + (ww[2] + ww[3]) };
    (s_we, s_ww)
}

/// Statistics of the partial residual `eᵢ + wᵢθ` over `members`.
#[inline]
fn leaf_stats<const UNIT: bool>(members: &[u32], theta: f64, resid: &[f64], weight: &[f64]) -> LeafStats {
    let (s_we, s_ww) = weighted_sums::<UNIT>(members, resid, weight);
    LeafStats { s_wr: s_we + theta * s_ww, s_ww }
}

/// Leaf statistics of `members` split by `x <= cut`, added into `side`.
fn side_stats<const UNIT: bool>(
    members: &[u32],
    theta: f64,
    col: &[f64],
    cut: f64,
    resid: &[f64],
    weight: &[f64],
    side: &mut [LeafStats; 2],
) {
    // Two lanes per side keep consecutive updates independent.
    let mut acc = [[0.0f64; 2]; 4];
    for (j, &i) in members.iter().enumerate() {
        let i = i as usize;
        let k = usize::from(col[i] > cut) * 2 + (j & 1);
        if UNIT {
            acc[k][0] += resid[i];
            acc[k][1] += 1.0;
        } else {
            let w = weight[i];
            acc[k][0] += w * resid[i];
            acc[k][1] += w * w;
        }
    }
    for (s, lanes) in side.iter_mut().zip(acc.chunks_exact(2)) {
        let s_ww = lanes[0][1] + lanes[1][1];
        s.s_wr += lanes[0][0] + lanes[1][0] + theta * s_ww;
        s.s_ww += s_ww;
    }
}

/// Shifts this tree's output on `members` by `d`.
#[inline]
fn shift<const UNIT: bool>(members: &[u32], d: f64, weight: &[f64], resid: &mut [f64], fit: &mut [f64]) {
    for &i in members {
        let i = i as usize;
        resid[i] -= if UNIT { d } else { weight[i] * d };
        fit[i] += d;
    }
}

/// Re-routes the observations of `node`'s range by `x <= cut` into `left`
/// and `right`, applying each one's change of leaf value on the way.
/// `sources` are the old leaves that tile the range, in order.
#[allow(clippy::too_many_arguments)]
fn reroute<const UNIT: bool>(
    index: &mut TreeIndex,
    node: u32,
    sources: &[u32],
    col: &[f64],
    cut: f64,
    (left, right): (u32, u32),
    old: &[f64],
    new: &[f64],
    weight: &[f64],
    resid: &mut [f64],
    fit: &mut [f64],
    buf: &mut Vec<u32>,
) {
    let (s, e) = index.range(node);
    let len = e - s;
    buf.clear();
    buf.resize(2 * len, 0);
    let (mut nl, mut nr) = (0usize, len);
    for &src in sources {
        let before = old[src as usize];
        for &i in index.members(src) {
            let iu = i as usize;
            let goes_right = col[iu] > cut;
            let leaf = select_unpredictable(goes_right, right, left);
            let d = new[leaf as usize] - before;
            resid[iu] -= if UNIT { d } else { weight[iu] * d };
            fit[iu] += d;
            let pos = select_unpredictable(goes_right, nr, nl);
            buf[pos] = i;
            nl += usize::from(!goes_right);
            nr += usize::from(goes_right);
        }
    }
    let n_left = nl;
    index.perm[s..s + n_left].copy_from_slice(&buf[..n_left]);
    index.perm[s + n_left..e].copy_from_slice(&buf[len..nr]);
    index.set(left, s, s + n_left);
    index.set(right, s + n_left, e);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveOutcome {
    pub proposed: Option<MoveKind>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
}

/// One tree's backfitting update against a shared residual.
///
/// `resid` holds the full residual (target minus every fit including this
/// tree's). On return it again holds the full residual under the updated
/// tree; `fit` tracks this forest's summed output and is adjusted by the
/// change in this tree's contribution.
pub(crate) struct TreeUpdate<'a> {
    pub columns: &'a [Vec<f64>],
    pub grid: &'a CutpointGrid,
    pub cfg: &'a TreePriorConfig,
    pub weight: &'a [f64],
    pub sigma2: f64,
    pub update_structure: bool,
    /// Every weight is 1 (control forest).
    pub unit_weight: bool,
}

impl TreeUpdate<'_> {
    pub(crate) fn run<R: Rng + ?Sized>(
        &self,
        tree: &mut DecisionTree,
        index: &mut TreeIndex,
        resid: &mut [f64],
        fit: &mut [f64],
        scratch: &mut Scratch,
        rng: &mut R,
    ) -> MoveOutcome {
        if self.unit_weight {
            self.run_with::<true, R>(tree, index, resid, fit, scratch, rng)
        } else {
            self.run_with::<false, R>(tree, index, resid, fit, scratch, rng)
        }
    }

    fn run_with<const UNIT: bool, R: Rng + ?Sized>(
        &self,
        tree: &mut DecisionTree,
        index: &mut TreeIndex,
        resid: &mut [f64],
        fit: &mut [f64],
        scratch: &mut Scratch,
        rng: &mut R,
    ) -> MoveOutcome {
        let v = self.cfg.leaf_prior_variance;
        let sigma2 = self.sigma2;
        let weight = self.weight;
        let proposal = if self.update_structure {
            propose_move(tree, self.grid, self.cfg, rng)
        } else {
            None
        };

        let len = tree.arena_len();
        scratch.stats.clear();
        scratch.stats.resize(len, LeafStats::default());
        scratch.theta.clear();
        scratch.theta.resize(len, 0.0);
        for leaf in tree.leaves() {
            let theta = tree.leaf_value(leaf);
            scratch.theta[leaf as usize] = theta;
            scratch.stats[leaf as usize] = leaf_stats::<UNIT>(index.members(leaf), theta, resid, weight);
        }
        let theta = &scratch.theta;
        let stats = &mut scratch.stats;

        // Children of the proposed rule, from the cells it would re-route.
        let mut proposed = [LeafStats::default(); 2];
        let add_side = |cell: u32, var: u32, cut: f64, out: &mut [LeafStats; 2]| {
            let col = &self.columns[var as usize];
            side_stats::<UNIT>(index.members(cell), theta[cell as usize], col, cut, resid, weight, out);
        };
        match proposal.map(|p| p.mv) {
            Some(Move::Grow { leaf, var, cut }) => add_side(leaf, var, cut, &mut proposed),
            Some(Move::Change { node, var, cut }) => {
                let (a, b) = tree.children(node).unwrap();
                add_side(a, var, cut, &mut proposed);
                add_side(b, var, cut, &mut proposed);
            }
            _ => {}
        }

        let mut accepted = false;
        if let Some(p) = proposal {
            let lm = |s: &LeafStats| s.log_marginal(v, sigma2);
            let lik = match p.mv {
                Move::Grow { leaf, .. } => lm(&proposed[0]) + lm(&proposed[1]) - lm(&stats[leaf as usize]),
                Move::Prune { node } => {
                    let (a, b) = tree.children(node).unwrap();
                    let (a, b) = (stats[a as usize], stats[b as usize]);
                    lm(&a.add(b)) - lm(&a) - lm(&b)
                }
                Move::Change { node, .. } => {
                    let (a, b) = tree.children(node).unwrap();
                    lm(&proposed[0]) + lm(&proposed[1]) - lm(&stats[a as usize]) - lm(&stats[b as usize])
                }
            };
            let log_ratio = mh_log_ratio(
                p.log_tree_prior_ratio + p.log_rule_prior_ratio,
                lik,
                p.log_q_reverse,
                p.log_q_forward,
            );
            accepted = log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio;
        }

        // Apply the move; `moved` is the re-routed node, its old leaves and
        // the rule, or the merged node and its old children.
        enum Moved {
            None,
            Split { node: u32, sources: [u32; 2], count: usize, var: u32, cut: f64, children: (u32, u32) },
            Merge { node: u32, children: (u32, u32) },
        }
        let mut moved = Moved::None;
        if accepted {
            match proposal.unwrap().mv {
                Move::Grow { leaf, var, cut } => {
                    let (l, r) = tree.split_leaf(leaf, var, cut);
                    let need = tree.arena_len();
                    if stats.len() < need {
                        stats.resize(need, LeafStats::default());
                    }
                    stats[l as usize] = proposed[0];
                    stats[r as usize] = proposed[1];
                    moved = Moved::Split { node: leaf, sources: [leaf, leaf], count: 1, var, cut, children: (l, r) };
                }
                Move::Prune { node } => {
                    let (a, b) = tree.children(node).unwrap();
                    let merged = stats[a as usize].add(stats[b as usize]);
                    tree.collapse(node, 0.0);
                    stats[node as usize] = merged;
                    moved = Moved::Merge { node, children: (a, b) };
                }
                Move::Change { node, var, cut } => {
                    let (a, b) = tree.children(node).unwrap();
                    tree.set_rule(node, var, cut);
                    stats[a as usize] = proposed[0];
                    stats[b as usize] = proposed[1];
                    moved = Moved::Split { node, sources: [a, b], count: 2, var, cut, children: (a, b) };
                }
            }
        }

        // Fresh leaf values on the current structure. Ids released by a
        // prune must stay addressable in the old values.
        let len = tree.arena_len();
        let cap = len.max(theta.len());
        let old_theta = &mut scratch.theta;
        old_theta.resize(cap, 0.0);
        let new_theta = &mut scratch.new_theta;
        new_theta.clear();
        new_theta.resize(cap, 0.0);
        let leaves = &mut scratch.leaves;
        leaves.clear();
        leaves.extend(tree.leaves());
        for &leaf in leaves.iter() {
            let (mean, var) = stats[leaf as usize].posterior(v, sigma2);
            let xi: f64 = rng.sample(StandardNormal);
            let val = mean + var.sqrt() * xi;
            tree.set_leaf_value(leaf, val);
            new_theta[leaf as usize] = val;
        }

        let (old, new) = (&old_theta[..], &new_theta[..]);
        let (skip_a, skip_b) = match moved {
            Moved::Split { children, .. } => children,
            Moved::Merge { node, .. } => (node, node),
            Moved::None => (super::NONE, super::NONE),
        };
        for &leaf in leaves.iter().filter(|&&l| l != skip_a && l != skip_b) {
            let d = new[leaf as usize] - old[leaf as usize];
            shift::<UNIT>(index.members(leaf), d, weight, resid, fit);
        }
        match moved {
            Moved::Split { node, sources, count, var, cut, children } => reroute::<UNIT>(
                index,
                node,
                &sources[..count],
                &self.columns[var as usize],
                cut,
                children,
                old,
                new,
                weight,
                resid,
                fit,
                &mut scratch.buf,
            ),
            Moved::Merge { node, children: (a, b) } => {
                for src in [a, b] {
                    let d = new[node as usize] - old[src as usize];
                    shift::<UNIT>(index.members(src), d, weight, resid, fit);
                }
            }
            Moved::None => {}
        }

        MoveOutcome {
            proposed: proposal.map(|p| match p.mv {
                Move::Grow { .. } => MoveKind::Grow,
                Move::Prune { .. } => MoveKind::Prune,
                Move::Change { .. } => MoveKind::Change,
            }),
            accepted,
        }
    }
}

/// One MH structure step followed by a conjugate leaf refresh.
///
/// `residual` is the target for this tree alone (the outcome with every other
/// component removed).
#[allow(clippy::too_many_arguments)]
pub fn mh_update_tree<R: Rng + ?Sized>(
    tree: &DecisionTree,
    design: &Design,
    residual: &[f64],
    weight: &[f64],
    sigma2: f64,
    cfg: &TreePriorConfig,
    grid: &CutpointGrid,
    rng: &mut R,
) -> DecisionTree {
    let mut tree = tree.clone();
    let mut index = TreeIndex::build(&tree, &design.columns, design.n);
    let mut fit = vec![0.0; design.n];
    add_leaf_values(&tree, &index, &mut fit);
    let mut resid: Vec<f64> = (0..design.n).map(|i| residual[i] - weight[i] * fit[i]).collect();
    let update = TreeUpdate {
        columns: &design.columns,
        grid,
        cfg,
        weight,
        sigma2,
        update_structure: true,
        unit_weight: false,
    };
    update.run(&mut tree, &mut index, &mut resid, &mut fit, &mut Scratch::default(), rng);
    tree
}
