//! Single regression-tree summary of posterior-mean effects.
//!
//! Unit-level ATEs are swept out of τ̂ first; the adjusted values are fit by
//! CART (squared error, midpoint thresholds, `x ≤ c` goes left), pruned by
//! cost complexity with 10-fold cross-validation and the one-standard-error
//! rule. Raw τ draws are then averaged over the resulting leaves.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::Design;
use crate::error::{Error, Result};
use crate::estimands::{group_ate_from_matrix, EstimandPosterior, Groups};
use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreeSummaryConfig {
    pub min_leaf_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TreeSummaryConfig {
    fn default() -> Self {
        TreeSummaryConfig { min_leaf_fraction: 0.05, folds: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CartNode {
    Leaf { value: f64, size: usize },
    Split { var: usize, threshold: f64, left: usize, right: usize },
}

/// A fitted CART tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CartTree {
    pub nodes: Vec<CartNode>,
}

impl CartTree {
    pub fn predict_node(&self, row: &dyn Fn(usize) -> f64) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                CartNode::Leaf { .. } => return id,
                CartNode::Split { var, threshold, left, right } => {
                    id = if row(var) <= threshold { left } else { right };
                }
            }
        }
    }

    fn leaf_of(&self, design: &Design, i: usize) -> usize {
        self.predict_node(&|v| design.columns[v][i])
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&k| matches!(self.nodes[k], CartNode::Leaf { .. }))
            .collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().len()
    }
}

/// Internal growing representation with per-node statistics.
#[derive(Debug, Clone)]
struct GrowNode {
    rows: Vec<usize>,
    mean: f64,
    sse: f64,
    split: Option<(usize, f64, usize, usize)>,
}

struct Grown {
    nodes: Vec<GrowNode>,
}

fn sse_of(y: &[f64], rows: &[usize]) -> (f64, f64) {
    let m = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
    (m, rows.iter().map(|&i| (y[i] - m) * (y[i] - m)).sum())
}

fn best_split(x: &Design, y: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
    let parent = total_sq - total * total / n as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = rows.to_vec();
    for (v, col) in x.columns.iter().enumerate() {
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut s = 0.0;
        let mut sq = 0.0;
        for k in 0..n - 1 {
            let yi = y[order[k]];
            s += yi;
            sq += yi * yi;
            let nl = k + 1;
            if col[order[k]] == col[order[k + 1]] || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let nr = n - nl;
            let sse = (sq - s * s / nl as f64) + ((total_sq - sq) - (total - s) * (total - s) / nr as f64);
            let gain = parent - sse;
            if best.map_or(true, |b| gain > b.2) {
                best = Some((v, 0.5 * (col[order[k]] + col[order[k + 1]]), gain));
            }
        }
    }
    // gains at round-off level are not splits
    let tol = 1e-12 * parent.abs().max(total_sq.abs()).max(1e-300);
    best.filter(|b| b.2 > tol)
}

fn grow(x: &Design, y: &[f64], rows: Vec<usize>, min_leaf: usize) -> Grown {
    let (m, sse) = sse_of(y, &rows);
    let mut g = Grown { nodes: vec![GrowNode { rows, mean: m, sse, split: None }] };
    let mut stack = vec![0];
    while let Some(id) = stack.pop() {
        let Some((var, thr, _)) = best_split(x, y, &g.nodes[id].rows, min_leaf) else {
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            g.nodes[id].rows.iter().partition(|&&i| x.columns[var][i] <= thr);
        let (ml, sl) = sse_of(y, &l);
        let (mr, sr) = sse_of(y, &r);
        let li = g.nodes.len();
        g.nodes.push(GrowNode { rows: l, mean: ml, sse: sl, split: None });
        g.nodes.push(GrowNode { rows: r, mean: mr, sse: sr, split: None });
        g.nodes[id].split = Some((var, thr, li, li + 1));
        stack.push(li + 1);
        stack.push(li);
    }
    g
}

/// Weakest-link pruning sequence: (α, set of collapsed nodes) pairs, α
/// increasing, starting from the full tree at α = 0.
fn pruning_sequence(g: &Grown) -> Vec<(f64, Vec<bool>)> {
    let mut collapsed = vec![false; g.nodes.len()];
    let mut seq = vec![(0.0, collapsed.clone())];
    loop {
        // subtree SSE and leaf count under the current collapse set
        let mut best: Option<(usize, f64)> = None;
        for id in 0..g.nodes.len() {
            if collapsed[id] || g.nodes[id].split.is_none() || !reachable(g, &collapsed, id) {
                continue;
            }
            let (r, leaves) = subtree(g, &collapsed, id);
            let alpha = (g.nodes[id].sse - r) / (leaves as f64 - 1.0);
            if best.map_or(true, |b| alpha < b.1 - 1e-15) {
                best = Some((id, alpha));
            }
        }
        let Some((_, alpha)) = best else { break };
        // collapse every node attaining the minimum (ties pruned together)
        for id in 0..g.nodes.len() {
            if collapsed[id] || g.nodes[id].split.is_none() || !reachable(g, &collapsed, id) {
                continue;
            }
            let (r, leaves) = subtree(g, &collapsed, id);
            let a = (g.nodes[id].sse - r) / (leaves as f64 - 1.0);
            if a <= alpha + 1e-12 * alpha.abs().max(1e-300) {
                collapsed[id] = true;
            }
        }
        seq.push((alpha.max(0.0), collapsed.clone()));
    }
    seq
}

fn reachable(g: &Grown, collapsed: &[bool], id: usize) -> bool {
    // walk from the root
    let mut stack = vec![0];
    while let Some(k) = stack.pop() {
        if k == id {
            return true;
        }
        if collapsed[k] {
            continue;
        }
        if let Some((_, _, l, r)) = g.nodes[k].split {
            stack.push(l);
            stack.push(r);
        }
    }
    false
}

fn subtree(g: &Grown, collapsed: &[bool], id: usize) -> (f64, usize) {
    match g.nodes[id].split {
        Some((_, _, l, r)) if !collapsed[id] => {
            let (a, na) = subtree(g, collapsed, l);
            let (b, nb) = subtree(g, collapsed, r);
            (a + b, na + nb)
        }
        _ => (g.nodes[id].sse, 1),
    }
}

fn collapse_for_alpha(seq: &[(f64, Vec<bool>)], alpha: f64) -> &Vec<bool> {
    let k = seq.iter().rposition(|(a, _)| *a <= alpha).unwrap_or(0);
    &seq[k].1
}

fn extract(g: &Grown, collapsed: &[bool]) -> CartTree {
    let mut nodes = Vec::new();
    fn rec(g: &Grown, collapsed: &[bool], id: usize, out: &mut Vec<CartNode>) -> usize {
        let me = out.len();
        out.push(CartNode::Leaf { value: g.nodes[id].mean, size: g.nodes[id].rows.len() });
        if let (Some((var, threshold, l, r)), false) = (g.nodes[id].split, collapsed[id]) {
            let left = rec(g, collapsed, l, out);
            let right = rec(g, collapsed, r, out);
            out[me] = CartNode::Split { var, threshold, left, right };
        }
        me
    }
    rec(g, collapsed, 0, &mut nodes);
    CartTree { nodes }
}

fn predict_grown(g: &Grown, collapsed: &[bool], x: &Design, i: usize) -> f64 {
    let mut id = 0;
    loop {
        match g.nodes[id].split {
            Some((var, thr, l, r)) if !collapsed[id] => {
                id = if x.columns[var][i] <= thr { l } else { r };
            }
            _ => return g.nodes[id].mean,
        }
    }
}

/// CART with cost-complexity pruning chosen by k-fold CV and the 1-SE rule.
pub fn fit_pruned_cart(x: &Design, y: &[f64], cfg: &TreeSummaryConfig) -> Result<CartTree> {
    let n = y.len();
    if x.n != n || n == 0 {
        return Err(Error::Shape("tree summary inputs differ in length".into()));
    }
    let min_leaf = ((cfg.min_leaf_fraction * n as f64).ceil() as usize).max(1);
    let full = grow(x, y, (0..n).collect(), min_leaf);
    let seq = pruning_sequence(&full);
    if seq.len() == 1 {
        return Ok(extract(&full, &seq[0].1));
    }
    // geometric midpoints of consecutive α as CV probes
    let probes: Vec<f64> = (0..seq.len())
        .map(|k| match seq.get(k + 1) {
            Some(next) => (seq[k].0 * next.0).sqrt(),
            None => seq[k].0 * 2.0 + f64::MIN_POSITIVE,
        })
        .collect();

    let folds = cfg.folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![0usize; n];
    for (k, &i) in order.iter().enumerate() {
        fold_of[i] = k % folds;
    }
    let mut errors = vec![vec![0.0; n]; probes.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        if train.is_empty() {
            continue;
        }
        let g = grow(x, y, train, min_leaf);
        let s = pruning_sequence(&g);
        for (p, &alpha) in probes.iter().enumerate() {
            let c = collapse_for_alpha(&s, alpha);
            for i in (0..n).filter(|&i| fold_of[i] == f) {
                let e = y[i] - predict_grown(&g, c, x, i);
                errors[p][i] = e * e;
            }
        }
    }
    let cv: Vec<(f64, f64)> = errors
        .iter()
        .map(|e| {
            let m = mean(e);
            let se = crate::stats::sample_sd(e) / (n as f64).sqrt();
            (m, se)
        })
        .collect();
    let (best, _) = cv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, (m, _))| if *m < acc.1 { (k, *m) } else { acc });
    let threshold = cv[best].0 + cv[best].1;
    // simplest tree (largest α) within one SE of the minimum
    let chosen = (0..probes.len()).rev().find(|&k| cv[k].0 <= threshold).unwrap_or(best);
    Ok(extract(&full, &seq[chosen].1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupDifference {
    pub lower: String,
    pub upper: String,
    pub posterior: EstimandPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeSummary {
    pub variables: Vec<String>,
    pub tree: CartTree,
    /// Leaf membership per unit, named `leaf<k>` in tree order.
    #[serde(skip)]
    pub membership: Groups,
    pub subgroups: Vec<EstimandPosterior>,
    /// `upper − lower` for every pair of subgroups.
    pub differences: Vec<SubgroupDifference>,
}

/// Fits the summary tree to τ̂ and pushes raw τ draws through its leaves.
///
/// `tau_draws` is a row-major draws × n matrix in natural units and
/// `tau_hat` its column means.
pub fn fit_tree_summary(
    tau_hat: &[f64],
    tau_draws: &[f64],
    moderators: &Design,
    unit_groups: Option<&Groups>,
    cfg: &TreeSummaryConfig,
) -> Result<TreeSummary> {
    let n = tau_hat.len();
    let mut adjusted = tau_hat.to_vec();
    if let Some(g) = unit_groups {
        if g.codes.len() != n {
            return Err(Error::Shape("unit partition does not cover the units".into()));
        }
        for idx in g.members().iter().filter(|m| !m.is_empty()) {
            let m = idx.iter().map(|&i| tau_hat[i]).sum::<f64>() / idx.len() as f64;
            for &i in idx {
                adjusted[i] -= m;
            }
        }
    }
    let tree = fit_pruned_cart(moderators, &adjusted, cfg)?;
    let leaves = tree.leaves();
    let codes: Vec<u32> = (0..n)
        .map(|i| {
            let l = tree.leaf_of(moderators, i);
            leaves.iter().position(|&k| k == l).expect("leaf") as u32
        })
        .collect();
    let membership = Groups {
        names: (1..=leaves.len()).map(|k| format!("leaf{k}")).collect(),
        codes,
    };
    let subgroups = group_ate_from_matrix(tau_draws, n, &membership)?;
    let mut differences = Vec::new();
    for a in 0..subgroups.len() {
        for b in a + 1..subgroups.len() {
            let d: Vec<f64> = subgroups[b]
                .draws
                .iter()
                .zip(&subgroups[a].draws)
                .map(|(u, l)| u - l)
                .collect();
            differences.push(SubgroupDifference {
                lower: subgroups[a].name.clone(),
                upper: subgroups[b].name.clone(),
                posterior: EstimandPosterior::new(
                    format!("{} - {}", subgroups[b].name, subgroups[a].name),
                    d,
                )?,
            });
        }
    }
    Ok(TreeSummary {
        variables: moderators.names.clone(),
        tree,
        membership,
        subgroups,
        differences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn design(cols: Vec<(&str, Vec<f64>)>) -> Design {
        let (names, columns): (Vec<_>, Vec<_>) = cols.into_iter().map(|(n, c)| (n.to_string(), c)).unzip();
        Design::from_columns(names, columns).unwrap()
    }

    #[test]
    fn step_is_recovered_with_one_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tau: Vec<f64> = u.iter().map(|v| if *v < 0.5 { 0.0 } else { 1.0 }).collect();
        let draws: Vec<f64> = tau.iter().chain(&tau).copied().collect();
        let x = design(vec![("noise", noise), ("u", u.clone())]);
        let s = fit_tree_summary(&tau, &draws, &x, None, &TreeSummaryConfig::default()).unwrap();
        assert_eq!(s.tree.num_leaves(), 2);
        let CartNode::Split { var, threshold, .. } = s.tree.nodes[0] else { panic!() };
        assert_eq!(var, 1);
        let below = u.iter().copied().filter(|v| *v < 0.5).fold(f64::MIN, f64::max);
        let above = u.iter().copied().filter(|v| *v >= 0.5).fold(f64::MAX, f64::min);
        assert!(threshold > below && threshold <= above);
        assert_eq!(s.subgroups[0].point, 0.0);
        assert_eq!(s.subgroups[1].point, 1.0);
        assert_eq!(s.differences.len(), 1);
    }

    #[test]
    fn constant_effects_give_a_single_leaf() {
        let n = 50;
        let x = design(vec![("u", (0..n).map(|i| i as f64).collect())]);
        let tau = vec![0.3; n];
        let s = fit_tree_summary(&tau, &tau, &x, None, &TreeSummaryConfig::default()).unwrap();
        assert_eq!(s.tree.num_leaves(), 1);
        assert!(s.differences.is_empty());
    }

    #[test]
    fn unit_effects_are_swept_out() {
        // τ̂ differs only by unit; after sweeping, nothing is left to split
        let n = 60;
        let codes: Vec<u32> = (0..n).map(|i| (i / 20) as u32).collect();
        let tau: Vec<f64> = codes.iter().map(|&c| c as f64).collect();
        let x = design(vec![("unitlike", codes.iter().map(|&c| c as f64).collect())]);
        let g = Groups { names: vec!["a".into(), "b".into(), "c".into()], codes };
        let s = fit_tree_summary(&tau, &tau, &x, Some(&g), &TreeSummaryConfig::default()).unwrap();
        assert_eq!(s.tree.num_leaves(), 1);
        let s = fit_tree_summary(&tau, &tau, &x, None, &TreeSummaryConfig::default()).unwrap();
        assert!(s.tree.num_leaves() >= 2);
    }

    #[test]
    fn subgroups_equal_group_ate_on_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 120;
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let draws: Vec<f64> = (0..n * 30).map(|k| u[k % n].abs() + rng.gen_range(-0.3..0.3)).collect();
        let tau_hat = crate::sampler::column_means(&draws, n);
        let x = design(vec![("u", u)]);
        let s = fit_tree_summary(&tau_hat, &draws, &x, None, &TreeSummaryConfig::default()).unwrap();
        let direct = group_ate_from_matrix(&draws, n, &s.membership).unwrap();
        assert_eq!(s.subgroups, direct);
        assert!(s.tree.num_leaves() >= 2);
    }

    #[test]
    fn min_leaf_size_is_respected() {
        let n = 100;
        let u: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = u.iter().map(|v| if *v < 2.0 { 10.0 } else { (v * 0.1).sin() }).collect();
        let tree = fit_pruned_cart(&design(vec![("u", u)]), &y, &TreeSummaryConfig::default()).unwrap();
        for node in &tree.nodes {
            if let CartNode::Leaf { size, .. } = node {
                assert!(*size >= 5);
            }
        }
    }
}
