//! Axis-aligned regression trees with scalar Gaussian leaves.
//!
//! Trees live in a small arena. Internal nodes route `x[var] <= cut` to the
//! left child. The [`mcmc`] submodule holds the structure prior moves and the
//! conjugate leaf updates shared by the control and moderating forests.

pub mod mcmc;

use serde::{Deserialize, Serialize};

use crate::dataset::Design;
use crate::error::{Error, Result};

pub use mcmc::{
    integrated_log_marginal, leaf_sufficient_stats, mh_update_tree, propose_move,
    sample_leaf_values, LeafStats, Move, Proposal,
};

pub(crate) const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Leaf { value: f64 },
    Split { var: u32, cut: f64, left: u32, right: u32 },
    Vacant,
}

#[derive(Debug, Clone)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    parent: Vec<u32>,
    depth: Vec<u32>,
    free: Vec<u32>,
}

impl Default for DecisionTree {
    fn default() -> Self {
        Self::root(0.0)
    }
}

/// Trees compare by shape and values, not by arena layout.
impl PartialEq for DecisionTree {
    fn eq(&self, other: &Self) -> bool {
        self.to_records() == other.to_records()
    }
}

impl DecisionTree {
    pub fn root(value: f64) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf { value }],
            parent: vec![NONE],
            depth: vec![0],
            free: Vec::new(),
        }
    }

    /// Single split `x[var] <= cut` with the given leaf values.
    pub fn stump(var: usize, cut: f64, left: f64, right: f64) -> Self {
        let mut t = Self::root(0.0);
        let (l, r) = t.split_leaf(0, var as u32, cut);
        t.set_leaf_value(l, left);
        t.set_leaf_value(r, right);
        t
    }

    pub fn node(&self, id: u32) -> Node {
        self.nodes[id as usize]
    }

    pub fn depth(&self, id: u32) -> u32 {
        self.depth[id as usize]
    }

    pub fn parent(&self, id: u32) -> Option<u32> {
        let p = self.parent[id as usize];
        (p != NONE).then_some(p)
    }

    pub(crate) fn arena_len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, id: u32) -> bool {
        matches!(self.nodes[id as usize], Node::Leaf { .. })
    }

    pub fn leaf_value(&self, id: u32) -> f64 {
        match self.nodes[id as usize] {
            Node::Leaf { value } => value,
            _ => panic!("node {id} is not a leaf"),
        }
    }

    pub fn set_leaf_value(&mut self, id: u32, v: f64) {
        match &mut self.nodes[id as usize] {
            Node::Leaf { value } => *value = v,
            _ => panic!("node {id} is not a leaf"),
        }
    }

    /// Leaf ids in increasing arena order.
    pub fn leaves(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Leaf { .. }))
            .map(|(i, _)| i as u32)
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Split { .. }))
            .map(|(i, _)| i as u32)
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().count()
    }

    /// Internal nodes whose children are both leaves.
    pub fn prunable_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.internal_nodes().filter(move |&id| match self.nodes[id as usize] {
            Node::Split { left, right, .. } => self.is_leaf(left) && self.is_leaf(right),
            _ => false,
        })
    }

    pub fn max_var(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { var, .. } => Some(*var as usize),
                _ => None,
            })
            .max()
    }

    fn alloc(&mut self, node: Node, parent: u32, depth: u32) -> u32 {
        if let Some(id) = self.free.pop() {
            let i = id as usize;
            self.nodes[i] = node;
            self.parent[i] = parent;
            self.depth[i] = depth;
            id
        } else {
            self.nodes.push(node);
            self.parent.push(parent);
            self.depth.push(depth);
            (self.nodes.len() - 1) as u32
        }
    }

    fn release(&mut self, id: u32) {
        self.nodes[id as usize] = Node::Vacant;
        self.free.push(id);
        while matches!(self.nodes.last(), Some(Node::Vacant)) && self.nodes.len() > 1 {
            let last = (self.nodes.len() - 1) as u32;
            self.nodes.pop();
            self.parent.pop();
            self.depth.pop();
            self.free.retain(|&f| f != last);
        }
    }

    /// Turns a leaf into a split with two zero-valued leaves. Returns the
    /// (left, right) child ids.
    pub(crate) fn split_leaf(&mut self, leaf: u32, var: u32, cut: f64) -> (u32, u32) {
        debug_assert!(self.is_leaf(leaf));
        let d = self.depth[leaf as usize] + 1;
        let left = self.alloc(Node::Leaf { value: 0.0 }, leaf, d);
        let right = self.alloc(Node::Leaf { value: 0.0 }, leaf, d);
        self.nodes[leaf as usize] = Node::Split {
            var,
            cut,
            left,
            right,
        };
        (left, right)
    }

    /// Collapses an internal node with two leaf children into a leaf.
    pub(crate) fn collapse(&mut self, node: u32, value: f64) {
        let (left, right) = match self.nodes[node as usize] {
            Node::Split { left, right, .. } => (left, right),
            _ => panic!("node {node} is not internal"),
        };
        debug_assert!(self.is_leaf(left) && self.is_leaf(right));
        self.nodes[node as usize] = Node::Leaf { value };
        // Release the higher id first so trailing slots are trimmed.
        let (a, b) = if left > right { (left, right) } else { (right, left) };
        self.release(a);
        self.release(b);
    }

    pub(crate) fn set_rule(&mut self, node: u32, new_var: u32, new_cut: f64) {
        match &mut self.nodes[node as usize] {
            Node::Split { var, cut, .. } => {
                *var = new_var;
                *cut = new_cut;
            }
            _ => panic!("node {node} is not internal"),
        }
    }

    pub fn children(&self, id: u32) -> Option<(u32, u32)> {
        match self.nodes[id as usize] {
            Node::Split { left, right, .. } => Some((left, right)),
            _ => None,
        }
    }

    /// Leaf reached by row `i` of a column-major design.
    #[inline]
    pub fn route(&self, columns: &[Vec<f64>], i: usize) -> u32 {
        let mut id = 0u32;
        loop {
            match self.nodes[id as usize] {
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    id = if columns[var as usize][i] <= cut {
                        left
                    } else {
                        right
                    }
                }
                Node::Leaf { .. } => return id,
                Node::Vacant => unreachable!("routing reached a vacant slot"),
            }
        }
    }

    pub fn route_row(&self, row: &[f64]) -> u32 {
        let mut id = 0u32;
        loop {
            match self.nodes[id as usize] {
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => id = if row[var as usize] <= cut { left } else { right },
                _ => return id,
            }
        }
    }

    /// Per-variable open interval `(lo, hi)` of cut values still able to
    /// split the cell of `id`.
    #[cfg(test)]
    pub(crate) fn cell_bounds(&self, id: u32, var: u32) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut child = id;
        let mut p = self.parent[id as usize];
        while p != NONE {
            if let Node::Split {
                var: v, cut, left, ..
            } = self.nodes[p as usize]
            {
                if v == var {
                    if child == left {
                        hi = hi.min(cut);
                    } else {
                        lo = lo.max(cut);
                    }
                }
            }
            child = p;
            p = self.parent[p as usize];
        }
        (lo, hi)
    }

    /// Depth-first (preorder) node list.
    pub fn to_records(&self) -> Vec<NodeRecord> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            match self.nodes[id as usize] {
                Node::Leaf { value } => out.push(NodeRecord::Leaf { leaf: value }),
                Node::Split {
                    var,
                    cut,
                    left,
                    right,
                } => {
                    out.push(NodeRecord::Split { var, cut });
                    stack.push(right);
                    stack.push(left);
                }
                Node::Vacant => unreachable!(),
            }
        }
        out
    }

    pub fn from_records(records: &[NodeRecord]) -> Result<Self> {
        fn build(
            t: &mut DecisionTree,
            records: &[NodeRecord],
            pos: &mut usize,
            id: u32,
        ) -> Result<()> {
            let rec = records
                .get(*pos)
                .ok_or_else(|| Error::Shape("truncated tree record".into()))?;
            *pos += 1;
            match *rec {
                NodeRecord::Leaf { leaf } => {
                    if !leaf.is_finite() {
                        return Err(Error::Shape("non-finite leaf value".into()));
                    }
                    t.set_leaf_value(id, leaf);
                    Ok(())
                }
                NodeRecord::Split { var, cut } => {
                    let (l, r) = t.split_leaf(id, var, cut);
                    build(t, records, pos, l)?;
                    build(t, records, pos, r)
                }
            }
        }
        let mut t = DecisionTree::root(0.0);
        let mut pos = 0;
        build(&mut t, records, &mut pos, 0)?;
        if pos != records.len() {
            return Err(Error::Shape("trailing nodes in tree record".into()));
        }
        Ok(t)
    }

    /// Multiplies every leaf value by `c`.
    pub fn scale_leaves(&mut self, c: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= c;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRecord {
    Split { var: u32, cut: f64 },
    Leaf { leaf: f64 },
}

/// Branching-process prior on tree shape plus the Gaussian leaf prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreePriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_trees: usize,
    pub leaf_prior_variance: f64,
}

impl TreePriorConfig {
    /// Leaf variance giving the whole forest a prior SD of 0.5.
    pub fn new(alpha: f64, beta: f64, num_trees: usize) -> Self {
        TreePriorConfig {
            alpha,
            beta,
            num_trees,
            leaf_prior_variance: 0.25 / num_trees.max(1) as f64,
        }
    }

    pub fn control_default() -> Self {
        Self::new(0.95, 2.0, 200)
    }

    pub fn moderator_default() -> Self {
        Self::new(0.25, 3.0, 50)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.num_trees == 0 {
            return Err(Error::Config("num_trees must be positive".into()));
        }
        if !(self.leaf_prior_variance > 0.0) {
            return Err(Error::Config("leaf prior variance must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn split_probability(&self, depth: u32) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Log prior of the tree shape. Split-rule selection terms are not included.
pub fn tree_log_prior(tree: &DecisionTree, cfg: &TreePriorConfig) -> f64 {
    let mut lp = 0.0;
    for (i, n) in tree.nodes.iter().enumerate() {
        let p = cfg.split_probability(tree.depth[i]);
        match n {
            Node::Split { .. } => lp += p.ln(),
            Node::Leaf { .. } => lp += (1.0 - p).ln(),
            Node::Vacant => {}
        }
    }
    lp
}

/// Sorted candidate cut values per design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutpointGrid {
    pub cuts: Vec<Vec<f64>>,
}

impl CutpointGrid {
    pub const DEFAULT_MAX_CUTS: usize = 100;

    /// Cuts at empirical quantiles. A column with `d <= max_cuts + 1` distinct
    /// values gets every distinct value but the largest; otherwise the order
    /// statistics nearest the `k/(max_cuts+1)` quantiles. Constant columns get
    /// no cuts.
    pub fn from_design(design: &Design, max_cuts: usize) -> Self {
        let cuts = design
            .columns
            .iter()
            .map(|col| {
                let mut v = col.clone();
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite design"));
                let mut distinct = v.clone();
                distinct.dedup();
                if distinct.len() <= max_cuts + 1 {
                    distinct.pop();
                    return distinct;
                }
                let n = v.len();
                let top = *distinct.last().unwrap();
                let mut cuts: Vec<f64> = (1..=max_cuts)
                    .map(|k| {
                        let pos = (k as f64 / (max_cuts + 1) as f64) * (n - 1) as f64;
                        v[pos.round() as usize]
                    })
                    .filter(|&c| c < top)
                    .collect();
                cuts.dedup();
                cuts
            })
            .collect();
        CutpointGrid { cuts }
    }

    pub fn num_vars(&self) -> usize {
        self.cuts.len()
    }

    /// Cuts strictly inside `(lo, hi)`.
    #[inline]
    pub fn available(&self, var: usize, lo: f64, hi: f64) -> &[f64] {
        let c = &self.cuts[var];
        let start = c.partition_point(|&x| x <= lo);
        let end = c.partition_point(|&x| x < hi);
        if start >= end {
            &[]
        } else {
            &c[start..end]
        }
    }
}

/// A sum of trees over a fixed covariate space.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub num_vars: usize,
    pub trees: Vec<DecisionTree>,
}

impl Forest {
    pub fn new(num_vars: usize, num_trees: usize) -> Self {
        Forest {
            num_vars,
            trees: vec![DecisionTree::root(0.0); num_trees],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ForestFile::from(self)).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ForestFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Versioned on-disk forest layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFile {
    pub version: u32,
    pub num_vars: usize,
    pub trees: Vec<Vec<NodeRecord>>,
}

impl From<&Forest> for ForestFile {
    fn from(f: &Forest) -> Self {
        ForestFile {
            version: FOREST_FORMAT_VERSION,
            num_vars: f.num_vars,
            trees: f.trees.iter().map(DecisionTree::to_records).collect(),
        }
    }
}

impl TryFrom<ForestFile> for Forest {
    type Error = Error;

    fn try_from(file: ForestFile) -> Result<Self> {
        if file.version != FOREST_FORMAT_VERSION {
            return Err(Error::Shape(format!(
                "unsupported forest format version {}",
                file.version
            )));
        }
        let trees = file
            .trees
            .iter()
            .map(|r| DecisionTree::from_records(r))
            .collect::<Result<Vec<_>>>()?;
        if trees
            .iter()
            .filter_map(DecisionTree::max_var)
            .any(|v| v >= file.num_vars)
        {
            return Err(Error::Shape("split variable outside the covariate space".into()));
        }
        Ok(Forest {
            num_vars: file.num_vars,
            trees,
        })
    }
}

/// Per-row sum of leaf values across trees, added in tree order.
pub fn forest_predict(forest: &Forest, design: &Design) -> Result<Vec<f64>> {
    if design.ncols() != forest.num_vars {
        return Err(Error::Shape(format!(
            "forest was grown on {} covariates, design has {}",
            forest.num_vars,
            design.ncols()
        )));
    }
    let mut out = vec![0.0; design.n];
    for tree in &forest.trees {
        for (i, o) in out.iter_mut().enumerate() {
            *o += tree.leaf_value(tree.route(&design.columns, i));
        }
    }
    Ok(out)
}
