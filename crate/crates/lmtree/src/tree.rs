//! Linear model trees: greedy induction, routing, explanation, persistence.
//!
//! A tree is a binary structure whose branches test one feature against a
//! threshold (`x[f] <= t` routes left) and whose leaves hold multi-output
//! linear models. Growth is loss-greedy: every leaf caches its best candidate
//! split, and each round a randomized selector picks one frontier leaf to
//! split until the leaf budget is reached or no leaf can improve.
//!
//! # File format
//!
//! Trees persist to a line-oriented text format, version `v1`. Floats are
//! written in scientific notation with 17 fractional digits, which round-trips
//! `f64` exactly. Layout:
//!
//! ```text
//! lmtree tree v1
//! n_features <d>
//! n_outputs <m>
//! seed <u64>
//! max_leaves <usize>
//! min_leaf_samples <usize>
//! grid_size <usize>
//! randomization_amplitude <float>
//! ridge <float>
//! nodes <count>
//! root <id>
//! branch <id> <feature> <threshold> <left-id> <right-id>
//! leaf <id> <n_samples> <depth> <m*(d+1) floats>
//! end
//! ```
//!
//! Leaf floats are row-major per output: `d` coefficients then the intercept.
//! Node ids are dense `0..count` and every node must be reachable from the
//! root exactly once. The trailing `end` guards against truncation.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::leaf::{attribute, fit_leaf, leaf_loss, predict_leaf_into, Attribution, LeafModel};
use crate::rng;

pub(crate) const TREE_FORMAT_VERSION: &str = "v1";

/// Relative improvement gate: a split must beat
/// `MIN_IMPROVEMENT * (parent_loss + 1)` to be kept.
pub const MIN_IMPROVEMENT: f64 = 1e-12;

// ============================================================================
// Configuration
// ============================================================================

/// Tree induction parameters. `seed` drives every random draw made during a
/// build, so equal configs on equal data give byte-identical trees.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    /// Growth stops when the tree holds this many leaves.
    pub max_leaves: usize,
    /// Minimum samples on each side of any split.
    pub min_leaf_samples: usize,
    /// Threshold grid resolution; each feature gets `grid_size + 1` candidates.
    pub grid_size: usize,
    /// Relative jitter applied to grid positions and node selection,
    /// as a fraction of one grid cell (`0.02` means +/-2%).
    pub randomization_amplitude: f64,
    /// Ridge penalty on leaf coefficients (intercepts unpenalized).
    pub ridge: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            max_leaves: 681,
            min_leaf_samples: 50,
            grid_size: 10,
            randomization_amplitude: 0.02,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_leaves < 1 {
            return Err(Error::InvalidConfig("max_leaves must be >= 1".into()));
        }
        if self.min_leaf_samples < 1 {
            return Err(Error::InvalidConfig("min_leaf_samples must be >= 1".into()));
        }
        if self.grid_size < 1 {
            return Err(Error::InvalidConfig("grid_size must be >= 1".into()));
        }
        if !(self.randomization_amplitude >= 0.0 && self.randomization_amplitude < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "randomization_amplitude must lie in [0, 0.5), got {}",
                self.randomization_amplitude
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

// ============================================================================
// Nodes
// ============================================================================

/// A scored split: routing `x[feature] <= threshold` left satisfies
/// `left_count`/`right_count >= min_leaf_samples` and lowers the summed
/// children loss below the parent loss by `improvement`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub improvement: f64,
    pub left_count: usize,
    pub right_count: usize,
}

#[derive(Debug, Clone)]
pub enum TreeNode {
    Branch {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        model: LeafModel,
        n_samples: usize,
        depth: usize,
        /// Cached while the build can still grow; `None` once loaded from disk
        /// or if the leaf was created after the leaf budget was reached.
        best_candidate: Option<SplitCandidate>,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    root: usize,
    n_features: usize,
    n_outputs: usize,
    config: BuildConfig,
}

/// One branch decision along a routing path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    pub node: usize,
    pub feature: usize,
    pub threshold: f64,
    pub went_left: bool,
}

/// Routing plus attribution for a single input.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub leaf: usize,
    pub path: Vec<PathStep>,
    pub attribution: Attribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeStats {
    pub leaf_count: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    /// Training sample count of every leaf, ascending.
    pub leaf_samples: Vec<usize>,
}

impl fmt::Display for TreeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = match (self.leaf_samples.first(), self.leaf_samples.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => (0, 0),
        };
        write!(
            f,
            "{} leaves, depth {}..{}, samples per leaf {}..{}",
            self.leaf_count, self.min_depth, self.max_depth, lo, hi
        )
    }
}

impl Tree {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn config(&self) -> &BuildConfig {
        &self.config
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    /// Errors unless the tree maps `n_features` inputs to `n_outputs` outputs.
    pub fn validate_dims(&self, n_features: usize, n_outputs: usize) -> Result<()> {
        if self.n_features != n_features || self.n_outputs != n_outputs {
            return Err(Error::DimensionMismatch(format!(
                "tree maps {} -> {} but the task needs {} -> {}",
                self.n_features, self.n_outputs, n_features, n_outputs
            )));
        }
        Ok(())
    }

    fn descend(&self, x: &[f64]) -> (usize, Vec<PathStep>) {
        let mut id = self.root;
        let mut path = Vec::new();
        loop {
            match &self.nodes[id] {
                TreeNode::Branch {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let went_left = x[*feature] <= *threshold;
                    path.push(PathStep {
                        node: id,
                        feature: *feature,
                        threshold: *threshold,
                        went_left,
                    });
                    id = if went_left { *left } else { *right };
                }
                TreeNode::Leaf { .. } => return (id, path),
            }
        }
    }

    fn leaf_model_at(&self, id: usize) -> &LeafModel {
        match &self.nodes[id] {
            TreeNode::Leaf { model, .. } => model,
            TreeNode::Branch { .. } => unreachable!("descend ended on a branch"),
        }
    }

    /// Routes `x` to its leaf and evaluates the leaf model, clamping every
    /// output to `[-1, 1]`.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_outputs];
        self.predict_into(x, &mut out);
        out
    }

    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(
            x.len(),
            self.n_features,
            "predict: expected {} features, got {}",
            self.n_features,
            x.len()
        );
        let (id, _) = self.descend(x);
        predict_leaf_into(self.leaf_model_at(id), x, out);
        for v in out.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Routing path plus signed attribution at `x`. Attribution is computed
    /// on the unclamped linear output of the chosen leaf.
    pub fn explain(&self, x: &[f64]) -> Explanation {
        assert_eq!(
            x.len(),
            self.n_features,
            "explain: expected {} features, got {}",
            self.n_features,
            x.len()
        );
        let (leaf, path) = self.descend(x);
        let attribution = attribute(self.leaf_model_at(leaf), x);
        Explanation {
            leaf,
            path,
            attribution,
        }
    }

    pub fn stats(&self) -> TreeStats {
        let mut leaf_samples = Vec::new();
        let mut min_depth = usize::MAX;
        let mut max_depth = 0;
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            match &self.nodes[id] {
                TreeNode::Branch { left, right, .. } => {
                    stack.push((*left, depth + 1));
                    stack.push((*right, depth + 1));
                }
                TreeNode::Leaf { n_samples, .. } => {
                    leaf_samples.push(*n_samples);
                    min_depth = min_depth.min(depth);
                    max_depth = max_depth.max(depth);
                }
            }
        }
        leaf_samples.sort_unstable();
        TreeStats {
            leaf_count: leaf_samples.len(),
            min_depth: if leaf_samples.is_empty() { 0 } else { min_depth },
            max_depth,
            leaf_samples,
        }
    }
}

/// Convenience wrapper over [`Tree::stats`].
pub fn tree_stats(tree: &Tree) -> TreeStats {
    tree.stats()
}

// ============================================================================
// Threshold grid
// ============================================================================

/// Randomized threshold grid over the value range of one feature:
/// `t_n = min + (n + r_n) * (max - min) / grid_size` for `n = 0..=grid_size`,
/// each `r_n` drawn uniformly from `[-amplitude, +amplitude]`. A constant
/// feature yields no thresholds.
pub fn candidate_thresholds<R: Rng>(
    values: &[f64],
    grid_size: usize,
    amplitude: f64,
    rng: &mut R,
) -> Vec<f64> {
    debug_assert!(values.iter().all(|v| v.is_finite()));
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if values.is_empty() || min >= max {
        return Vec::new();
    }
    let cell = (max - min) / grid_size as f64;
    (0..=grid_size)
        .map(|n| {
            let r = if amplitude > 0.0 {
                rng.gen_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            min + (n as f64 + r) * cell
        })
        .collect()
}

// ============================================================================
// Split search
// ============================================================================

/// Best split of `(x, y)` under `config`, or `None` when no candidate is
/// valid or none beats the improvement gate. Candidates must leave
/// `min_leaf_samples` on both sides and lie strictly above the feature
/// minimum and at or below its maximum; ties break toward the lowest feature
/// index, then the lowest threshold.
///
/// Randomness comes from `node_seed`: every feature derives its own stream
/// from it, so the scan may run feature-parallel without changing results.
pub fn find_best_split(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &BuildConfig,
    node_seed: u64,
) -> Option<SplitCandidate> {
    let n = x.nrows();
    let d = x.ncols();
    let m_min = config.min_leaf_samples;
    if n < 2 * m_min {
        return None;
    }

    let mut total = crate::leaf::Gram::new(d, y.ncols());
    for i in 0..n {
        total.add_row(x.row(i).iter().copied(), y.row(i).iter().copied());
    }

    let best = (0..d)
        .into_par_iter()
        .map(|f| best_split_on_feature(x, y, &total, f, config, node_seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .fold(None::<ScoredSplit>, |acc, cand| match acc {
            None => Some(cand),
            Some(best) if cand.score < best.score => Some(cand),
            Some(best) => Some(best),
        })?;

    // Re-score the winner through the plain fit path; the stored improvement
    // and the gate use these numbers, not the prefix-sum algebra.
    let (coefs, icpts) = total.solve(config.ridge);
    let parent = LeafModel {
        coefficients: coefs,
        intercepts: icpts,
        n_train_samples: n,
    };
    let parent_loss = leaf_loss(&parent, x, y);
    let (xl, yl, xr, yr) = partition(x, y, best.feature, best.threshold);
    let left = fit_leaf(&xl, &yl, config.ridge).ok()?;
    let right = fit_leaf(&xr, &yr, config.ridge).ok()?;
    let children_loss = leaf_loss(&left, &xl, &yl) + leaf_loss(&right, &xr, &yr);
    let improvement = parent_loss - children_loss;
    if improvement <= MIN_IMPROVEMENT * (parent_loss + 1.0) {
        return None;
    }
    Some(SplitCandidate {
        feature: best.feature,
        threshold: best.threshold,
        improvement,
        left_count: xl.nrows(),
        right_count: xr.nrows(),
    })
}

struct ScoredSplit {
    score: f64,
    feature: usize,
    threshold: f64,
}

fn best_split_on_feature(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    total: &crate::leaf::Gram,
    feature: usize,
    config: &BuildConfig,
    node_seed: u64,
) -> Option<ScoredSplit> {
    let n = x.nrows();
    let d = x.ncols();
    let m = y.ncols();
    let m_min = config.min_leaf_samples;

    let values: Vec<f64> = (0..n).map(|i| x[(i, feature)]).collect();
    let mut feature_rng = rng::stream(node_seed, feature as u64);
    let mut thresholds = candidate_thresholds(
        &values,
        config.grid_size,
        config.randomization_amplitude,
        &mut feature_rng,
    );
    if thresholds.is_empty() {
        return None;
    }
    thresholds.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let (va, vb) = (values[a as usize], values[b as usize]);
        va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
    });
    let v_min = values[order[0] as usize];
    let v_max = values[order[n - 1] as usize];

    let mut best: Option<ScoredSplit> = None;
    let mut prefix = crate::leaf::Gram::new(d, m);
    let mut ti = 0;
    for k in 0..=n {
        let next_v = if k < n {
            values[order[k] as usize]
        } else {
            f64::INFINITY
        };
        while ti < thresholds.len() && thresholds[ti] < next_v {
            let t = thresholds[ti];
            ti += 1;
            // Rows 0..k of the sorted order are exactly those with value <= t.
            if k < m_min || n - k < m_min || t <= v_min || t > v_max {
                continue;
            }
            let rest = total.minus(&prefix);
            let (cl, il) = prefix.solve(config.ridge);
            let (cr, ir) = rest.solve(config.ridge);
            let score = prefix.sse(&cl, &il) + rest.sse(&cr, &ir);
            if !score.is_finite() {
                continue;
            }
            if best.as_ref().map_or(true, |b| score < b.score) {
                best = Some(ScoredSplit {
                    score,
                    feature,
                    threshold: t,
                });
            }
        }
        if k < n {
            let row = order[k] as usize;
            prefix.add_row(x.row(row).iter().copied(), y.row(row).iter().copied());
        }
    }
    best
}

fn partition(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    feature: usize,
    threshold: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let left_rows: Vec<usize> = (0..n).filter(|&i| x[(i, feature)] <= threshold).collect();
    let right_rows: Vec<usize> = (0..n).filter(|&i| x[(i, feature)] > threshold).collect();
    (
        gather(x, &left_rows),
        gather(y, &left_rows),
        gather(x, &right_rows),
        gather(y, &right_rows),
    )
}

fn gather(src: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), src.ncols());
    for (dst, &r) in rows.iter().enumerate() {
        for c in 0..src.ncols() {
            out[(dst, c)] = src[(r, c)];
        }
    }
    out
}

// ============================================================================
// Node selection
// ============================================================================

/// Picks the frontier leaf to split next: maximizes `improvement * (1 + r)`
/// with a fresh `r` in `[-amplitude, +amplitude]` for every frontier node.
/// Zero amplitude is a strict argmax. Ties break toward the lowest node id,
/// and `frontier` must already be sorted by ascending id.
pub fn select_next_node<R: Rng>(
    frontier: &[(usize, f64)],
    amplitude: f64,
    rng: &mut R,
) -> usize {
    assert!(!frontier.is_empty(), "select_next_node: empty frontier");
    let mut best_id = frontier[0].0;
    let mut best_score = f64::NEG_INFINITY;
    for &(id, improvement) in frontier {
        let r = if amplitude > 0.0 {
            rng.gen_range(-amplitude..=amplitude)
        } else {
            0.0
        };
        let score = improvement * (1.0 + r);
        if score > best_score {
            best_score = score;
            best_id = id;
        }
    }
    best_id
}

// ============================================================================
// Growth
// ============================================================================

/// Per-split record emitted by [`build_tree_traced`]. Losses are summed
/// squared residuals over the samples reaching each node.
#[derive(Debug, Clone)]
pub struct SplitRecord {
    pub node: usize,
    pub feature: usize,
    pub threshold: f64,
    pub parent_loss: f64,
    pub left_loss: f64,
    pub right_loss: f64,
    pub leaf_count_after: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BuildTrace {
    pub root_loss: f64,
    pub splits: Vec<SplitRecord>,
}

struct Growing {
    nodes: Vec<TreeNode>,
    // Per-node training slice and fitted loss; `None` once split or finished.
    data: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
    losses: Vec<f64>,
}

/// Grows a tree on `(x, y)` (rows are samples). See [`build_tree_traced`].
pub fn build_tree(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &BuildConfig) -> Result<Tree> {
    build_tree_traced(x, y, config).map(|(tree, _)| tree)
}

/// Grows a tree and reports every executed split in order. Starting from a
/// single fitted leaf, each round scores the frontier (leaves holding a valid
/// candidate), selects one with randomized priority, splits it, fits both
/// children, and caches their candidates; growth stops at `max_leaves` leaves
/// or when the frontier empties.
pub fn build_tree_traced(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &BuildConfig,
) -> Result<(Tree, BuildTrace)> {
    config.validate()?;
    let n = x.nrows();
    let d = x.ncols();
    let m = y.ncols();
    if d == 0 || m == 0 {
        return Err(Error::EmptyInput("build_tree needs >= 1 feature and output".into()));
    }
    if n != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "build_tree: {} feature rows vs {} target rows",
            n,
            y.nrows()
        )));
    }
    if n < config.min_leaf_samples {
        return Err(Error::EmptyInput(format!(
            "build_tree: {} samples but min_leaf_samples is {}",
            n, config.min_leaf_samples
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("build_tree features".into()));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("build_tree targets".into()));
    }
    if config.min_leaf_samples < d + 1 {
        log::warn!(
            "min_leaf_samples = {} is below n_features + 1 = {}; leaf fits may be rank-deficient",
            config.min_leaf_samples,
            d + 1
        );
    }

    let mut grow = Growing {
        nodes: Vec::new(),
        data: Vec::new(),
        losses: Vec::new(),
    };
    let root_model = fit_leaf(x, y, config.ridge)?;
    let root_loss = leaf_loss(&root_model, x, y);
    let root_candidate = if config.max_leaves > 1 {
        find_best_split(x, y, config, node_seed(config.seed, 0))
    } else {
        None
    };
    grow.nodes.push(TreeNode::Leaf {
        model: root_model,
        n_samples: n,
        depth: 0,
        best_candidate: root_candidate,
    });
    grow.data.push(Some((x.clone(), y.clone())));
    grow.losses.push(root_loss);

    let mut trace = BuildTrace {
        root_loss,
        splits: Vec::new(),
    };
    let mut select_rng = rng::stream(config.seed, rng::TAG_SELECT);
    let mut leaf_count = 1;

    while leaf_count < config.max_leaves {
        let frontier: Vec<(usize, f64)> = grow
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, node)| match node {
                TreeNode::Leaf {
                    best_candidate: Some(c),
                    ..
                } => Some((id, c.improvement)),
                _ => None,
            })
            .collect();
        if frontier.is_empty() {
            break;
        }
        let chosen = select_next_node(&frontier, config.randomization_amplitude, &mut select_rng);
        let (depth, candidate) = match &grow.nodes[chosen] {
            TreeNode::Leaf {
                depth,
                best_candidate: Some(c),
                ..
            } => (*depth, c.clone()),
            _ => unreachable!("frontier entries are splittable leaves"),
        };
        let (nx, ny) = grow.data[chosen].take().expect("frontier leaf retains its data");
        let parent_loss = grow.losses[chosen];
        let (xl, yl, xr, yr) = partition(&nx, &ny, candidate.feature, candidate.threshold);
        debug_assert_eq!(xl.nrows(), candidate.left_count);
        debug_assert_eq!(xr.nrows(), candidate.right_count);

        leaf_count += 1;
        let can_grow = leaf_count < config.max_leaves;
        let left_id = grow.nodes.len();
        let right_id = left_id + 1;
        let mut spawn = |gx: DMatrix<f64>, gy: DMatrix<f64>, id: usize| -> Result<f64> {
            let model = fit_leaf(&gx, &gy, config.ridge)?;
            let loss = leaf_loss(&model, &gx, &gy);
            let cand = if can_grow {
                find_best_split(&gx, &gy, config, node_seed(config.seed, id as u64))
            } else {
                None
            };
            grow.nodes.push(TreeNode::Leaf {
                model,
                n_samples: gx.nrows(),
                depth: depth + 1,
                best_candidate: cand,
            });
            grow.data.push(Some((gx, gy)));
            grow.losses.push(loss);
            Ok(loss)
        };
        let left_loss = spawn(xl, yl, left_id)?;
        let right_loss = spawn(xr, yr, right_id)?;
        grow.nodes[chosen] = TreeNode::Branch {
            feature: candidate.feature,
            threshold: candidate.threshold,
            left: left_id,
            right: right_id,
        };
        grow.data[chosen] = None;
        trace.splits.push(SplitRecord {
            node: chosen,
            feature: candidate.feature,
            threshold: candidate.threshold,
            parent_loss,
            left_loss,
            right_loss,
            leaf_count_after: leaf_count,
        });
    }

    Ok((
        Tree {
            nodes: grow.nodes,
            root: 0,
            n_features: d,
            n_outputs: m,
            config: config.clone(),
        },
        trace,
    ))
}

fn node_seed(seed: u64, node_id: u64) -> u64 {
    rng::mix(rng::mix(seed, rng::TAG_BUILD), node_id)
}

// ============================================================================
// Persistence
// ============================================================================

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

pub fn save_tree(tree: &Tree, path: &Path) -> Result<()> {
    let mut out = String::new();
    render_tree(tree, &mut out);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub(crate) fn render_tree(tree: &Tree, out: &mut String) {
    use fmt::Write as _;
    let c = &tree.config;
    let _ = writeln!(out, "lmtree tree {TREE_FORMAT_VERSION}");
    let _ = writeln!(out, "n_features {}", tree.n_features);
    let _ = writeln!(out, "n_outputs {}", tree.n_outputs);
    let _ = writeln!(out, "seed {}", c.seed);
    let _ = writeln!(out, "max_leaves {}", c.max_leaves);
    let _ = writeln!(out, "min_leaf_samples {}", c.min_leaf_samples);
    let _ = writeln!(out, "grid_size {}", c.grid_size);
    let _ = writeln!(out, "randomization_amplitude {}", fmt_f64(c.randomization_amplitude));
    let _ = writeln!(out, "ridge {}", fmt_f64(c.ridge));
    let _ = writeln!(out, "nodes {}", tree.nodes.len());
    let _ = writeln!(out, "root {}", tree.root);
    for (id, node) in tree.nodes.iter().enumerate() {
        match node {
            TreeNode::Branch {
                feature,
                threshold,
                left,
                right,
            } => {
                let _ = writeln!(out, "branch {id} {feature} {} {left} {right}", fmt_f64(*threshold));
            }
            TreeNode::Leaf {
                model,
                n_samples,
                depth,
                ..
            } => {
                let _ = write!(out, "leaf {id} {n_samples} {depth}");
                for o in 0..tree.n_outputs {
                    for f in 0..tree.n_features {
                        let _ = write!(out, " {}", fmt_f64(model.coefficients[(o, f)]));
                    }
                    let _ = write!(out, " {}", fmt_f64(model.intercepts[o]));
                }
                out.push('\n');
            }
        }
    }
    out.push_str("end\n");
}

pub fn load_tree(path: &Path) -> Result<Tree> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_tree(&text, &path.display().to_string())
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    path: &'a str,
}

impl<'a> LineReader<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| malformed(self.path, "unexpected end of file"))
    }
}

fn malformed(path: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "tree",
        path: path.to_string(),
        detail: detail.into(),
    }
}

fn header_value<'a>(line: &'a str, key: &str, path: &str) -> Result<&'a str> {
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(v), None) if k == key => Ok(v),
        _ => Err(malformed(path, format!("expected '{key} <value>', got '{line}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, what: &str, path: &str) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| malformed(path, format!("cannot parse {what} from '{tok}'")))
}

fn parse_finite(tok: &str, what: &str, path: &str) -> Result<f64> {
    let v: f64 = parse_num(tok, what, path)?;
    if !v.is_finite() {
        return Err(malformed(path, format!("{what} is not finite: '{tok}'")));
    }
    Ok(v)
}

pub(crate) fn parse_tree(text: &str, path: &str) -> Result<Tree> {
    let mut r = LineReader {
        lines: text.lines(),
        path,
    };
    let magic = r.next_line()?;
    let mut mp = magic.split_whitespace();
    match (mp.next(), mp.next(), mp.next(), mp.next()) {
        (Some("lmtree"), Some("tree"), Some(v), None) => {
            if v != TREE_FORMAT_VERSION {
                return Err(Error::Version {
                    kind: "tree",
                    path: path.to_string(),
                    found: v.to_string(),
                    expected: TREE_FORMAT_VERSION.to_string(),
                });
            }
        }
        _ => return Err(malformed(path, format!("bad magic line '{magic}'"))),
    }
    let n_features: usize = parse_num(header_value(r.next_line()?, "n_features", path)?, "n_features", path)?;
    let n_outputs: usize = parse_num(header_value(r.next_line()?, "n_outputs", path)?, "n_outputs", path)?;
    let seed: u64 = parse_num(header_value(r.next_line()?, "seed", path)?, "seed", path)?;
    let max_leaves: usize = parse_num(header_value(r.next_line()?, "max_leaves", path)?, "max_leaves", path)?;
    let min_leaf_samples: usize = parse_num(
        header_value(r.next_line()?, "min_leaf_samples", path)?,
        "min_leaf_samples",
        path,
    )?;
    let grid_size: usize = parse_num(header_value(r.next_line()?, "grid_size", path)?, "grid_size", path)?;
    let randomization_amplitude = parse_finite(
        header_value(r.next_line()?, "randomization_amplitude", path)?,
        "randomization_amplitude",
        path,
    )?;
    let ridge = parse_finite(header_value(r.next_line()?, "ridge", path)?, "ridge", path)?;
    let node_count: usize = parse_num(header_value(r.next_line()?, "nodes", path)?, "nodes", path)?;
    let root: usize = parse_num(header_value(r.next_line()?, "root", path)?, "root", path)?;
    if n_features == 0 || n_outputs == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{path}: n_features and n_outputs must be positive"
        )));
    }
    if node_count == 0 {
        return Err(malformed(path, "a tree needs at least one node"));
    }
    if root >= node_count {
        return Err(malformed(path, format!("root {root} out of range (nodes {node_count})")));
    }

    let mut nodes: Vec<Option<TreeNode>> = (0..node_count).map(|_| None).collect();
    for _ in 0..node_count {
        let line = r.next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            return Err(malformed(path, "blank line inside node table"));
        }
        match toks[0] {
            "branch" => {
                if toks.len() != 6 {
                    return Err(malformed(path, format!("branch line needs 6 tokens: '{line}'")));
                }
                let id: usize = parse_num(toks[1], "node id", path)?;
                let feature: usize = parse_num(toks[2], "feature index", path)?;
                let threshold = parse_finite(toks[3], "threshold", path)?;
                let left: usize = parse_num(toks[4], "left child", path)?;
                let right: usize = parse_num(toks[5], "right child", path)?;
                if id >= node_count || left >= node_count || right >= node_count {
                    return Err(malformed(path, format!("node reference out of range: '{line}'")));
                }
                if feature >= n_features {
                    return Err(Error::DimensionMismatch(format!(
                        "{path}: branch tests feature {feature} but n_features is {n_features}"
                    )));
                }
                if left == id || right == id || left == right {
                    return Err(malformed(path, format!("degenerate children on node {id}")));
                }
                if nodes[id].is_some() {
                    return Err(malformed(path, format!("duplicate node id {id}")));
                }
                nodes[id] = Some(TreeNode::Branch {
                    feature,
                    threshold,
                    left,
                    right,
                });
            }
            "leaf" => {
                let expected = 4 + n_outputs * (n_features + 1);
                if toks.len() != expected {
                    return Err(Error::DimensionMismatch(format!(
                        "{path}: leaf line has {} values but {} x {} models need {}",
                        toks.len().saturating_sub(4),
                        n_outputs,
                        n_features + 1,
                        expected - 4
                    )));
                }
                let id: usize = parse_num(toks[1], "node id", path)?;
                let n_samples: usize = parse_num(toks[2], "n_samples", path)?;
                // The depth token is recomputed and cross-checked after parsing.
                let depth: usize = parse_num(toks[3], "depth", path)?;
                if id >= node_count {
                    return Err(malformed(path, format!("node id {id} out of range")));
                }
                if nodes[id].is_some() {
                    return Err(malformed(path, format!("duplicate node id {id}")));
                }
                let mut coefficients = DMatrix::zeros(n_outputs, n_features);
                let mut intercepts = DVector::zeros(n_outputs);
                let mut cursor = 4;
                // toks[3] is depth; model floats start after it.
                let _ = depth;
                for o in 0..n_outputs {
                    for f in 0..n_features {
                        coefficients[(o, f)] = parse_finite(toks[cursor], "coefficient", path)?;
                        cursor += 1;
                    }
                    intercepts[o] = parse_finite(toks[cursor], "intercept", path)?;
                    cursor += 1;
                }
                nodes[id] = Some(TreeNode::Leaf {
                    model: LeafModel {
                        coefficients,
                        intercepts,
                        n_train_samples: n_samples,
                    },
                    n_samples,
                    depth,
                    best_candidate: None,
                });
            }
            other => return Err(malformed(path, format!("unknown node kind '{other}'"))),
        }
    }
    match r.lines.next() {
        Some("end") => {}
        Some(extra) => return Err(malformed(path, format!("expected 'end', got '{extra}'"))),
        None => return Err(malformed(path, "missing 'end' terminator (truncated file?)")),
    }

    let nodes: Vec<TreeNode> = nodes
        .into_iter()
        .enumerate()
        .map(|(id, n)| n.ok_or_else(|| malformed(path, format!("node id {id} missing"))))
        .collect::<Result<_>>()?;

    // Reachability: every node visited exactly once from the root, and stored
    // leaf depths must match the structure.
    let mut seen = vec![false; nodes.len()];
    let mut stack = vec![(root, 0usize)];
    let mut visited = 0;
    while let Some((id, depth)) = stack.pop() {
        if seen[id] {
            return Err(malformed(path, format!("node {id} referenced more than once")));
        }
        seen[id] = true;
        visited += 1;
        match &nodes[id] {
            TreeNode::Branch { left, right, .. } => {
                stack.push((*left, depth + 1));
                stack.push((*right, depth + 1));
            }
            TreeNode::Leaf { depth: stored, .. } => {
                if *stored != depth {
                    return Err(malformed(
                        path,
                        format!("leaf {id} stores depth {stored} but sits at depth {depth}"),
                    ));
                }
            }
        }
    }
    if visited != nodes.len() {
        return Err(malformed(path, "unreachable nodes present"));
    }

    Ok(Tree {
        nodes,
        root,
        n_features,
        n_outputs,
        config: BuildConfig {
            max_leaves,
            min_leaf_samples,
            grid_size,
            randomization_amplitude,
            ridge,
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, ctx: &str) {
        assert!((a - b).abs() <= tol, "{ctx}: {a} vs {b}");
    }

    // ------------------------------------------------------------------
    // candidate_thresholds
    // ------------------------------------------------------------------

    #[test]
    fn thresholds_unjittered_grid() {
        let values = [3.0, 0.0, 10.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = candidate_thresholds(&values, 5, 0.0, &mut rng);
        assert_eq!(t, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn thresholds_jitter_stays_in_band() {
        let values: Vec<f64> = (0..50).map(|i| i as f64 / 4.9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = candidate_thresholds(&values, 10, 0.02, &mut rng);
        assert_eq!(t.len(), 11);
        let min = 0.0;
        let max = 49.0 / 4.9;
        let cell = (max - min) / 10.0;
        for (n, &ti) in t.iter().enumerate() {
            let nominal = min + n as f64 * cell;
            assert!(
                (ti - nominal).abs() <= 0.02 * cell + 1e-12,
                "threshold {n} drifted: {ti} vs {nominal}"
            );
        }
        for w in t.windows(2) {
            assert!(w[0] < w[1], "jittered grid must stay increasing");
        }
    }

    #[test]
    fn thresholds_empty_for_constant_feature() {
        let values = [2.5; 30];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(candidate_thresholds(&values, 10, 0.02, &mut rng).is_empty());
        assert!(candidate_thresholds(&[1.0], 10, 0.0, &mut rng).is_empty());
        assert!(candidate_thresholds(&[], 10, 0.0, &mut rng).is_empty());
    }

    // ------------------------------------------------------------------
    // find_best_split
    // ------------------------------------------------------------------

    fn step_data(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, 1, |i, _| if x[(i, 0)] <= 0.0 { -1.0 } else { 1.0 });
        (x, y)
    }

    /// Exhaustive scan over the same threshold grid with the plain
    /// fit-and-score path, same validity rules and tie-breaks.
    fn oracle_best_split(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        config: &BuildConfig,
        node_seed_v: u64,
    ) -> Option<(usize, f64, f64)> {
        let n = x.nrows();
        if n < 2 * config.min_leaf_samples {
            return None;
        }
        let parent = fit_leaf(x, y, config.ridge).unwrap();
        let parent_loss = leaf_loss(&parent, x, y);
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..x.ncols() {
            let values: Vec<f64> = (0..n).map(|i| x[(i, f)]).collect();
            let mut frng = rng::stream(node_seed_v, f as u64);
            let thresholds = candidate_thresholds(
                &values,
                config.grid_size,
                config.randomization_amplitude,
                &mut frng,
            );
            let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &t in &thresholds {
                if t <= vmin || t > vmax {
                    continue;
                }
                let (xl, yl, xr, yr) = partition(x, y, f, t);
                if xl.nrows() < config.min_leaf_samples || xr.nrows() < config.min_leaf_samples {
                    continue;
                }
                let lm = fit_leaf(&xl, &yl, config.ridge).unwrap();
                let rm = fit_leaf(&xr, &yr, config.ridge).unwrap();
                let score = leaf_loss(&lm, &xl, &yl) + leaf_loss(&rm, &xr, &yr);
                let better = match &best {
                    None => true,
                    Some((s, bf, bt)) => {
                        score < *s || (score == *s && (f, t) < (*bf, *bt))
                    }
                };
                if better {
                    best = Some((score, f, t));
                }
            }
        }
        let (score, f, t) = best?;
        let improvement = parent_loss - score;
        if improvement <= MIN_IMPROVEMENT * (parent_loss + 1.0) {
            return None;
        }
        Some((f, t, improvement))
    }

    #[test]
    fn split_finds_step_boundary() {
        let (x, y) = step_data(400, 5);
        let config = BuildConfig {
            min_leaf_samples: 10,
            grid_size: 10,
            randomization_amplitude: 0.0,
            ridge: 0.0,
            ..BuildConfig::default()
        };
        let cand = find_best_split(&x, &y, &config, 99).expect("step data must split");
        assert_eq!(cand.feature, 0);
        assert!(cand.threshold.abs() <= 0.21, "threshold {}", cand.threshold);
        assert!(cand.improvement > 0.0);
        assert_eq!(cand.left_count + cand.right_count, 400);

        let (of, ot, oimp) = oracle_best_split(&x, &y, &config, 99).unwrap();
        assert_eq!(cand.feature, of);
        assert_eq!(cand.threshold, ot);
        assert_close(cand.improvement, oimp, 1e-6 * (1.0 + oimp.abs()), "improvement vs oracle");
    }

    #[test]
    fn split_matches_oracle_on_random_multifeature_data() {
        for seed in 0..12u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = 60 + (seed as usize % 5) * 70;
            let x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-2.0..2.0));
            let y = DMatrix::from_fn(n, 2, |i, o| {
                let bend = if x[(i, 1)] <= 0.3 { 1.0 } else { -0.5 };
                bend * x[(i, 0)] + 0.2 * o as f64 * x[(i, 2)] + rng.gen_range(-0.05..0.05)
            });
            let config = BuildConfig {
                min_leaf_samples: 12,
                grid_size: 10,
                randomization_amplitude: 0.0,
                ridge: 1e-6,
                ..BuildConfig::default()
            };
            let got = find_best_split(&x, &y, &config, seed);
            let want = oracle_best_split(&x, &y, &config, seed);
            match (got, want) {
                (None, None) => {}
                (Some(c), Some((of, ot, oimp))) => {
                    assert_eq!(c.feature, of, "seed {seed}");
                    assert_eq!(c.threshold, ot, "seed {seed}");
                    assert_close(c.improvement, oimp, 1e-6 * (1.0 + oimp.abs()), "seed imp");
                }
                (g, w) => panic!("seed {seed}: implementation {g:?} vs oracle {w:?}"),
            }
        }
    }

    #[test]
    fn split_declines_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = DMatrix::from_fn(300, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(300, 1, |i, _| 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)] + 0.25);
        let config = BuildConfig {
            min_leaf_samples: 20,
            randomization_amplitude: 0.0,
            ridge: 0.0,
            ..BuildConfig::default()
        };
        assert!(find_best_split(&x, &y, &config, 3).is_none());
    }

    #[test]
    fn split_needs_two_min_leaves_of_samples() {
        // One sample short of 2 * min_leaf_samples: declined before scanning.
        let (x, y) = step_data(39, 8);
        let config = BuildConfig {
            min_leaf_samples: 20,
            randomization_amplitude: 0.0,
            ridge: 0.0,
            ..BuildConfig::default()
        };
        assert!(find_best_split(&x, &y, &config, 1).is_none());
        let (x, y) = step_data(400, 8);
        let cand = find_best_split(&x, &y, &config, 1).expect("ample data must split");
        assert!(cand.left_count >= 20 && cand.right_count >= 20);
    }

    #[test]
    fn split_skips_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = DMatrix::from_fn(200, 2, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..200 {
            x[(i, 1)] = -1.0; // constant column, like an always-zero contact flag
        }
        let y = DMatrix::from_fn(200, 1, |i, _| if x[(i, 0)] <= 0.0 { -1.0 } else { 1.0 });
        let config = BuildConfig {
            min_leaf_samples: 10,
            randomization_amplitude: 0.0,
            ridge: 1e-6,
            ..BuildConfig::default()
        };
        let cand = find_best_split(&x, &y, &config, 4).unwrap();
        assert_eq!(cand.feature, 0);

        let all_const = DMatrix::from_element(200, 2, 0.5);
        assert!(find_best_split(&all_const, &y, &config, 4).is_none());
    }

    #[test]
    fn split_is_deterministic_for_a_node_seed() {
        let (x, y) = step_data(300, 9);
        let config = BuildConfig {
            min_leaf_samples: 10,
            randomization_amplitude: 0.3,
            ridge: 1e-6,
            ..BuildConfig::default()
        };
        let a = find_best_split(&x, &y, &config, 42).unwrap();
        let b = find_best_split(&x, &y, &config, 42).unwrap();
        assert_eq!(a.feature, b.feature);
        assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
        assert_eq!(a.improvement.to_bits(), b.improvement.to_bits());
    }

    // ------------------------------------------------------------------
    // select_next_node
    // ------------------------------------------------------------------

    #[test]
    fn select_picks_clear_winner_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frontier = [(4usize, 1.0), (9usize, 10.0)];
        assert_eq!(select_next_node(&frontier, 0.0, &mut rng), 9);
    }

    #[test]
    fn select_breaks_ties_toward_lowest_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frontier = [(3usize, 5.0), (7usize, 5.0), (8usize, 5.0)];
        assert_eq!(select_next_node(&frontier, 0.0, &mut rng), 3);
    }

    #[test]
    fn select_single_node_frontier() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_next_node(&[(12usize, 0.001)], 0.5 - f64::EPSILON, &mut rng), 12);
    }

    #[test]
    fn select_jitter_lets_close_nodes_win_sometimes() {
        // Monte Carlo over seeded draws: with +/-2% jitter, improvements of
        // 10.0 and 9.9 must each win a nontrivial share.
        let frontier = [(0usize, 10.0), (1usize, 9.9)];
        let mut wins = [0usize; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        for _ in 0..10_000 {
            wins[select_next_node(&frontier, 0.02, &mut rng)] += 1;
        }
        assert!(wins[0] > 1000, "node 0 won only {} times", wins[0]);
        assert!(wins[1] > 1000, "node 1 won only {} times", wins[1]);
    }

    // ------------------------------------------------------------------
    // build_tree
    // ------------------------------------------------------------------

    // x1 stays in [-0.5, 0.5] so the steeper regime still lands inside the
    // [-1, 1] clamp range of `predict`.
    fn piecewise_data(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, c| {
            if c == 0 {
                rng.gen_range(-1.0..1.0)
            } else {
                rng.gen_range(-0.5..0.5)
            }
        });
        let y = DMatrix::from_fn(n, 1, |i, _| {
            if x[(i, 0)] <= 0.0 {
                x[(i, 1)]
            } else {
                2.0 * x[(i, 1)]
            }
        });
        (x, y)
    }

    #[test]
    fn single_leaf_tree_equals_direct_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = DMatrix::from_fn(200, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let y = DMatrix::from_fn(200, 2, |i, o| 0.3 * x[(i, o)] - 0.1);
        let config = BuildConfig {
            max_leaves: 1,
            min_leaf_samples: 10,
            ..BuildConfig::default()
        };
        let tree = build_tree(&x, &y, &config).unwrap();
        assert_eq!(tree.leaf_count(), 1);
        let direct = fit_leaf(&x, &y, config.ridge).unwrap();
        for t in 0..100 {
            let probe = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let got = tree.predict(&probe);
            let want = crate::leaf::predict_leaf(&direct, &probe);
            for o in 0..2 {
                assert_close(got[o], want[o].clamp(-1.0, 1.0), 1e-12, &format!("probe {t} out {o}"));
            }
        }
    }

    #[test]
    fn recovers_piecewise_teacher() {
        let (x, y) = piecewise_data(2000, 33);
        let config = BuildConfig {
            max_leaves: 8,
            min_leaf_samples: 50,
            grid_size: 10,
            randomization_amplitude: 0.0,
            ridge: 1e-6,
            seed: 7,
        };
        let (tree, _) = build_tree_traced(&x, &y, &config).unwrap();
        match tree.node(tree.root()) {
            TreeNode::Branch { feature, .. } => assert_eq!(*feature, 0, "first split feature"),
            _ => panic!("root must be a branch"),
        }
        let var = {
            let mean = y.iter().sum::<f64>() / y.nrows() as f64;
            y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.nrows() as f64
        };
        let mse = (0..x.nrows())
            .map(|i| {
                let p = tree.predict(&[x[(i, 0)], x[(i, 1)]]);
                let r = p[0] - y[(i, 0)];
                r * r
            })
            .sum::<f64>()
            / x.nrows() as f64;
        assert!(mse <= 1e-3 * var, "mse {mse} vs variance {var}");
    }

    #[test]
    fn build_respects_capacity_and_loss_monotonicity() {
        for seed in [1u64, 2, 3] {
            let (x, y) = piecewise_data(1500, 100 + seed);
            let config = BuildConfig {
                max_leaves: 12,
                min_leaf_samples: 40,
                grid_size: 10,
                randomization_amplitude: 0.02,
                ridge: 1e-6,
                seed,
            };
            let (tree, trace) = build_tree_traced(&x, &y, &config).unwrap();
            let stats = tree.stats();
            assert!(stats.leaf_count <= config.max_leaves);
            assert!(stats.leaf_samples[0] >= config.min_leaf_samples);
            let mut total = trace.root_loss;
            for s in &trace.splits {
                let after = total - s.parent_loss + s.left_loss + s.right_loss;
                assert!(
                    after < total,
                    "split on node {} did not lower total loss: {total} -> {after}",
                    s.node
                );
                total = after;
            }
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let (x, y) = piecewise_data(1200, 55);
        let config = BuildConfig {
            max_leaves: 10,
            min_leaf_samples: 30,
            seed: 9,
            ..BuildConfig::default()
        };
        let t1 = build_tree(&x, &y, &config).unwrap();
        let t2 = build_tree(&x, &y, &config).unwrap();
        let mut s1 = String::new();
        let mut s2 = String::new();
        render_tree(&t1, &mut s1);
        render_tree(&t2, &mut s2);
        assert_eq!(s1, s2, "same seed must render byte-identical trees");
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let (x, y) = piecewise_data(30, 1);
        let config = BuildConfig {
            min_leaf_samples: 50,
            ..BuildConfig::default()
        };
        assert!(matches!(build_tree(&x, &y, &config), Err(Error::EmptyInput(_))));

        let bad_amp = BuildConfig {
            randomization_amplitude: 0.6,
            ..BuildConfig::default()
        };
        assert!(matches!(build_tree(&x, &y, &bad_amp), Err(Error::InvalidConfig(_))));

        let mut nx = x.clone();
        nx[(2, 0)] = f64::INFINITY;
        let ok = BuildConfig {
            min_leaf_samples: 5,
            ..BuildConfig::default()
        };
        assert!(matches!(build_tree(&nx, &y, &ok), Err(Error::NonFinite(_))));

        let ymis = DMatrix::zeros(29, 1);
        assert!(matches!(build_tree(&x, &ymis, &ok), Err(Error::DimensionMismatch(_))));
    }

    // ------------------------------------------------------------------
    // routing, explanation, stats, persistence
    // ------------------------------------------------------------------

    /// Hand-written file: perfect depth-2 tree over one feature, one output.
    /// Region models are constants 0.1, 0.2, 0.3, 0.4 left to right.
    fn crafted_depth2() -> Tree {
        let text = "lmtree tree v1\n\
                    n_features 1\n\
                    n_outputs 1\n\
                    seed 0\n\
                    max_leaves 4\n\
                    min_leaf_samples 1\n\
                    grid_size 10\n\
                    randomization_amplitude 0.00000000000000000e0\n\
                    ridge 0.00000000000000000e0\n\
                    nodes 7\n\
                    root 0\n\
                    branch 0 0 0.00000000000000000e0 1 2\n\
                    branch 1 0 -5.00000000000000000e-1 3 4\n\
                    branch 2 0 5.00000000000000000e-1 5 6\n\
                    leaf 3 10 2 0.00000000000000000e0 1.00000000000000006e-1\n\
                    leaf 4 10 2 0.00000000000000000e0 2.00000000000000011e-1\n\
                    leaf 5 10 2 0.00000000000000000e0 2.99999999999999989e-1\n\
                    leaf 6 10 2 0.00000000000000000e0 4.00000000000000022e-1\n\
                    end\n";
        parse_tree(text, "<crafted>").unwrap()
    }

    #[test]
    fn predict_routes_left_on_threshold() {
        let tree = crafted_depth2();
        assert_close(tree.predict(&[0.0])[0], 0.2, 1e-15, "on root threshold goes left");
        assert_close(tree.predict(&[-0.5])[0], 0.1, 1e-15, "on inner threshold goes left");
        assert_close(tree.predict(&[0.0001])[0], 0.3, 1e-15, "just right of root");
        assert_close(tree.predict(&[0.7])[0], 0.4, 1e-15, "far right");
    }

    #[test]
    fn predict_clamps_outputs() {
        let text = "lmtree tree v1\nn_features 1\nn_outputs 1\nseed 0\nmax_leaves 1\n\
                    min_leaf_samples 1\ngrid_size 10\n\
                    randomization_amplitude 0.00000000000000000e0\nridge 0.00000000000000000e0\n\
                    nodes 1\nroot 0\n\
                    leaf 0 5 0 0.00000000000000000e0 1.69999999999999996e0\n\
                    end\n";
        let tree = parse_tree(text, "<clamp>").unwrap();
        assert_eq!(tree.predict(&[0.3])[0], 1.0);
        let text_neg = text.replace("1.69999999999999996e0", "-3.00000000000000000e0");
        let tree_neg = parse_tree(&text_neg, "<clamp>").unwrap();
        assert_eq!(tree_neg.predict(&[0.3])[0], -1.0);
    }

    #[test]
    fn explain_reports_path_and_normalized_attribution() {
        let tree = crafted_depth2();
        let e = tree.explain(&[-0.9]);
        assert_eq!(e.leaf, 3);
        assert_eq!(e.path.len(), 2);
        assert!(e.path.iter().all(|s| s.went_left));
        assert_eq!(e.path[0].node, 0);
        assert_eq!(e.path[1].node, 1);
        // Constant leaf: zero coefficients make the attribution degenerate.
        assert!(e.attribution.degenerate[0]);

        let (x, y) = piecewise_data(900, 2);
        let config = BuildConfig {
            max_leaves: 6,
            min_leaf_samples: 40,
            seed: 5,
            ..BuildConfig::default()
        };
        let built = build_tree(&x, &y, &config).unwrap();
        let ex = built.explain(&[0.4, -0.3]);
        if !ex.attribution.degenerate[0] {
            let total: f64 = (0..2).map(|f| ex.attribution.values[(0, f)].abs()).sum();
            assert_close(total, 1.0, 1e-9, "attribution row normalizes");
        }
        let single = build_tree(
            &x,
            &y,
            &BuildConfig {
                max_leaves: 1,
                min_leaf_samples: 40,
                ..BuildConfig::default()
            },
        )
        .unwrap();
        assert!(single.explain(&[0.0, 0.0]).path.is_empty());
    }

    #[test]
    fn stats_report_shape() {
        let tree = crafted_depth2();
        let s = tree.stats();
        assert_eq!(s.leaf_count, 4);
        assert_eq!(s.min_depth, 2);
        assert_eq!(s.max_depth, 2);
        assert_eq!(s.leaf_samples, vec![10, 10, 10, 10]);

        let single = "lmtree tree v1\nn_features 1\nn_outputs 1\nseed 0\nmax_leaves 1\n\
                      min_leaf_samples 1\ngrid_size 10\n\
                      randomization_amplitude 0.00000000000000000e0\nridge 0.00000000000000000e0\n\
                      nodes 1\nroot 0\n\
                      leaf 0 7 0 1.00000000000000000e0 0.00000000000000000e0\nend\n";
        let s1 = parse_tree(single, "<single>").unwrap().stats();
        assert_eq!((s1.leaf_count, s1.min_depth, s1.max_depth), (1, 0, 0));
    }

    #[test]
    fn every_probe_reaches_exactly_one_leaf() {
        let (x, y) = piecewise_data(1500, 44);
        let config = BuildConfig {
            max_leaves: 16,
            min_leaf_samples: 30,
            seed: 2,
            ..BuildConfig::default()
        };
        let tree = build_tree(&x, &y, &config).unwrap();

        // Region membership test evaluated independently of `descend`.
        fn containing_leaves(tree: &Tree, id: usize, x: &[f64], hits: &mut Vec<usize>) {
            match tree.node(id) {
                TreeNode::Branch {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if x[*feature] <= *threshold {
                        containing_leaves(tree, *left, x, hits);
                    } else {
                        containing_leaves(tree, *right, x, hits);
                    }
                }
                TreeNode::Leaf { .. } => hits.push(id),
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let probe = [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)];
            let mut hits = Vec::new();
            containing_leaves(&tree, tree.root(), &probe, &mut hits);
            assert_eq!(hits.len(), 1);
            let (leaf, _) = tree.descend(&probe);
            assert_eq!(hits[0], leaf);
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (x, y) = piecewise_data(2500, 60);
        let config = BuildConfig {
            max_leaves: 40,
            min_leaf_samples: 25,
            seed: 31,
            ..BuildConfig::default()
        };
        let tree = build_tree(&x, &y, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tree");
        save_tree(&tree, &path).unwrap();
        let loaded = load_tree(&path).unwrap();

        let mut a = String::new();
        let mut b = String::new();
        render_tree(&tree, &mut a);
        render_tree(&loaded, &mut b);
        assert_eq!(a, b, "round trip must be byte-exact");

        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..1000 {
            let probe = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let p1 = tree.predict(&probe);
            let p2 = loaded.predict(&probe);
            assert_eq!(p1[0].to_bits(), p2[0].to_bits());
        }
        assert_eq!(loaded.config(), tree.config());
    }

    #[test]
    fn loader_rejects_broken_files() {
        let tree = crafted_depth2();
        let mut good = String::new();
        render_tree(&tree, &mut good);

        let wrong_version = good.replace("lmtree tree v1", "lmtree tree v9");
        assert!(matches!(
            parse_tree(&wrong_version, "<t>"),
            Err(Error::Version { .. })
        ));

        let truncated: String = good.lines().take(14).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_tree(&truncated, "<t>"), Err(Error::Format { .. })));

        // One leaf coefficient dropped: count no longer matches dimensions.
        let short_leaf = good.replace(" 10 2 0.00000000000000000e0 1.00000000000000006e-1", " 10 2 1.00000000000000006e-1");
        assert!(matches!(
            parse_tree(&short_leaf, "<t>"),
            Err(Error::DimensionMismatch(_))
        ));

        let cyclic = good.replace("branch 2 0 5.00000000000000000e-1 5 6", "branch 2 0 5.00000000000000000e-1 0 6");
        assert!(matches!(parse_tree(&cyclic, "<t>"), Err(Error::Format { .. })));

        let garbled = good.replace("branch 0 0", "brunch 0 0");
        assert!(matches!(parse_tree(&garbled, "<t>"), Err(Error::Format { .. })));
    }

    #[test]
    fn dims_are_validated_at_use() {
        let tree = crafted_depth2();
        assert!(tree.validate_dims(1, 1).is_ok());
        assert!(matches!(
            tree.validate_dims(9, 5),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
