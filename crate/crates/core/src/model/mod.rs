//! Regression-tree ensembles built from scratch: squared-error gradient
//! boosting with early stopping and a bagged random forest, sharing one
//! split engine.
//!
//! Split finding is histogram-based by default (quantile bins, at most 255,
//! so bin codes fit in a byte) with an exact mode for small datasets. Trees
//! grow leaf-wise (best gain first, bounded by a leaf budget) or level-wise;
//! both honor the same depth and leaf-size constraints. The threshold
//! convention is: go left iff `x <= threshold`. Ties between equal-gain
//! splits resolve to the lowest feature index, then the lowest threshold,
//! which keeps models byte-identical across thread counts.

mod serialize;

pub use serialize::{load_model, read_model, save_model, write_model};

use ndarray::ArrayView2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Gains below this are treated as zero; blocks splitting on float dust in
/// constant-target nodes.
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    LeafWise,
    LevelWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Histogram,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbdt,
    RandomForest,
}

/// Boosting configuration. Defaults: 1000 trees, shrinkage 0.05, patience
/// 15, depth 6, 20 samples per leaf, 255 histogram bins, leaf-wise growth
/// with a 31-leaf budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub early_stopping_rounds: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    pub growth: Growth,
    /// Leaf budget for leaf-wise growth (ignored level-wise).
    pub max_leaves: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_estimators: 1000,
            learning_rate: 0.05,
            early_stopping_rounds: 15,
            max_depth: 6,
            min_samples_leaf: 20,
            max_bins: 255,
            growth: Growth::LeafWise,
            max_leaves: 31,
            split_mode: SplitMode::Histogram,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Domain("learning_rate must be > 0".into()));
        }
        if self.early_stopping_rounds < 1 {
            return Err(Error::Domain("early_stopping_rounds must be >= 1".into()));
        }
        if self.n_estimators == 0 {
            return Err(Error::Domain("n_estimators must be >= 1".into()));
        }
        if self.max_bins < 2 || self.max_bins > 255 {
            return Err(Error::Domain("max_bins must be in [2, 255]".into()));
        }
        if self.min_samples_leaf == 0 || self.max_leaves < 2 || self.max_depth == 0 {
            return Err(Error::Domain("tree size limits must be positive".into()));
        }
        Ok(())
    }
}

/// Random-forest configuration. Defaults: 100 bootstrap trees, all features
/// considered at every split, single-sample leaves, unlimited depth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RfConfig {
    pub n_estimators: usize,
    pub bootstrap: bool,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub max_bins: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_estimators: 100,
            bootstrap: true,
            min_samples_leaf: 1,
            max_depth: None,
            max_bins: 255,
            split_mode: SplitMode::Histogram,
            seed: 0,
        }
    }
}

/// Importance flavor: raw split counts (boosting convention) or normalized
/// mean decrease in impurity (forest convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceMode {
    SplitCount,
    Mdi,
}

/// One binary decision tree stored as a flat node array. A node with
/// `left < 0` is a leaf carrying `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub value: f64,
}

impl Node {
    fn leaf(value: f64) -> Self {
        Node {
            feature: 0,
            threshold: 0.0,
            left: -1,
            right: -1,
            value,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.left < 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.is_leaf() {
                return node.value;
            }
            idx = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }
}

/// A fitted ensemble: boosted (prediction = base + lr * sum of trees) or
/// bagged (prediction = mean of trees).
#[derive(Debug, Clone)]
pub struct TreeEnsemble {
    pub kind: ModelKind,
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Trees actually used at prediction time (best validation iteration for
    /// boosting; all trees for forests).
    pub n_trees_used: usize,
    pub n_features: usize,
    pub split_count: Vec<u64>,
    pub impurity_reduction: Vec<f64>,
    /// Validation RMSE after each boosting iteration (empty for forests).
    pub val_rmse_history: Vec<f64>,
}

impl TreeEnsemble {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Gbdt => {
                let mut acc = self.base_prediction;
                for tree in &self.trees[..self.n_trees_used] {
                    acc += self.learning_rate * tree.predict_row(x);
                }
                acc
            }
            ModelKind::RandomForest => {
                if self.n_trees_used == 0 {
                    return self.base_prediction;
                }
                let sum: f64 = self.trees[..self.n_trees_used]
                    .iter()
                    .map(|t| t.predict_row(x))
                    .sum();
                sum / self.n_trees_used as f64
            }
        }
    }

    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let mut out = Vec::with_capacity(x.nrows());
        let mut row_buf = vec![0.0; x.ncols()];
        for row in x.outer_iter() {
            for (dst, src) in row_buf.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
            out.push(self.predict_row(&row_buf));
        }
        Ok(out)
    }

    /// Recompute split counts and impurity sums from the retained trees.
    fn tally_importance(&mut self) {
        self.split_count = vec![0; self.n_features];
        // impurity_reduction is accumulated during growth (it needs gains);
        // split counts are recomputed from structure for the kept trees.
        for tree in &self.trees[..self.n_trees_used] {
            for node in &tree.nodes {
                if !node.is_leaf() {
                    self.split_count[node.feature as usize] += 1;
                }
            }
        }
    }
}

/// Per-feature importance scores. `SplitCount` returns raw counts;
/// `Mdi` returns impurity reductions normalized to sum 1.
pub fn importance(model: &TreeEnsemble, mode: ImportanceMode) -> Result<Vec<f64>> {
    match mode {
        ImportanceMode::SplitCount => {
            Ok(model.split_count.iter().map(|&c| c as f64).collect())
        }
        ImportanceMode::Mdi => {
            let total: f64 = model.impurity_reduction.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Capability(
                    "mdi importance unavailable: no impurity reduction recorded".into(),
                ));
            }
            Ok(model
                .impurity_reduction
                .iter()
                .map(|&v| v / total)
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Shared split engine
// ---------------------------------------------------------------------------

/// Quantile-binned feature codes (column-major) plus the real-valued upper
/// edge of every bin. Splitting below bin `b` uses `edges[f][b]` as the
/// threshold, so predictions never need the binning.
struct BinnedData {
    n_rows: usize,
    n_features: usize,
    codes: Vec<Vec<u8>>,
    edges: Vec<Vec<f64>>,
}

impl BinnedData {
    fn build(x: &ArrayView2<f64>, max_bins: usize) -> Self {
        let (n, f) = x.dim();
        let mut codes = Vec::with_capacity(f);
        let mut edges = Vec::with_capacity(f);
        for j in 0..f {
            let mut sorted: Vec<f64> = x.column(j).iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut cuts: Vec<f64> = Vec::with_capacity(max_bins);
            for b in 1..=max_bins {
                let pos = (b * n / max_bins).min(n).saturating_sub(1);
                let v = sorted[pos];
                if cuts.last() != Some(&v) {
                    cuts.push(v);
                }
            }
            // Make sure the last edge is the column maximum.
            if cuts.last() != Some(&sorted[n - 1]) {
                cuts.push(sorted[n - 1]);
            }
            let mut col_codes = vec![0u8; n];
            for (i, &v) in x.column(j).iter().enumerate() {
                let bin = cuts.partition_point(|&e| e < v);
                col_codes[i] = bin.min(cuts.len() - 1) as u8;
            }
            codes.push(col_codes);
            edges.push(cuts);
        }
        BinnedData {
            n_rows: n,
            n_features: f,
            codes,
            edges,
        }
    }

    fn n_bins(&self, feature: usize) -> usize {
        self.edges[feature].len()
    }
}

/// Per-node histogram: counts and residual sums per (feature, bin).
#[derive(Clone)]
struct Hist {
    counts: Vec<u32>,
    sums: Vec<f64>,
    offsets: Vec<usize>,
}

impl Hist {
    fn build(data: &BinnedData, rows: &[u32], grad: &[f64]) -> Self {
        let mut offsets = Vec::with_capacity(data.n_features + 1);
        let mut total = 0usize;
        for f in 0..data.n_features {
            offsets.push(total);
            total += data.n_bins(f);
        }
        offsets.push(total);
        let mut counts = vec![0u32; total];
        let mut sums = vec![0.0f64; total];
        // Per-feature accumulation is independent, so feature-level
        // parallelism cannot change results.
        let chunks: Vec<(usize, Vec<u32>, Vec<f64>)> = (0..data.n_features)
            .into_par_iter()
            .map(|f| {
                let nb = data.n_bins(f);
                let mut c = vec![0u32; nb];
                let mut s = vec![0.0f64; nb];
                let codes = &data.codes[f];
                for &i in rows {
                    let b = codes[i as usize] as usize;
                    c[b] += 1;
                    s[b] += grad[i as usize];
                }
                (f, c, s)
            })
            .collect();
        for (f, c, s) in chunks {
            let off = offsets[f];
            counts[off..off + c.len()].copy_from_slice(&c);
            sums[off..off + s.len()].copy_from_slice(&s);
        }
        Hist {
            counts,
            sums,
            offsets,
        }
    }

    /// `self - other`, consuming self (the parent).
    fn subtract_into(mut self, other: &Hist) -> Hist {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a -= b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a -= b;
        }
        self
    }

    fn feature(&self, f: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[f], self.offsets[f + 1]);
        (&self.counts[lo..hi], &self.sums[lo..hi])
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitCand {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_count: usize,
    left_sum: f64,
}

/// Variance-reduction gain of a candidate split.
#[inline]
fn split_gain(
    sum_l: f64,
    count_l: usize,
    sum_p: f64,
    count_p: usize,
) -> Option<(f64, f64, usize)> {
    let count_r = count_p - count_l;
    if count_l == 0 || count_r == 0 {
        return None;
    }
    let sum_r = sum_p - sum_l;
    let gain = sum_l * sum_l / count_l as f64 + sum_r * sum_r / count_r as f64
        - sum_p * sum_p / count_p as f64;
    Some((gain, sum_r, count_r))
}

fn best_split_histogram(
    data: &BinnedData,
    hist: &Hist,
    count: usize,
    sum: f64,
    min_leaf: usize,
) -> Option<SplitCand> {
    let per_feature: Vec<Option<SplitCand>> = (0..data.n_features)
        .into_par_iter()
        .map(|f| {
            let (counts, sums) = hist.feature(f);
            let nb = counts.len();
            let mut best: Option<SplitCand> = None;
            let mut cl = 0usize;
            let mut sl = 0.0f64;
            for b in 0..nb.saturating_sub(1) {
                cl += counts[b] as usize;
                sl += sums[b];
                if cl < min_leaf {
                    continue;
                }
                if count - cl < min_leaf {
                    break;
                }
                if let Some((gain, _, _)) = split_gain(sl, cl, sum, count) {
                    if gain > GAIN_EPS && best.map_or(true, |c| gain > c.gain) {
                        best = Some(SplitCand {
                            feature: f,
                            threshold: data.edges[f][b],
                            gain,
                            left_count: cl,
                            left_sum: sl,
                        });
                    }
                }
            }
            best
        })
        .collect();
    // Deterministic reduction in feature order; strict > keeps the lowest
    // feature index on ties.
    let mut best: Option<SplitCand> = None;
    for cand in per_feature.into_iter().flatten() {
        if best.map_or(true, |c| cand.gain > c.gain) {
            best = Some(cand);
        }
    }
    best
}

fn best_split_exact(
    x: &ArrayView2<f64>,
    grad: &[f64],
    rows: &[u32],
    count: usize,
    sum: f64,
    min_leaf: usize,
) -> Option<SplitCand> {
    let n_features = x.ncols();
    let per_feature: Vec<Option<SplitCand>> = (0..n_features)
        .into_par_iter()
        .map(|f| {
            let mut pairs: Vec<(f64, f64)> =
                rows.iter().map(|&i| (x[[i as usize, f]], grad[i as usize])).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut best: Option<SplitCand> = None;
            let mut cl = 0usize;
            let mut sl = 0.0f64;
            for w in 0..pairs.len() - 1 {
                cl += 1;
                sl += pairs[w].1;
                if pairs[w + 1].0 == pairs[w].0 {
                    continue;
                }
                if cl < min_leaf || count - cl < min_leaf {
                    continue;
                }
                if let Some((gain, _, _)) = split_gain(sl, cl, sum, count) {
                    if gain > GAIN_EPS && best.map_or(true, |c| gain > c.gain) {
                        let threshold = pairs[w].0 + (pairs[w + 1].0 - pairs[w].0) / 2.0;
                        best = Some(SplitCand {
                            feature: f,
                            threshold,
                            gain,
                            left_count: cl,
                            left_sum: sl,
                        });
                    }
                }
            }
            best
        })
        .collect();
    let mut best: Option<SplitCand> = None;
    for cand in per_feature.into_iter().flatten() {
        if best.map_or(true, |c| cand.gain > c.gain) {
            best = Some(cand);
        }
    }
    best
}

/// Everything one tree build needs to look at.
struct GrowContext<'a> {
    x: ArrayView2<'a, f64>,
    binned: Option<&'a BinnedData>,
    grad: &'a [f64],
    min_leaf: usize,
    max_depth: usize,
    max_leaves: usize,
    growth: Growth,
}

struct Frontier {
    node_id: usize,
    start: usize,
    end: usize,
    depth: usize,
    count: usize,
    sum: f64,
    hist: Option<Hist>,
    best: Option<SplitCand>,
    created: usize,
}

/// Grow one tree over `rows` (indices into x/grad; bootstrap duplicates
/// allowed). Returns the tree plus per-feature impurity gains, and assigns
/// each row its leaf value in `row_leaf_value` when provided.
fn grow_tree(
    ctx: &GrowContext,
    rows: &mut Vec<u32>,
    impurity_out: &mut [f64],
    mut row_leaf_value: Option<&mut Vec<f64>>,
) -> Tree {
    let mut tree = Tree::default();
    let total = rows.len();
    let sum: f64 = rows.iter().map(|&i| ctx.grad[i as usize]).sum();
    tree.nodes.push(Node::leaf(sum / total as f64));

    let root_hist = ctx
        .binned
        .map(|b| Hist::build(b, rows, ctx.grad));
    let root_best = find_best(ctx, rows, 0, total, total, sum, root_hist.as_ref());
    let mut frontier = vec![Frontier {
        node_id: 0,
        start: 0,
        end: total,
        depth: 0,
        count: total,
        sum,
        hist: root_hist,
        best: root_best,
        created: 0,
    }];
    let mut n_leaves = 1usize;
    let mut created = 1usize;

    loop {
        // Candidate selection: leaf-wise takes the best gain (leaf budget
        // applies); level-wise takes creation order.
        let pick = match ctx.growth {
            Growth::LeafWise => {
                if n_leaves >= ctx.max_leaves {
                    None
                } else {
                    // Highest gain first; equal gains resolve to the earliest
                    // created node so expansion order is deterministic.
                    frontier
                        .iter()
                        .enumerate()
                        .filter(|(_, f)| f.best.is_some())
                        .max_by(|(_, a), (_, b)| {
                            let ga = a.best.unwrap().gain;
                            let gb = b.best.unwrap().gain;
                            ga.partial_cmp(&gb)
                                .unwrap()
                                .then(b.created.cmp(&a.created))
                        })
                        .map(|(i, _)| i)
                }
            }
            Growth::LevelWise => frontier
                .iter()
                .enumerate()
                .filter(|(_, f)| f.best.is_some())
                .min_by_key(|(_, f)| f.created)
                .map(|(i, _)| i),
        };
        let Some(pick) = pick else { break };
        let node = frontier.swap_remove(pick);
        let best = node.best.expect("picked node has a split");

        // Stable partition of the node's row range.
        let slice = &mut rows[node.start..node.end];
        let mut left_rows = Vec::with_capacity(best.left_count);
        let mut right_rows = Vec::with_capacity(node.count - best.left_count);
        for &i in slice.iter() {
            if ctx.x[[i as usize, best.feature]] <= best.threshold {
                left_rows.push(i);
            } else {
                right_rows.push(i);
            }
        }
        debug_assert_eq!(left_rows.len(), best.left_count);
        slice[..left_rows.len()].copy_from_slice(&left_rows);
        slice[left_rows.len()..].copy_from_slice(&right_rows);
        let mid = node.start + left_rows.len();

        let left_sum = best.left_sum;
        let right_sum = node.sum - left_sum;
        let left_count = best.left_count;
        let right_count = node.count - left_count;

        // Turn the leaf into an internal node with two fresh leaves.
        let left_id = tree.nodes.len();
        let right_id = left_id + 1;
        tree.nodes
            .push(Node::leaf(left_sum / left_count as f64));
        tree.nodes
            .push(Node::leaf(right_sum / right_count as f64));
        {
            let parent = &mut tree.nodes[node.node_id];
            parent.feature = best.feature as u32;
            parent.threshold = best.threshold;
            parent.left = left_id as i32;
            parent.right = right_id as i32;
        }
        impurity_out[best.feature] += best.gain;
        n_leaves += 1;

        // Child histograms: build the smaller, derive the larger.
        let depth = node.depth + 1;
        let (left_hist, right_hist) = match (ctx.binned, node.hist) {
            (Some(b), Some(parent_hist)) => {
                if left_count <= right_count {
                    let lh = Hist::build(b, &rows[node.start..mid], ctx.grad);
                    let rh = parent_hist.subtract_into(&lh);
                    (Some(lh), Some(rh))
                } else {
                    let rh = Hist::build(b, &rows[mid..node.end], ctx.grad);
                    let lh = parent_hist.subtract_into(&rh);
                    (Some(lh), Some(rh))
                }
            }
            _ => (None, None),
        };

        let lb = if depth < ctx.max_depth {
            find_best(ctx, rows, node.start, mid, left_count, left_sum, left_hist.as_ref())
        } else {
            None
        };
        let rb = if depth < ctx.max_depth {
            find_best(ctx, rows, mid, node.end, right_count, right_sum, right_hist.as_ref())
        } else {
            None
        };

        frontier.push(Frontier {
            node_id: left_id,
            start: node.start,
            end: mid,
            depth,
            count: left_count,
            sum: left_sum,
            hist: if lb.is_some() { left_hist } else { None },
            best: lb,
            created,
        });
        created += 1;
        frontier.push(Frontier {
            node_id: right_id,
            start: mid,
            end: node.end,
            depth,
            count: right_count,
            sum: right_sum,
            hist: if rb.is_some() { right_hist } else { None },
            best: rb,
            created,
        });
        created += 1;
    }

    if let Some(values) = row_leaf_value.as_deref_mut() {
        // Every remaining frontier entry is a leaf; rows in its range get
        // its value.
        for f in &frontier {
            let v = tree.nodes[f.node_id].value;
            for &i in &rows[f.start..f.end] {
                values[i as usize] = v;
            }
        }
    }
    tree
}

fn find_best(
    ctx: &GrowContext,
    rows: &[u32],
    start: usize,
    end: usize,
    count: usize,
    sum: f64,
    hist: Option<&Hist>,
) -> Option<SplitCand> {
    if count < 2 * ctx.min_leaf || count < 2 {
        return None;
    }
    match (ctx.binned, hist) {
        (Some(b), Some(h)) => best_split_histogram(b, h, count, sum, ctx.min_leaf),
        _ => best_split_exact(&ctx.x, ctx.grad, &rows[start..end], count, sum, ctx.min_leaf),
    }
}

fn check_inputs(x: &ArrayView2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Validation("empty training matrix".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} rows vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("NaN or infinite feature value".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("NaN or infinite target value".into()));
    }
    Ok(())
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let sse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (sse / n).sqrt()
}

// ---------------------------------------------------------------------------
// Gradient boosting
// ---------------------------------------------------------------------------

/// Squared-error gradient boosting with early stopping on validation RMSE.
///
/// Trees fit the current residuals; predictions accumulate
/// `learning_rate * tree`. Training stops once the validation RMSE has not
/// improved for `early_stopping_rounds` consecutive trees, and the returned
/// model keeps exactly the best-validation iteration
/// (`n_trees_used = argmin` over the logged sequence, earliest on ties).
pub fn gbdt_fit(
    x_train: &ArrayView2<f64>,
    y_train: &[f64],
    x_val: &ArrayView2<f64>,
    y_val: &[f64],
    cfg: &GbdtConfig,
) -> Result<TreeEnsemble> {
    cfg.validate()?;
    check_inputs(x_train, y_train)?;
    check_inputs(x_val, y_val)?;
    if x_val.ncols() != x_train.ncols() {
        return Err(Error::Dimension(
            "validation feature width differs from training".into(),
        ));
    }
    if x_train.nrows() < 2 * cfg.min_samples_leaf {
        return Err(Error::Validation(format!(
            "need at least {} training rows for min_samples_leaf = {}",
            2 * cfg.min_samples_leaf,
            cfg.min_samples_leaf
        )));
    }

    let n = x_train.nrows();
    let n_features = x_train.ncols();
    let binned = match cfg.split_mode {
        SplitMode::Histogram => Some(BinnedData::build(x_train, cfg.max_bins)),
        SplitMode::Exact => None,
    };
    let base: f64 = y_train.iter().sum::<f64>() / n as f64;

    let mut train_pred = vec![base; n];
    let mut val_pred = vec![base; y_val.len()];
    let mut grad = vec![0.0; n];
    let mut leaf_values = vec![0.0; n];
    let mut impurity = vec![0.0f64; n_features];
    let mut trees: Vec<Tree> = Vec::new();
    let mut per_tree_impurity: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();

    let mut best_rmse = f64::INFINITY;
    let mut best_iter = 0usize;
    let mut stall = 0usize;

    let ctx_growth = cfg.growth;
    let val_rows: Vec<Vec<f64>> = x_val
        .outer_iter()
        .map(|r| r.iter().copied().collect())
        .collect();

    for t in 0..cfg.n_estimators {
        for i in 0..n {
            grad[i] = y_train[i] - train_pred[i];
        }
        let ctx = GrowContext {
            x: x_train.view(),
            binned: binned.as_ref(),
            grad: &grad,
            min_leaf: cfg.min_samples_leaf,
            max_depth: cfg.max_depth,
            max_leaves: cfg.max_leaves,
            growth: ctx_growth,
        };
        let mut rows: Vec<u32> = (0..n as u32).collect();
        let mut tree_impurity = vec![0.0f64; n_features];
        let tree = grow_tree(&ctx, &mut rows, &mut tree_impurity, Some(&mut leaf_values));
        for i in 0..n {
            train_pred[i] += cfg.learning_rate * leaf_values[i];
        }
        for (vp, row) in val_pred.iter_mut().zip(&val_rows) {
            *vp += cfg.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
        per_tree_impurity.push(
            tree_impurity
                .iter()
                .enumerate()
                .filter(|(_, &g)| g > 0.0)
                .map(|(f, &g)| (f, g))
                .collect(),
        );
        let vr = rmse(&val_pred, y_val);
        val_history.push(vr);
        if vr < best_rmse {
            best_rmse = vr;
            best_iter = t;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.early_stopping_rounds {
                break;
            }
        }
    }

    let n_trees_used = best_iter + 1;
    for tree_imp in per_tree_impurity.iter().take(n_trees_used) {
        for &(f, g) in tree_imp {
            impurity[f] += g;
        }
    }
    let mut ensemble = TreeEnsemble {
        kind: ModelKind::Gbdt,
        base_prediction: base,
        learning_rate: cfg.learning_rate,
        trees,
        n_trees_used,
        n_features,
        split_count: Vec::new(),
        impurity_reduction: impurity,
        val_rmse_history: val_history,
    };
    ensemble.tally_importance();
    Ok(ensemble)
}

/// Predict with a fitted ensemble; feature width must match training.
pub fn gbdt_predict(model: &TreeEnsemble, x: &ArrayView2<f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

/// Bootstrap-bagged full-depth trees; prediction is the mean over trees.
/// MDI importance comes from variance-reduction sums normalized to 1.
pub fn rf_fit(x: &ArrayView2<f64>, y: &[f64], cfg: &RfConfig) -> Result<TreeEnsemble> {
    check_inputs(x, y)?;
    if cfg.n_estimators == 0 {
        return Err(Error::Domain("n_estimators must be >= 1".into()));
    }
    if cfg.max_bins < 2 || cfg.max_bins > 255 {
        return Err(Error::Domain("max_bins must be in [2, 255]".into()));
    }
    let n = x.nrows();
    let n_features = x.ncols();
    let binned = match cfg.split_mode {
        SplitMode::Histogram => Some(BinnedData::build(x, cfg.max_bins)),
        SplitMode::Exact => None,
    };
    let max_depth = cfg.max_depth.unwrap_or(usize::MAX);

    // Trees are independent given per-tree seeds; built sequentially here
    // because the split search is already parallel over features.
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    let mut impurity = vec![0.0f64; n_features];
    for t in 0..cfg.n_estimators {
        let mut rows: Vec<u32> = if cfg.bootstrap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
            (0..n).map(|_| rng.random_range(0..n) as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        let ctx = GrowContext {
            x: x.view(),
            binned: binned.as_ref(),
            grad: y,
            min_leaf: cfg.min_samples_leaf,
            max_depth,
            max_leaves: usize::MAX,
            growth: Growth::LevelWise,
        };
        let mut tree_impurity = vec![0.0f64; n_features];
        let tree = grow_tree(&ctx, &mut rows, &mut tree_impurity, None);
        for (f, g) in tree_impurity.iter().enumerate() {
            impurity[f] += g;
        }
        trees.push(tree);
    }
    let n_trees_used = trees.len();
    let base: f64 = y.iter().sum::<f64>() / n as f64;
    let mut ensemble = TreeEnsemble {
        kind: ModelKind::RandomForest,
        base_prediction: base,
        learning_rate: 1.0,
        trees,
        n_trees_used,
        n_features,
        split_count: Vec::new(),
        impurity_reduction: impurity,
        val_rmse_history: Vec::new(),
    };
    ensemble.tally_importance();
    Ok(ensemble)
}

pub fn rf_predict(model: &TreeEnsemble, x: &ArrayView2<f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

#[cfg(test)]
mod tests;
