//! Regularized joint assignment tree.
//!
//! A tree partitions covariate space by greedy recursive splitting. Each leaf
//! estimates every arm's mean outcome, shrinks the arm means toward a
//! leaf-wide average, and assigns the arm with the largest shrunk estimate.
//! Splits maximize the summed estimated utility of the two children under
//! their leaf-wise assignments.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{ceil_fraction, sd_population, Dataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Estimator of the utility achieved by assigning a leaf to one arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UtilityKind {
    /// Leaf size times the assigned arm's regularized estimate.
    N,
    /// Assigned-arm count over its global share, times the estimate.
    P,
    /// Self-normalized weighted inverse-propensity sum.
    WeightedN,
    /// Weighted inverse-propensity sum over the assigned arm's rows.
    WeightedP,
}

impl std::str::FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(UtilityKind::N),
            "P" | "p" => Ok(UtilityKind::P),
            "weighted" | "weighted-p" | "weighted_p" => Ok(UtilityKind::WeightedP),
            "weighted-n" | "weighted_n" => Ok(UtilityKind::WeightedN),
            other => Err(Error::invalid(format!("unknown utility kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UtilityKind::N => "N",
            UtilityKind::P => "P",
            UtilityKind::WeightedN => "weighted-n",
            UtilityKind::WeightedP => "weighted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeGrowParams {
    /// Shrinkage toward the leaf average while growing.
    pub lambda1: f64,
    /// Minimum number of rows in each child.
    pub min_leaf: usize,
    /// Minimum utility gain, in units of the outcome standard deviation.
    pub epsilon: f64,
    pub utility: UtilityKind,
    /// Fraction of arms drawn as assignment candidates at each split.
    pub kappa: f64,
    /// Fraction of covariates drawn at each split.
    pub delta: f64,
    /// Divide the gain by the parent size before applying `epsilon`.
    pub normalize_gain: bool,
    pub seed: u64,
}

impl Default for TreeGrowParams {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            min_leaf: 5,
            epsilon: 1.0,
            utility: UtilityKind::N,
            kappa: 1.0,
            delta: 1.0,
            normalize_gain: false,
            seed: 0,
        }
    }
}

impl TreeGrowParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || !self.lambda1.is_finite() {
            return Err(Error::invalid(format!("lambda1 = {} must be finite and >= 0", self.lambda1)));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid("minimum leaf size must be at least 1"));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        for (name, f) in [("kappa", self.kappa), ("delta", self.delta)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("{name} = {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Arm-wise counts and means of the outcomes in one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafArmStats {
    pub counts: Vec<usize>,
    /// Arm means; 0 for arms without rows.
    pub means: Vec<f64>,
    pub n: usize,
    pub lambda: f64,
}

impl LeafArmStats {
    pub fn from_rows(data: &Dataset, rows: &[usize], lambda: f64) -> Self {
        Self::from_labeled_rows(data.arms(), data.outcomes(), data.n_arms(), rows, lambda)
    }

    pub(crate) fn from_labeled_rows(arms: &[usize], ys: &[f64], n_arms: usize, rows: &[usize], lambda: f64) -> Self {
        let mut counts = vec![0; n_arms];
        let mut sums = vec![0.0; n_arms];
        for &i in rows {
            counts[arms[i]] += 1;
            sums[arms[i]] += ys[i];
        }
        let means = counts.iter().zip(&sums).map(|(&c, &s)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        Self { counts, means, n: rows.len(), lambda }
    }

    pub fn n_arms(&self) -> usize {
        self.counts.len()
    }
}

/// Weighted inverse-propensity sums over one leaf, used by the weighted
/// utility kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedArmSums {
    /// Sum of `v_i` over all rows in the leaf.
    pub total_weight: f64,
    /// Per arm, sum of `v_i / p_i`.
    pub inv_prop_weight: Vec<f64>,
    /// Per arm, sum of `v_i y_i / p_i`.
    pub ipw_outcome: Vec<f64>,
}

impl WeightedArmSums {
    pub fn from_rows(data: &Dataset, rows: &[usize]) -> Self {
        let mut acc = ArmAccumulator::new(data.n_arms());
        for &i in rows {
            acc.add(data, i, 1.0);
        }
        acc.weighted_sums()
    }
}

/// Index of the largest present value; ties go to the smallest index.
pub fn argmax_smallest(values: impl IntoIterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.into_iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// Shrinks candidate arms' means toward the leaf average.
///
/// `Y^k = (N^k mean^k + lambda Ybar) / (N^k + lambda)` where
/// `Ybar = sum_k [N^k mean^k / (N^k + lambda)] / sum_k [N^k / (N^k + lambda)]`
/// over the candidate arms. With `lambda = 0` unobserved candidates are
/// dropped; with `lambda > 0` they receive `Ybar`. Non-candidates are `None`.
pub fn regularized_estimates(stats: &LeafArmStats, lambda: f64, candidates: &[usize]) -> Result<Vec<Option<f64>>> {
    let mut out = vec![None; stats.n_arms()];
    if lambda == 0.0 {
        for &k in candidates {
            if stats.counts[k] > 0 {
                out[k] = Some(stats.means[k]);
            }
        }
        return if out.iter().any(Option::is_some) { Ok(out) } else { Err(Error::NoCandidateArms) };
    }
    let sums: Vec<f64> = stats.counts.iter().zip(&stats.means).map(|(&c, &m)| c as f64 * m).collect();
    let pooled = pooled_mean(&stats.counts, &sums, lambda, candidates).ok_or(Error::NoCandidateArms)?;
    for &k in candidates {
        let n = stats.counts[k] as f64;
        out[k] = Some((sums[k] + lambda * pooled) / (n + lambda));
    }
    Ok(out)
}

/// The lambda-weighted cross-arm leaf average, `None` if no candidate arm
/// has rows.
fn pooled_mean(counts: &[usize], sums: &[f64], lambda: f64, candidates: &[usize]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for &k in candidates {
        let n = counts[k] as f64;
        if n > 0.0 {
            num += sums[k] / (n + lambda);
            den += n / (n + lambda);
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Arm with the largest estimate (smallest index on ties).
pub fn leaf_assignment(estimates: &[Option<f64>]) -> Option<usize> {
    argmax_smallest(estimates.iter().copied())
}

/// Estimated utility of assigning the leaf to `arm`.
///
/// `shares` are the global arm shares `P^k` used by [`UtilityKind::P`];
/// `weighted` carries the sums needed by the weighted kinds.
pub fn leaf_utility(
    stats: &LeafArmStats,
    estimates: &[Option<f64>],
    arm: usize,
    kind: UtilityKind,
    shares: &[f64],
    weighted: Option<&WeightedArmSums>,
) -> Result<f64> {
    let estimate = estimates
        .get(arm)
        .copied()
        .flatten()
        .ok_or_else(|| Error::invalid(format!("arm {arm} has no estimate")))?;
    match kind {
        UtilityKind::N => Ok(stats.n as f64 * estimate),
        UtilityKind::P => {
            let p = shares[arm];
            if p.is_nan() || p <= 0.0 {
                return Err(Error::ZeroPropensity { arm });
            }
            Ok(stats.counts[arm] as f64 / p * estimate)
        }
        UtilityKind::WeightedN | UtilityKind::WeightedP => {
            let w = weighted.ok_or_else(|| Error::invalid("weighted utility needs weighted sums"))?;
            Ok(weighted_utility(kind, w.total_weight, w.inv_prop_weight[arm], w.ipw_outcome[arm]))
        }
    }
}

fn weighted_utility(kind: UtilityKind, total_weight: f64, inv_prop_weight: f64, ipw_outcome: f64) -> f64 {
    match kind {
        UtilityKind::WeightedP => ipw_outcome,
        _ if inv_prop_weight > 0.0 => total_weight / inv_prop_weight * ipw_outcome,
        _ => 0.0,
    }
}

/// Running per-arm sums over a set of rows.
#[derive(Debug, Clone)]
struct ArmAccumulator {
    n: usize,
    counts: Vec<usize>,
    sums: Vec<f64>,
    total_weight: f64,
    inv_prop_weight: Vec<f64>,
    ipw_outcome: Vec<f64>,
}

impl ArmAccumulator {
    fn new(n_arms: usize) -> Self {
        Self {
            n: 0,
            counts: vec![0; n_arms],
            sums: vec![0.0; n_arms],
            total_weight: 0.0,
            inv_prop_weight: vec![0.0; n_arms],
            ipw_outcome: vec![0.0; n_arms],
        }
    }

    /// Adds (`sign = 1`) or removes (`sign = -1`) row `i`.
    #[inline]
    fn add(&mut self, data: &Dataset, i: usize, sign: f64) {
        let a = data.arms()[i];
        let y = data.outcomes()[i];
        let v = data.weight(i);
        let p = data.propensity(i);
        if sign > 0.0 {
            self.n += 1;
            self.counts[a] += 1;
        } else {
            self.n -= 1;
            self.counts[a] -= 1;
        }
        self.sums[a] += sign * y;
        self.total_weight += sign * v;
        self.inv_prop_weight[a] += sign * v / p;
        self.ipw_outcome[a] += sign * v * y / p;
    }

    fn weighted_sums(&self) -> WeightedArmSums {
        WeightedArmSums {
            total_weight: self.total_weight,
            inv_prop_weight: self.inv_prop_weight.clone(),
            ipw_outcome: self.ipw_outcome.clone(),
        }
    }

    /// Assigned arm and its utility over `candidates`, without allocating.
    fn evaluate(&self, lambda: f64, candidates: &[usize], kind: UtilityKind, shares: &[f64]) -> Option<(usize, f64)> {
        let pooled = if lambda > 0.0 { pooled_mean(&self.counts, &self.sums, lambda, candidates)? } else { 0.0 };
        let mut best: Option<(usize, f64)> = None;
        for &k in candidates {
            let n = self.counts[k];
            let est = if lambda == 0.0 {
                if n == 0 {
                    continue;
                }
                self.sums[k] / n as f64
            } else {
                (self.sums[k] + lambda * pooled) / (n as f64 + lambda)
            };
            if best.is_none_or(|(_, b)| est > b) {
                best = Some((k, est));
            }
        }
        let (arm, est) = best?;
        let utility = match kind {
            UtilityKind::N => self.n as f64 * est,
            UtilityKind::P => self.counts[arm] as f64 / shares[arm] * est,
            _ => weighted_utility(kind, self.total_weight, self.inv_prop_weight[arm], self.ipw_outcome[arm]),
        };
        Some((arm, utility))
    }
}

/// An accepted split of a node's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub left_arm: usize,
    pub right_arm: usize,
    /// `U(left) + U(right)`.
    pub utility: f64,
    /// Parent utility over the same candidate arms.
    pub parent_utility: f64,
    pub candidates: Vec<usize>,
}

/// Read-only state shared by every node of one tree.
#[derive(Debug, Clone, Copy)]
pub struct TreeGrower<'a> {
    data: &'a Dataset,
    params: &'a TreeGrowParams,
    sd_y: f64,
    n_features: usize,
    n_candidates: usize,
}

impl<'a> TreeGrower<'a> {
    /// `sd_y` is the population standard deviation of the training
    /// outcomes, the scale of the gain threshold.
    pub fn new(data: &'a Dataset, params: &'a TreeGrowParams, sd_y: f64) -> Result<Self> {
        params.validate()?;
        if data.d() == 0 {
            return Err(Error::invalid("no covariates"));
        }
        if matches!(params.utility, UtilityKind::P) && data.arm_propensities().iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err(Error::ZeroPropensity { arm: data.arm_propensities().iter().position(|&p| p.is_nan() || p <= 0.0).unwrap() });
        }
        Ok(Self {
            data,
            params,
            sd_y,
            n_features: ceil_fraction(params.delta, data.d()).clamp(1, data.d()),
            n_candidates: ceil_fraction(params.kappa, data.n_arms()).clamp(1, data.n_arms()),
        })
    }

    /// Same as [`TreeGrower::new`] with `sd_y` taken from `data`.
    pub fn for_data(data: &'a Dataset, params: &'a TreeGrowParams) -> Result<Self> {
        let sd = sd_population(data.outcomes()).unwrap_or(0.0);
        Self::new(data, params, sd)
    }

    fn accept(&self, gain: f64, parent_n: usize) -> bool {
        let threshold = self.params.epsilon * self.sd_y;
        if self.params.normalize_gain {
            gain / parent_n as f64 >= threshold
        } else {
            gain >= threshold
        }
    }

    /// Best admissible split of `rows`, or `None`.
    ///
    /// Draws the covariate and candidate-arm subsets for this node from
    /// `rng`. A split is admissible when both children have at least
    /// `min_leaf` rows, the utility gain over the parent (restricted to the
    /// drawn arms) passes the `epsilon` threshold, and the children assign
    /// different arms.
    pub fn best_split(&self, rows: &[usize], rng: &mut Rng) -> Option<Split> {
        let data = self.data;
        let nu = self.params.min_leaf;
        let mut features = index::sample(rng, data.d(), self.n_features).into_vec();
        features.sort_unstable();
        let mut candidates = index::sample(rng, data.n_arms(), self.n_candidates).into_vec();
        candidates.sort_unstable();
        if rows.len() < 2 * nu {
            return None;
        }

        let (lambda, kind, shares) = (self.params.lambda1, self.params.utility, data.arm_propensities());
        let mut parent = ArmAccumulator::new(data.n_arms());
        for &i in rows {
            parent.add(data, i, 1.0);
        }
        let (_, parent_utility) = parent.evaluate(lambda, &candidates, kind, shares)?;

        let mut sorted = rows.to_vec();
        let mut best: Option<(f64, usize, f64, usize, usize)> = None;
        for &j in &features {
            sorted.sort_unstable_by(|&a, &b| data.x(a, j).total_cmp(&data.x(b, j)).then(a.cmp(&b)));
            let mut left = ArmAccumulator::new(data.n_arms());
            let mut right = parent.clone();
            for pos in 0..sorted.len() - 1 {
                let i = sorted[pos];
                left.add(data, i, 1.0);
                right.add(data, i, -1.0);
                let (lo, hi) = (data.x(i, j), data.x(sorted[pos + 1], j));
                if lo == hi || left.n < nu || right.n < nu {
                    continue;
                }
                let Some((la, lu)) = left.evaluate(lambda, &candidates, kind, shares) else { continue };
                let Some((ra, ru)) = right.evaluate(lambda, &candidates, kind, shares) else { continue };
                if la == ra {
                    continue;
                }
                let total = lu + ru;
                if !self.accept(total - parent_utility, rows.len()) {
                    continue;
                }
                if best.is_none_or(|(b, ..)| total > b) {
                    let mid = 0.5 * (lo + hi);
                    best = Some((total, j, if mid < hi { mid } else { lo }, la, ra));
                }
            }
        }
        let (utility, feature, threshold, left_arm, right_arm) = best?;
        let (left, right) = rows.iter().partition(|&&i| data.x(i, feature) <= threshold);
        Some(Split { feature, threshold, left, right, left_arm, right_arm, utility, parent_utility, candidates })
    }

    /// Grows a tree on `rows` until no node has an admissible split.
    pub fn grow(&self, rows: &[usize], rng: &mut Rng) -> Result<AssignmentTree> {
        if rows.is_empty() {
            return Err(Error::Empty("cannot grow a tree on zero rows".into()));
        }
        let mut nodes = Vec::new();
        self.grow_node(rows, rng, &mut nodes)?;
        Ok(AssignmentTree { nodes, n_arms: self.data.n_arms(), d: self.data.d() })
    }

    fn grow_node(&self, rows: &[usize], rng: &mut Rng, nodes: &mut Vec<TreeNode>) -> Result<usize> {
        let id = nodes.len();
        nodes.push(TreeNode::Leaf(Leaf::fit(self.data, rows, self.params.lambda1)?));
        if let Some(split) = self.best_split(rows, rng) {
            let left = self.grow_node(&split.left, rng, nodes)?;
            let right = self.grow_node(&split.right, rng, nodes)?;
            nodes[id] = TreeNode::Split { feature: split.feature, threshold: split.threshold, left, right };
        }
        Ok(id)
    }
}

/// Leaf contents: growth-sample statistics, regularized estimates and the
/// assigned arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub stats: LeafArmStats,
    pub estimates: Vec<Option<f64>>,
    pub arm: usize,
}

impl Leaf {
    fn fit(data: &Dataset, rows: &[usize], lambda: f64) -> Result<Self> {
        let stats = LeafArmStats::from_rows(data, rows, lambda);
        let all: Vec<usize> = (0..data.n_arms()).collect();
        let estimates = regularized_estimates(&stats, lambda, &all)?;
        let arm = leaf_assignment(&estimates).ok_or(Error::NoCandidateArms)?;
        Ok(Self { stats, estimates, arm })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(Leaf),
}

/// A grown tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTree {
    nodes: Vec<TreeNode>,
    n_arms: usize,
    d: usize,
}

impl AssignmentTree {
    /// Node id of the leaf containing `x`.
    pub fn leaf_id(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf(_) => return at,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf(&self, x: &[f64]) -> &Leaf {
        match &self.nodes[self.leaf_id(x)] {
            TreeNode::Leaf(leaf) => leaf,
            TreeNode::Split { .. } => unreachable!("leaf_id returns a leaf"),
        }
    }

    /// Arm assigned by the growth-sample leaf estimates.
    pub fn assign(&self, x: &[f64]) -> usize {
        self.leaf(x).arm
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Best admissible split of `rows` in `data`; see [`TreeGrower::best_split`].
pub fn best_split(data: &Dataset, rows: &[usize], params: &TreeGrowParams, sd_y: f64, rng: &mut Rng) -> Result<Option<Split>> {
    Ok(TreeGrower::new(data, params, sd_y)?.best_split(rows, rng))
}

/// Grows one tree on `rows` of `data`, with the gain scale taken from all of
/// `data`'s outcomes.
pub fn grow_tree(data: &Dataset, rows: &[usize], params: &TreeGrowParams, rng: &mut Rng) -> Result<AssignmentTree> {
    TreeGrower::for_data(data, params)?.grow(rows, rng)
}
