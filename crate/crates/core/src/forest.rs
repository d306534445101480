//! Bagged assignment forest with honest per-arm leaf estimates.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::{ceil_fraction, sd_population, subsample_labels, Dataset, SubsampleSpec};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng;
use crate::tree::{argmax_smallest, regularized_estimates, AssignmentTree, LeafArmStats, TreeGrowParams, TreeGrower, TreeNode};

/// Version of the model JSON layout.
pub const MODEL_VERSION: u32 = 1;

/// Which rows provide a tree's honest leaf estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HonestyMode {
    /// Every training row outside the tree's subsample.
    OutOfBag,
    /// The tree's subsample is halved; one half grows, the other estimates.
    HalfSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub tree: TreeGrowParams,
    pub n_trees: usize,
    /// Subsample fraction per tree, in `(0, 1)`.
    pub beta: f64,
    /// Shrinkage for the honest estimates.
    pub lambda2: f64,
    pub honesty: HonestyMode,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { tree: TreeGrowParams::default(), n_trees: 500, beta: 0.5, lambda2: 0.5, honesty: HonestyMode::OutOfBag }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if self.n_trees == 0 {
            return Err(Error::invalid("forest needs at least one tree"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta = {} outside (0, 1); honest rows would be empty", self.beta)));
        }
        if self.lambda2 < 0.0 || !self.lambda2.is_finite() {
            return Err(Error::invalid(format!("lambda2 = {} must be finite and >= 0", self.lambda2)));
        }
        Ok(())
    }
}

/// Honest statistics and estimates for one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestLeaf {
    pub stats: LeafArmStats,
    /// `None` for arms missing in this leaf.
    pub estimates: Vec<Option<f64>>,
}

impl HonestLeaf {
    fn new(stats: LeafArmStats, lambda2: f64) -> Self {
        let all: Vec<usize> = (0..stats.n_arms()).collect();
        let estimates = if stats.n == 0 {
            vec![None; stats.n_arms()]
        } else {
            regularized_estimates(&stats, lambda2, &all).expect("nonempty leaf has an observed arm")
        };
        Self { stats, estimates }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTree {
    pub tree: AssignmentTree,
    /// Rows the tree was grown on.
    pub in_bag: Vec<usize>,
    /// Honest rows when they are not simply the complement of `in_bag`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub honest_rows: Option<Vec<usize>>,
    /// Indexed by node id; `Some` exactly for leaves.
    pub honest: Vec<Option<HonestLeaf>>,
}

impl ForestTree {
    fn honest_row_set(&self, n: usize) -> Vec<usize> {
        match &self.honest_rows {
            Some(rows) => rows.clone(),
            None => complement(&self.in_bag, n),
        }
    }

    fn compute_honest(tree: &AssignmentTree, data: &Dataset, rows: &[usize], lambda2: f64) -> Vec<Option<HonestLeaf>> {
        let mut per_leaf: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes().len()];
        for &i in rows {
            per_leaf[tree.leaf_id(data.row(i))].push(i);
        }
        tree.nodes()
            .iter()
            .zip(per_leaf)
            .map(|(node, leaf_rows)| match node {
                TreeNode::Leaf(_) => Some(HonestLeaf::new(LeafArmStats::from_rows(data, &leaf_rows, lambda2), lambda2)),
                TreeNode::Split { .. } => None,
            })
            .collect()
    }
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// A fitted forest of assignment trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentForest {
    pub params: ForestParams,
    n_arms: usize,
    d: usize,
    n_train: usize,
    /// Arm-to-group map the trees were grown on, when clustered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arm_groups: Option<Vec<usize>>,
    trees: Vec<ForestTree>,
}

/// Fits an assignment forest.
///
/// Each tree is grown on a stratified subsample of `ceil(beta * N^k)` rows
/// per arm and receives honest leaf statistics from rows it was not grown
/// on.
pub fn fit_forest(data: &Dataset, params: &ForestParams) -> Result<AssignmentForest> {
    fit_forest_on_groups(data, None, params)
}

/// Fits with trees grown on `arm_groups`-relabeled arms while the honest
/// estimates stay on the original arms.
pub(crate) fn fit_forest_on_groups(data: &Dataset, arm_groups: Option<&[usize]>, params: &ForestParams) -> Result<AssignmentForest> {
    params.validate()?;
    data.require_all_arms("forest training data")?;
    let grow_data = match arm_groups {
        Some(map) => {
            let n_groups = map.iter().max().map_or(0, |&m| m + 1);
            data.relabel_arms(map, n_groups)?
        }
        None => data.clone(),
    };
    let n = data.n();
    if ceil_fraction(params.beta, n) < 2 * params.tree.min_leaf {
        warn!(
            subsample = ceil_fraction(params.beta, n),
            min_leaf = params.tree.min_leaf,
            "subsample smaller than twice the minimum leaf size; trees will not split"
        );
    }
    let sd_y = sd_population(grow_data.outcomes()).unwrap_or(0.0);
    let grower = TreeGrower::new(&grow_data, &params.tree, sd_y)?;

    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|m| {
            let tree_seed = rng::derive_seed(params.tree.seed, m as u64);
            let spec = SubsampleSpec { fraction: params.beta, stratify_by_arm: true, seed: rng::derive_seed(tree_seed, 1) };
            let sample = subsample_labels(data.arms(), data.n_arms(), &spec)?;
            let (in_bag, honest_rows) = match params.honesty {
                HonestyMode::OutOfBag => (sample, None),
                HonestyMode::HalfSample => {
                    let labels: Vec<usize> = sample.iter().map(|&i| data.arms()[i]).collect();
                    let half = SubsampleSpec { fraction: 0.5, stratify_by_arm: true, seed: rng::derive_seed(tree_seed, 2) };
                    let pos = subsample_labels(&labels, data.n_arms(), &half)?;
                    let grow: Vec<usize> = pos.iter().map(|&p| sample[p]).collect();
                    let rest: Vec<usize> = complement(&pos, sample.len()).into_iter().map(|p| sample[p]).collect();
                    (grow, Some(rest))
                }
            };
            let mut rng = rng::rng_from_seed(tree_seed);
            let tree = grower.grow(&in_bag, &mut rng)?;
            let mut ft = ForestTree { tree, in_bag, honest_rows, honest: Vec::new() };
            ft.honest = ForestTree::compute_honest(&ft.tree, data, &ft.honest_row_set(n), params.lambda2);
            Ok(ft)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AssignmentForest {
        params: *params,
        n_arms: data.n_arms(),
        d: data.d(),
        n_train: n,
        arm_groups: arm_groups.map(<[usize]>::to_vec),
        trees,
    })
}

impl AssignmentForest {
    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn trees(&self) -> &[ForestTree] {
        &self.trees
    }

    pub fn arm_groups(&self) -> Option<&[usize]> {
        self.arm_groups.as_deref()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        Ok(())
    }

    /// Honest per-arm estimates of tree `m` at `x`; `None` marks arms
    /// missing from the honest leaf.
    pub fn honest_estimate(&self, m: usize, x: &[f64]) -> Result<Vec<Option<f64>>> {
        self.check_dim(x)?;
        let t = self.trees.get(m).ok_or_else(|| Error::invalid(format!("tree {m} out of range")))?;
        Ok(self.leaf_estimates(t, x).to_vec())
    }

    fn leaf_estimates<'a>(&self, t: &'a ForestTree, x: &[f64]) -> &'a [Option<f64>] {
        let id = t.tree.leaf_id(x);
        &t.honest[id].as_ref().expect("leaf has honest record").estimates
    }

    /// Per-arm average of the honest tree estimates at `x`, skipping trees
    /// where the arm is missing.
    pub fn predict_arm_outcomes(&self, x: &[f64]) -> Result<Vec<Option<f64>>> {
        self.check_dim(x)?;
        let mut sum = vec![0.0; self.n_arms];
        let mut count = vec![0usize; self.n_arms];
        for t in &self.trees {
            for (k, e) in self.leaf_estimates(t, x).iter().enumerate() {
                if let Some(v) = e {
                    sum[k] += v;
                    count[k] += 1;
                }
            }
        }
        Ok(sum.iter().zip(&count).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect())
    }

    /// Arm with the largest aggregated estimate, ties to the smallest arm.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        argmax_smallest(self.predict_arm_outcomes(x)?).ok_or(Error::AllArmsMissing)
    }

    /// Per-arm estimates for row-major covariates.
    pub fn predict_rows(&self, x: &[f64]) -> Result<Vec<Vec<Option<f64>>>> {
        if !x.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() % self.d });
        }
        x.par_chunks(self.d).map(|row| self.predict_arm_outcomes(row)).collect()
    }

    /// Recomputes every tree's honest statistics from `data`, keeping the
    /// tree structures and row sets.
    pub fn refresh_honest(&mut self, data: &Dataset) -> Result<()> {
        if data.n() != self.n_train || data.n_arms() != self.n_arms {
            return Err(Error::invalid("refresh data must match the training data shape"));
        }
        let lambda2 = self.params.lambda2;
        let n = self.n_train;
        self.trees.par_iter_mut().for_each(|t| {
            t.honest = ForestTree::compute_honest(&t.tree, data, &t.honest_row_set(n), lambda2);
        });
        Ok(())
    }
}

impl Policy for AssignmentForest {
    fn assign(&self, x: &[f64]) -> Result<usize> {
        AssignmentForest::assign(self, x)
    }
}

/// On-disk model: a versioned forest plus the configuration that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    #[serde(default)]
    pub config: serde_json::Value,
    pub forest: AssignmentForest,
}

impl ModelFile {
    pub fn new(forest: AssignmentForest, config: serde_json::Value) -> Self {
        Self { version: MODEL_VERSION, config, forest }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion { found: version, expected: MODEL_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn data(seed: u64, n: usize, n_arms: usize, shift: f64) -> Dataset {
        let mut r = rng::rng_from_seed(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut t = Vec::new();
        for i in 0..n {
            let arm = if i < n_arms { i } else { r.random_range(0..n_arms) };
            let row = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let effect = if row[0] > 0.0 { arm as f64 } else { (n_arms - 1 - arm) as f64 };
            y.push(3.0 * effect + r.random_range(-2.0..2.0) + shift);
            t.push(arm);
            x.extend(row);
        }
        Dataset::new(y, t, x, 2, None).unwrap()
    }

    fn params(seed: u64) -> ForestParams {
        ForestParams {
            tree: TreeGrowParams { lambda1: 0.5, min_leaf: 5, epsilon: 0.0, seed, ..Default::default() },
            n_trees: 20,
            beta: 0.5,
            lambda2: 0.5,
            honesty: HonestyMode::OutOfBag,
        }
    }

    #[test]
    fn beta_one_is_rejected() {
        let d = data(1, 50, 2, 0.0);
        let p = ForestParams { beta: 1.0, n_trees: 1, ..params(0) };
        assert!(matches!(fit_forest(&d, &p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn constant_outcomes_estimate_the_constant() {
        let base = data(2, 200, 3, 0.0);
        let d = base.with_outcomes(vec![4.25; base.n()]).unwrap();
        let f = fit_forest(&d, &params(3)).unwrap();
        for q in [[0.1, 0.2], [-0.9, 0.5]] {
            for e in f.predict_arm_outcomes(&q).unwrap() {
                assert!((e.unwrap() - 4.25).abs() < 1e-12);
            }
            assert_eq!(f.assign(&q).unwrap(), 0);
        }
    }

    #[test]
    fn honest_toy_estimates() {
        let stats = LeafArmStats { counts: vec![2, 1], means: vec![1.0, 4.0], n: 3, lambda: 1.0 };
        let leaf = HonestLeaf::new(stats.clone(), 1.0);
        assert!((leaf.estimates[0].unwrap() - 1.428571).abs() < 1e-6);
        assert!((leaf.estimates[1].unwrap() - 3.142857).abs() < 1e-6);
        let raw = HonestLeaf::new(stats, 0.0);
        assert_eq!(raw.estimates, vec![Some(1.0), Some(4.0)]);
        let empty = HonestLeaf::new(LeafArmStats { counts: vec![0, 0], means: vec![0.0, 0.0], n: 0, lambda: 1.0 }, 1.0);
        assert_eq!(empty.estimates, vec![None, None]);
    }

    #[test]
    fn honest_rows_are_disjoint_from_growth_rows() {
        let d = data(4, 300, 3, 0.0);
        for honesty in [HonestyMode::OutOfBag, HonestyMode::HalfSample] {
            let f = fit_forest(&d, &ForestParams { honesty, ..params(5) }).unwrap();
            for t in f.trees() {
                let honest = t.honest_row_set(d.n());
                assert!(honest.iter().all(|i| t.in_bag.binary_search(i).is_err()));
                assert!(!honest.is_empty());
                let counted: usize = t.honest.iter().flatten().map(|h| h.stats.n).sum();
                assert_eq!(counted, honest.len());
            }
        }
    }

    #[test]
    fn honesty_survives_in_bag_mutation() {
        let d = data(6, 300, 3, 0.0);
        let mut f = fit_forest(&d, &params(7)).unwrap();
        let original = f.clone();
        for m in 0..f.trees().len() {
            let mut y = d.outcomes().to_vec();
            for &i in &f.trees()[m].in_bag {
                y[i] = 0.0;
            }
            let mutated = d.with_outcomes(y).unwrap();
            let mut g = original.clone();
            g.refresh_honest(&mutated).unwrap();
            let q = [0.3, -0.2];
            assert_eq!(g.honest_estimate(m, &q).unwrap(), original.honest_estimate(m, &q).unwrap());
        }
        f.refresh_honest(&d).unwrap();
        assert_eq!(f, original);
    }

    #[test]
    fn missing_arms_are_skipped_in_aggregation() {
        let d = data(8, 120, 4, 0.0);
        let p = ForestParams { lambda2: 0.0, n_trees: 30, ..params(9) };
        let f = fit_forest(&d, &p).unwrap();
        let q = [0.5, 0.5];
        let agg = f.predict_arm_outcomes(&q).unwrap();
        for (k, a) in agg.iter().enumerate() {
            let vals: Vec<f64> = (0..30).filter_map(|m| f.honest_estimate(m, &q).unwrap()[k]).collect();
            match a {
                Some(v) => assert!((v - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12),
                None => assert!(vals.is_empty()),
            }
        }
    }

    #[test]
    fn estimates_within_outcome_range() {
        let d = data(10, 400, 3, 0.0);
        let f = fit_forest(&d, &params(11)).unwrap();
        let (lo, hi) = d.outcomes().iter().fold((f64::MAX, f64::MIN), |(a, b), &y| (a.min(y), b.max(y)));
        let mut r = rng::rng_from_seed(1);
        for _ in 0..50 {
            let q = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
            for v in f.predict_arm_outcomes(&q).unwrap().into_iter().flatten() {
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn learns_the_better_arm() {
        let d = data(12, 1500, 3, 0.0);
        let f = fit_forest(&d, &params(13)).unwrap();
        assert_eq!(f.assign(&[0.7, 0.0]).unwrap(), 2);
        assert_eq!(f.assign(&[-0.7, 0.0]).unwrap(), 0);
        assert!(matches!(f.assign(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn shift_equivariance_and_determinism() {
        let d = data(14, 400, 3, 0.0);
        let c = 50.0;
        let shifted = d.with_outcomes(d.outcomes().iter().map(|y| y + c).collect()).unwrap();
        let p = params(15);
        let a = fit_forest(&d, &p).unwrap();
        let b = fit_forest(&shifted, &p).unwrap();
        assert_eq!(a, fit_forest(&d, &p).unwrap());
        let mut r = rng::rng_from_seed(2);
        for _ in 0..40 {
            let q = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let (ea, eb) = (a.predict_arm_outcomes(&q).unwrap(), b.predict_arm_outcomes(&q).unwrap());
            for (x, y) in ea.iter().zip(&eb) {
                assert!((x.unwrap() + c - y.unwrap()).abs() < 1e-10);
            }
            assert_eq!(a.assign(&q).unwrap(), b.assign(&q).unwrap());
        }
    }

    #[test]
    fn model_file_round_trip_and_version_check() {
        let d = data(16, 200, 2, 0.0);
        let f = fit_forest(&d, &ForestParams { n_trees: 3, ..params(17) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ModelFile::new(f.clone(), serde_json::json!({"note": "test"})).save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back.forest, f);
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ModelFile::load(&path), Err(Error::ModelVersion { found: 99, .. })));
    }
}
