//! Grid search scored by cross-validated held-out IPW policy value.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{fit_pipeline, ClusterSettings, PipelineConfig};
use crate::policy::{policy_value_ipw, Policy};
use crate::residualize::crossfit_residualize;
use crate::rng;
use crate::tree::UtilityKind;

/// Anything that can be trained into a policy.
pub trait Learner: Sync {
    fn fit_policy(&self, data: &Dataset, seed: u64) -> Result<Box<dyn Policy>>;
}

impl Learner for PipelineConfig {
    fn fit_policy(&self, data: &Dataset, seed: u64) -> Result<Box<dyn Policy>> {
        Ok(Box::new(fit_pipeline(data, &self.with_seed(seed))?))
    }
}

impl<F> Learner for F
where
    F: Fn(&Dataset, u64) -> Result<Box<dyn Policy>> + Sync,
{
    fn fit_policy(&self, data: &Dataset, seed: u64) -> Result<Box<dyn Policy>> {
        self(data, seed)
    }
}

/// Fold labels balanced within each arm, so every arm reaches every fold
/// whenever it has at least `folds` rows.
pub fn stratified_folds(arms: &[usize], n_arms: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut by_arm = vec![Vec::new(); n_arms];
    for (i, &a) in arms.iter().enumerate() {
        by_arm[a].push(i);
    }
    let mut r = rng::rng_from_seed(seed);
    let mut labels = vec![0; arms.len()];
    let mut offset = 0;
    for rows in &mut by_arm {
        rows.shuffle(&mut r);
        for (j, &i) in rows.iter().enumerate() {
            labels[i] = (j + offset) % folds;
        }
        offset += rows.len();
    }
    labels
}

/// Mean held-out IPW value over `folds` folds; fold `f`'s learner is seeded
/// with `derive_seed(seed, f)`.
pub fn cv_policy_value(data: &Dataset, learner: &(impl Learner + ?Sized), folds: usize, seed: u64) -> Result<f64> {
    if folds < 2 {
        return Err(Error::invalid(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    let labels = stratified_folds(data.arms(), data.n_arms(), folds, seed);
    let mut total = 0.0;
    for f in 0..folds {
        let train_rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != f).collect();
        let test_rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == f).collect();
        let train = data.subset(&train_rows);
        train.require_all_arms(&format!("training folds excluding fold {f}"))?;
        let policy = learner.fit_policy(&train, rng::derive_seed(seed, f as u64))?;
        total += policy_value_ipw(&data.subset(&test_rows), policy.as_ref())?;
    }
    Ok(total / folds as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub nu: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub kappa: Vec<f64>,
    pub utility: Vec<UtilityKind>,
    /// Candidate cluster counts; empty keeps the base configuration's
    /// clustering choice.
    pub clusters: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            lambda1: vec![0.0, 0.5, 1.0],
            lambda2: vec![0.0, 0.5, 1.0],
            nu: vec![3, 5],
            epsilon: vec![0.5, 1.0, 2.0],
            kappa: vec![0.5, 0.8, 1.0],
            utility: vec![UtilityKind::N],
            clusters: Vec::new(),
            folds: 2,
            seed: 0,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1.is_empty() || self.lambda2.is_empty() || self.nu.is_empty() || self.epsilon.is_empty() || self.kappa.is_empty() || self.utility.is_empty() {
            return Err(Error::invalid("every grid dimension needs at least one candidate"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("cross-validation needs at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }

    /// All configurations, ordered by ascending `lambda1`, then `lambda2`,
    /// `nu`, `epsilon`, `kappa`, utility and cluster count.
    pub fn configs(&self, base: &PipelineConfig) -> Vec<PipelineConfig> {
        fn sorted<T: Clone>(v: &[T], key: impl Fn(&T, &T) -> std::cmp::Ordering) -> Vec<T> {
            let mut v = v.to_vec();
            v.sort_by(key);
            v
        }
        let l1 = sorted(&self.lambda1, f64::total_cmp);
        let l2 = sorted(&self.lambda2, f64::total_cmp);
        let nu = sorted(&self.nu, Ord::cmp);
        let eps = sorted(&self.epsilon, f64::total_cmp);
        let kap = sorted(&self.kappa, f64::total_cmp);
        let clusters: Vec<Option<usize>> = if self.clusters.is_empty() { vec![None] } else { sorted(&self.clusters, Ord::cmp).into_iter().map(Some).collect() };
        let mut out = Vec::new();
        for &a in &l1 {
            for &b in &l2 {
                for &n in &nu {
                    for &e in &eps {
                        for &k in &kap {
                            for &u in &self.utility {
                                for &m in &clusters {
                                    let mut c = *base;
                                    c.forest.tree.lambda1 = a;
                                    c.forest.lambda2 = b;
                                    c.forest.tree.min_leaf = n;
                                    c.forest.tree.epsilon = e;
                                    c.forest.tree.kappa = k;
                                    c.forest.tree.utility = u;
                                    if let Some(m) = m {
                                        c.clustering = Some(ClusterSettings { groups: m, ..base.clustering.unwrap_or_default() });
                                    }
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

struct Fold {
    /// Training rows, already residualized when the base config asks for it.
    train: Dataset,
    test: Dataset,
}

/// Splits once and residualizes each training part once; the baseline does
/// not vary over the grid, so every configuration can share it.
fn prepare_folds(data: &Dataset, base: &PipelineConfig, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let labels = stratified_folds(data.arms(), data.n_arms(), folds, seed);
    (0..folds)
        .map(|f| {
            let train_rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != f).collect();
            let test_rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == f).collect();
            let mut train = data.subset(&train_rows);
            train.require_all_arms(&format!("training folds excluding fold {f}"))?;
            if let Some(spec) = base.with_seed(rng::derive_seed(seed, f as u64)).baseline {
                train = crossfit_residualize(&train, &spec)?.0;
            }
            Ok(Fold { train, test: data.subset(&test_rows) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub nu: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub utility: String,
    pub clusters: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: PipelineConfig,
    pub best_score: f64,
    pub table: Vec<ScoreRow>,
}

/// Scores every grid configuration and returns the first best one.
///
/// All configurations share the fold split and per-fold seeds.
pub fn select_params(data: &Dataset, base: &PipelineConfig, grid: &TuningGrid) -> Result<TuningResult> {
    grid.validate()?;
    let configs = grid.configs(base);
    let folds = prepare_folds(data, base, grid.folds, grid.seed)?;
    let scores = configs
        .par_iter()
        .map(|c| {
            let mut total = 0.0;
            for (f, fold) in folds.iter().enumerate() {
                let seed = rng::derive_seed(grid.seed, f as u64);
                let cfg = PipelineConfig { baseline: None, ..c.with_seed(seed) };
                let fitted = fit_pipeline(&fold.train, &cfg)?;
                total += policy_value_ipw(&fold.test, &fitted)?;
            }
            Ok(total / folds.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let table = configs
        .iter()
        .zip(&scores)
        .map(|(c, &score)| ScoreRow {
            lambda1: c.forest.tree.lambda1,
            lambda2: c.forest.lambda2,
            nu: c.forest.tree.min_leaf,
            epsilon: c.forest.tree.epsilon,
            kappa: c.forest.tree.kappa,
            utility: c.forest.tree.utility.to_string(),
            clusters: c.clustering.map(|s| s.groups),
            score,
        })
        .collect();
    Ok(TuningResult { best: configs[best], best_score: scores[best], table })
}

pub fn write_score_table(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ForestParams;
    use crate::policy::ConstantPolicy;
    use crate::simulate::{generate_dataset, SimConfig};
    use crate::tree::TreeGrowParams;

    fn base() -> PipelineConfig {
        PipelineConfig { forest: ForestParams { n_trees: 10, tree: TreeGrowParams::default(), ..Default::default() }, ..Default::default() }
    }

    fn sim_data(n: usize, seed: u64) -> Dataset {
        generate_dataset(&SimConfig { k: 3, gamma: 10.0, sigma: 5.0, n_train: n, n_test: 1, ..Default::default() }, seed).unwrap().0
    }

    #[test]
    fn folds_cover_every_arm() {
        let d = sim_data(200, 1);
        let labels = stratified_folds(d.arms(), d.n_arms(), 2, 3);
        for f in 0..2 {
            for a in 0..d.n_arms() {
                assert!((0..d.n()).any(|i| labels[i] == f && d.arms()[i] == a));
            }
        }
    }

    #[test]
    fn always_control_matches_direct_sum() {
        let d = sim_data(300, 2);
        let control = |_: &Dataset, _: u64| -> Result<Box<dyn Policy>> { Ok(Box::new(ConstantPolicy(0))) };
        let got = cv_policy_value(&d, &control, 2, 5).unwrap();
        let labels = stratified_folds(d.arms(), d.n_arms(), 2, 5);
        let mut want = 0.0;
        for f in 0..2 {
            let rows: Vec<usize> = (0..d.n()).filter(|&i| labels[i] == f).collect();
            let s: f64 = rows.iter().filter(|&&i| d.arms()[i] == 0).map(|&i| d.outcomes()[i] / d.arm_propensities()[0]).sum();
            want += s / rows.len() as f64;
        }
        assert!((got - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcomes_score_the_constant_everywhere() {
        let d0 = sim_data(200, 3);
        let d = Dataset::new(vec![2.0; 200], d0.arms().to_vec(), d0.covariates().to_vec(), 3, Some(d0.arm_propensities().to_vec())).unwrap();
        let grid = TuningGrid { lambda1: vec![0.0, 1.0], lambda2: vec![0.5], nu: vec![5], epsilon: vec![0.0], kappa: vec![1.0], ..Default::default() };
        let res = select_params(&d, &base(), &grid).unwrap();
        // All units go to arm 0, whose IPW value is 2 * (share of arm 0 rows) / p0.
        let first = res.table[0].score;
        assert!(res.table.iter().all(|r| r.score == first));
        assert_eq!(res.best.forest.tree.lambda1, 0.0);
    }

    #[test]
    fn grid_order_and_ties() {
        let grid = TuningGrid { lambda1: vec![1.0, 0.0], lambda2: vec![0.5, 0.0], nu: vec![5], epsilon: vec![1.0], kappa: vec![1.0], ..Default::default() };
        let cs = grid.configs(&base());
        let pairs: Vec<(f64, f64)> = cs.iter().map(|c| (c.forest.tree.lambda1, c.forest.lambda2)).collect();
        assert_eq!(pairs, vec![(0.0, 0.0), (0.0, 0.5), (1.0, 0.0), (1.0, 0.5)]);
        let d = sim_data(200, 4);
        let single = TuningGrid { lambda1: vec![0.5], lambda2: vec![0.5], nu: vec![5], epsilon: vec![1.0], kappa: vec![1.0], ..Default::default() };
        assert_eq!(select_params(&d, &base(), &single).unwrap().table.len(), 1);
        let twin = TuningGrid { lambda1: vec![0.5, 0.5], ..single };
        let r = select_params(&d, &base(), &twin).unwrap();
        assert_eq!(r.table[0].score, r.table[1].score);
        assert_eq!(r.best, twin.configs(&base())[0]);
        assert!(matches!(select_params(&d, &base(), &TuningGrid { nu: vec![], ..twin }), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn shared_residuals_match_per_config_scoring() {
        let d = sim_data(400, 6);
        let b = PipelineConfig { baseline: Some(crate::residualize::BaselineSpec { folds: 2, ..Default::default() }), ..base() };
        let grid = TuningGrid { lambda1: vec![0.0, 1.0], lambda2: vec![0.5], nu: vec![5], epsilon: vec![0.5], kappa: vec![0.8], seed: 8, ..Default::default() };
        let r = select_params(&d, &b, &grid).unwrap();
        for (row, cfg) in r.table.iter().zip(grid.configs(&b)) {
            assert_eq!(row.score, cv_policy_value(&d, &cfg, 2, 8).unwrap());
        }
    }

    #[test]
    fn single_leaf_trees_score_below_the_grid_best() {
        let d = sim_data(1500, 5);
        let grid = TuningGrid { lambda1: vec![0.5], lambda2: vec![0.5], nu: vec![5, 1500], epsilon: vec![0.5], kappa: vec![1.0], seed: 2, ..Default::default() };
        let r = select_params(&d, &PipelineConfig { forest: ForestParams { n_trees: 30, ..base().forest }, ..base() }, &grid).unwrap();
        assert_eq!(r.best.forest.tree.min_leaf, 5);
        assert!(r.table[1].score < r.best_score);
        assert_eq!(r, select_params(&d, &PipelineConfig { forest: ForestParams { n_trees: 30, ..base().forest }, ..base() }, &grid).unwrap());
    }
}
