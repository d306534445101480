//! Weighted regression forest.
//!
//! Used for cross-fitted baseline prediction and for the separate-arm
//! comparison learner. Splits maximize the weighted sum-of-squares
//! reduction; leaves hold weighted means of their training outcomes.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ceil_fraction, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tree::argmax_smallest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub fraction: f64,
    /// Fraction of covariates considered at each split.
    pub covariate_fraction: f64,
    pub seed: u64,
}

impl Default for RegForestParams {
    fn default() -> Self {
        Self { n_trees: 100, min_leaf: 5, fraction: 0.5, covariate_fraction: 1.0, seed: 0 }
    }
}

impl RegForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("regression forest needs at least one tree"));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid("minimum leaf size must be at least 1"));
        }
        for (name, f) in [("fraction", self.fraction), ("covariate_fraction", self.covariate_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("{name} = {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum RegNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTree {
    nodes: Vec<RegNode>,
}

impl RegTree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                RegNode::Leaf { value } => return value,
                RegNode::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, RegNode::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegForest {
    d: usize,
    trees: Vec<RegTree>,
}

struct Grower<'a> {
    x: &'a [f64],
    d: usize,
    y: &'a [f64],
    w: &'a [f64],
    min_leaf: usize,
    n_features: usize,
}

impl Grower<'_> {
    fn grow(&self, rows: &mut [usize], fallback: f64, rng: &mut rng::Rng, nodes: &mut Vec<RegNode>) -> usize {
        let (sw, swy) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.w[i], b + self.w[i] * self.y[i]));
        let value = if sw > 0.0 { swy / sw } else { fallback };
        let id = nodes.len();
        nodes.push(RegNode::Leaf { value });
        if rows.len() < 2 * self.min_leaf || sw <= 0.0 {
            return id;
        }
        let first = self.y[rows[0]];
        if rows.iter().all(|&i| self.y[i] == first) {
            return id;
        }
        let sswy: f64 = rows.iter().map(|&i| self.w[i] * self.y[i] * self.y[i]).sum();
        let parent_score = swy * swy / sw;
        let total_ss = (sswy - parent_score).max(0.0);

        let mut features: Vec<usize> = index::sample(rng, self.d, self.n_features).into_vec();
        features.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        for &j in &features {
            rows.sort_unstable_by(|&a, &b| self.xv(a, j).total_cmp(&self.xv(b, j)).then(a.cmp(&b)));
            let (mut wl, mut wyl) = (0.0, 0.0);
            for pos in 0..rows.len() - 1 {
                let i = rows[pos];
                wl += self.w[i];
                wyl += self.w[i] * self.y[i];
                let (lo, hi) = (self.xv(i, j), self.xv(rows[pos + 1], j));
                let n_left = pos + 1;
                if lo == hi || n_left < self.min_leaf || rows.len() - n_left < self.min_leaf {
                    continue;
                }
                let (wr, wyr) = (sw - wl, swy - wyl);
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                let gain = wyl * wyl / wl + wyr * wyr / wr - parent_score;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = 0.5 * (lo + hi);
                    best = Some((gain, j, if mid < hi { mid } else { lo }));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else { return id };
        if gain <= 1e-12 * total_ss || total_ss <= 0.0 {
            return id;
        }
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.xv(i, feature) <= threshold);
        left.sort_unstable();
        right.sort_unstable();
        let l = self.grow(&mut left, value, rng, nodes);
        let r = self.grow(&mut right, value, rng, nodes);
        nodes[id] = RegNode::Split { feature, threshold, left: l, right: r };
        id
    }

    #[inline]
    fn xv(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.d + j]
    }
}

/// Fits a weighted regression forest on row-major covariates `x` (`d`
/// columns), outcomes `y` and nonnegative weights `w`.
pub fn fit_regression_forest(
    x: &[f64],
    d: usize,
    y: &[f64],
    w: &[f64],
    params: &RegForestParams,
) -> Result<RegForest> {
    params.validate()?;
    let n = y.len();
    if w.len() != n || x.len() != n * d {
        return Err(Error::invalid("covariate, outcome and weight lengths disagree"));
    }
    if d == 0 {
        return Err(Error::invalid("no covariates"));
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("weights must be nonnegative and finite"));
    }
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    if n < params.min_leaf {
        return Err(Error::TooFewRows { have: n, need: params.min_leaf });
    }
    let global = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let grower = Grower {
        x,
        d,
        y,
        w,
        min_leaf: params.min_leaf,
        n_features: ceil_fraction(params.covariate_fraction, d).clamp(1, d),
    };
    let take = ceil_fraction(params.fraction, n).max(params.min_leaf).min(n);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(params.seed, t as u64);
            let mut rows = index::sample(&mut rng, n, take).into_vec();
            rows.sort_unstable();
            let mut nodes = Vec::new();
            grower.grow(&mut rows, global, &mut rng, &mut nodes);
            RegTree { nodes }
        })
        .collect();
    Ok(RegForest { d, trees })
}

impl RegForest {
    /// Average of the per-tree leaf values at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Predictions for row-major covariates.
    pub fn predict_rows(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.d == 0 || !x.len().is_multiple_of(self.d) {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        x.par_chunks(self.d).map(|row| self.predict(row)).collect()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn trees(&self) -> &[RegTree] {
        &self.trees
    }
}

/// One regression forest per arm, each trained only on that arm's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparateArmForests {
    forests: Vec<RegForest>,
}

pub fn fit_separate_arm_forests(data: &Dataset, params: &RegForestParams) -> Result<SeparateArmForests> {
    params.validate()?;
    let by_arm = data.rows_by_arm();
    for (arm, rows) in by_arm.iter().enumerate() {
        if rows.len() < params.min_leaf {
            return Err(Error::ArmAbsent { arm, context: format!("separate forests (needs {} rows)", params.min_leaf) });
        }
    }
    let forests = by_arm
        .iter()
        .enumerate()
        .map(|(arm, rows)| {
            let sub = data.subset(rows);
            let p = RegForestParams { seed: rng::derive_seed(params.seed, arm as u64), ..*params };
            fit_regression_forest(sub.covariates(), sub.d(), sub.outcomes(), &vec![1.0; rows.len()], &p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparateArmForests { forests })
}

impl SeparateArmForests {
    pub fn predict_arms(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forests.iter().map(|f| f.predict(x)).collect()
    }

    /// `argmax_k f_k(x)`, ties to the smallest arm.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        let preds = self.predict_arms(x)?;
        Ok(argmax_smallest(preds.iter().map(|&v| Some(v))).expect("at least one arm"))
    }

    pub fn n_arms(&self) -> usize {
        self.forests.len()
    }
}

impl crate::policy::Policy for SeparateArmForests {
    fn assign(&self, x: &[f64]) -> Result<usize> {
        SeparateArmForests::assign(self, x)
    }
}
