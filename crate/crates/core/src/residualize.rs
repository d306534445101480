//! Cross-fitted baseline subtraction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::policy::{ipw_value_of_assignments, Policy};
use crate::regforest::{fit_regression_forest, RegForestParams};
use crate::rng;

/// Which regression defines the baseline `f(X)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Regress Y on X ignoring the arm.
    RawAverage,
    /// Regress Y on X among control rows only.
    ControlBaseline,
    /// Regress Y on X with row weights `1 / p_i^2`.
    WeightedAverage,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_average" => Ok(Self::RawAverage),
            "control" | "control_baseline" => Ok(Self::ControlBaseline),
            "weighted" | "weighted_average" => Ok(Self::WeightedAverage),
            other => Err(Error::invalid(format!("unknown baseline kind `{other}`"))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RawAverage => "raw",
            Self::ControlBaseline => "control",
            Self::WeightedAverage => "weighted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub folds: usize,
    pub forest: RegForestParams,
    pub seed: u64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { kind: BaselineKind::WeightedAverage, folds: 5, forest: RegForestParams::default(), seed: 0 }
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid(format!("cross-fitting needs at least 2 folds, got {}", self.folds)));
        }
        self.forest.validate()
    }
}

/// Random, outcome-independent fold labels of near-equal size.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % folds).collect();
    labels.shuffle(&mut rng::rng_from_seed(seed));
    labels
}

/// Per-row training weight for the baseline regression; zero excludes a row.
fn row_weights(data: &Dataset, kind: BaselineKind) -> Result<Vec<f64>> {
    (0..data.n())
        .map(|i| match kind {
            BaselineKind::RawAverage => Ok(1.0),
            BaselineKind::ControlBaseline => Ok(if data.arms()[i] == 0 { 1.0 } else { 0.0 }),
            BaselineKind::WeightedAverage => {
                let p = data.propensity(i);
                if p.is_nan() || p <= 0.0 {
                    return Err(Error::ZeroPropensity { arm: data.arms()[i] });
                }
                Ok(1.0 / (p * p))
            }
        })
        .collect()
}

/// Cross-fitted baselines `f_{-i}(X_i)` and the residualized dataset.
///
/// Each fold's baseline is fit on the other folds only. The returned
/// dataset keeps the original outcomes as its raw outcomes.
pub fn crossfit_residualize(data: &Dataset, spec: &BaselineSpec) -> Result<(Dataset, Vec<f64>)> {
    spec.validate()?;
    let weights = row_weights(data, spec.kind)?;
    let folds = fold_labels(data.n(), spec.folds, spec.seed);
    let d = data.d();

    let per_fold = (0..spec.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != f && weights[i] > 0.0).collect();
            if train.is_empty() {
                return Err(match spec.kind {
                    BaselineKind::ControlBaseline => Error::ArmAbsent { arm: 0, context: format!("baseline training folds excluding fold {f}") },
                    _ => Error::Empty(format!("baseline training folds excluding fold {f}")),
                });
            }
            let x: Vec<f64> = train.iter().flat_map(|&i| data.row(i).iter().copied()).collect();
            let y: Vec<f64> = train.iter().map(|&i| data.outcomes()[i]).collect();
            let w: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
            let params = RegForestParams {
                seed: rng::derive_seed(spec.seed, f as u64 + 1),
                min_leaf: spec.forest.min_leaf.min(train.len()),
                ..spec.forest
            };
            let model = fit_regression_forest(&x, d, &y, &w, &params)?;
            let rows: Vec<usize> = (0..data.n()).filter(|&i| folds[i] == f).collect();
            rows.into_iter().map(|i| Ok((i, model.predict(data.row(i))?))).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut baseline = vec![0.0; data.n()];
    for (i, v) in per_fold.into_iter().flatten() {
        baseline[i] = v;
    }
    let residuals = data.outcomes().iter().zip(&baseline).map(|(y, b)| y - b).collect();
    Ok((data.with_outcomes(residuals)?, baseline))
}

/// `(1/n) sum_i 1{a(X_i) = T_i} f_i / p_i`: the baseline's mean as seen by
/// the matched-rows estimator under `assignments`.
pub fn ipw_baseline_mean(data: &Dataset, assignments: &[usize], baseline: &[f64]) -> Result<f64> {
    let as_outcomes = data.with_outcomes(baseline.to_vec())?;
    ipw_value_of_assignments(&as_outcomes, assignments)
}

/// Matched-rows value of `policy` on raw outcomes, and on residualized
/// outcomes plus the IPW-weighted baseline mean. The two agree up to
/// rounding.
pub fn shift_identity_check(policy: &(impl Policy + ?Sized), data: &Dataset, baseline: &[f64]) -> Result<(f64, f64)> {
    if baseline.len() != data.n() {
        return Err(Error::invalid("one baseline value per row required"));
    }
    let raw = data.with_outcomes(data.raw_outcomes().to_vec())?;
    let resid = raw.with_outcomes(raw.outcomes().iter().zip(baseline).map(|(y, b)| y - b).collect())?;
    let a = policy.assign_rows(data.covariates(), data.d())?;
    let raw_value = ipw_value_of_assignments(&raw, &a)?;
    let shifted = ipw_value_of_assignments(&resid, &a)? + ipw_baseline_mean(data, &a, baseline)?;
    Ok((raw_value, shifted))
}
