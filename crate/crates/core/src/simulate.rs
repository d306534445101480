//! Synthetic many-arm experiment and the replication harness.
//!
//! Outcomes follow
//! `mu(x, k) = 10 + 20 1{x1>0} - 20 1{x2>0} - 40 1{x1>0, x2>0}
//!             + gamma (2 1{x3>0} - 1) (2k - K - 1)/(K - 1) 1{k>0}
//!             - 10 x1^2 1{k=0}`
//! with `X ~ N(0, I_3)`, `T` uniform on `0..=K` and additive `N(0, sigma^2)`
//! noise.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{fit_pipeline, PipelineConfig};
use crate::policy::Policy;
use crate::regforest::{fit_separate_arm_forests, RegForestParams};
use crate::rng;

pub const N_COVARIATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Number of non-control arms.
    pub k: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { k: 9, gamma: 10.0, sigma: 10.0, n_train: 5000, n_test: 10_000, replications: 20, seed: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("need at least 2 non-control arms, got {}", self.k)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("gamma and sigma must be positive and finite"));
        }
        if self.n_train == 0 || self.n_test == 0 || self.replications == 0 {
            return Err(Error::invalid("sample sizes and replication count must be at least 1"));
        }
        Ok(())
    }

    pub fn n_arms(&self) -> usize {
        self.k + 1
    }
}

/// Noiseless conditional mean `mu(x, arm)`.
pub fn conditional_mean(x: &[f64], arm: usize, cfg: &SimConfig) -> f64 {
    let (p1, p2, p3) = (x[0] > 0.0, x[1] > 0.0, x[2] > 0.0);
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let mut mu = 10.0 + 20.0 * ind(p1) - 20.0 * ind(p2) - 40.0 * ind(p1 && p2);
    if arm > 0 {
        let k = cfg.k as f64;
        mu += cfg.gamma * (2.0 * ind(p3) - 1.0) * (2.0 * arm as f64 - k - 1.0) / (k - 1.0);
    } else {
        mu -= 10.0 * x[0] * x[0];
    }
    mu
}

/// Best arm under the true means: `K` when `x3 > 0`, else arm 1.
pub fn oracle_assignment(x: &[f64], cfg: &SimConfig) -> usize {
    if x[2] > 0.0 {
        cfg.k
    } else {
        1
    }
}

/// Test covariates; outcomes come from [`conditional_mean`].
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub x: Vec<f64>,
    pub cfg: SimConfig,
}

impl TestSet {
    pub fn n(&self) -> usize {
        self.x.len() / N_COVARIATES
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * N_COVARIATES..(i + 1) * N_COVARIATES]
    }

    pub fn mu(&self, i: usize, arm: usize) -> f64 {
        conditional_mean(self.row(i), arm, &self.cfg)
    }
}

fn draw_covariates(n: usize, rng: &mut rng::Rng) -> Vec<f64> {
    (0..n * N_COVARIATES).map(|_| StandardNormal.sample(rng)).collect()
}

/// One noisy outcome at `(x, arm)`.
pub fn draw_outcome(x: &[f64], arm: usize, cfg: &SimConfig, rng: &mut rng::Rng) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    conditional_mean(x, arm, cfg) + cfg.sigma * e
}

/// Training data with known uniform propensities, and a test set.
pub fn generate_dataset(cfg: &SimConfig, seed: u64) -> Result<(Dataset, TestSet)> {
    cfg.validate()?;
    let mut r = rng::stream(seed, 0);
    let x = draw_covariates(cfg.n_train, &mut r);
    let arms: Vec<usize> = (0..cfg.n_train).map(|_| r.random_range(0..cfg.n_arms())).collect();
    let y = (0..cfg.n_train).map(|i| draw_outcome(&x[i * N_COVARIATES..(i + 1) * N_COVARIATES], arms[i], cfg, &mut r)).collect();
    let p = vec![1.0 / cfg.n_arms() as f64; cfg.n_arms()];
    let train = Dataset::new(y, arms, x, N_COVARIATES, Some(p))?;
    let test = TestSet { x: draw_covariates(cfg.n_test, &mut rng::stream(seed, 1)), cfg: *cfg };
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    /// Mean of `mu(x, policy(x))` over the test points.
    pub value: f64,
    /// Share of test points assigned the oracle arm.
    pub match_rate: f64,
}

pub fn evaluate_assignments(assignments: &[usize], test: &TestSet) -> PolicyEval {
    let n = test.n() as f64;
    let value = assignments.iter().enumerate().map(|(i, &a)| test.mu(i, a)).sum::<f64>() / n;
    let hits = assignments.iter().enumerate().filter(|&(i, &a)| a == oracle_assignment(test.row(i), &test.cfg)).count();
    PolicyEval { value, match_rate: hits as f64 / n }
}

pub fn evaluate_policy(policy: &(impl Policy + ?Sized), test: &TestSet) -> Result<PolicyEval> {
    let a = policy.assign_rows(&test.x, N_COVARIATES)?;
    Ok(evaluate_assignments(&a, test))
}

/// A method compared in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Oracle,
    /// Uniformly random non-control arm per unit.
    RandomNonControl,
    Control,
    /// Single arm with the best training mean.
    GlobalBest,
    /// One regression forest per arm.
    Separate { label: String, forest: RegForestParams },
    /// Assignment-forest pipeline.
    Forest { label: String, pipeline: PipelineConfig },
}

impl MethodSpec {
    pub fn label(&self) -> &str {
        match self {
            Self::Oracle => "oracle",
            Self::RandomNonControl => "random",
            Self::Control => "control",
            Self::GlobalBest => "global_best",
            Self::Separate { label, .. } | Self::Forest { label, .. } => label,
        }
    }

    /// Analytic value for the reference policies.
    pub fn reference_value(&self, cfg: &SimConfig) -> Option<f64> {
        match self {
            Self::Oracle => Some(cfg.gamma),
            Self::RandomNonControl | Self::GlobalBest => Some(0.0),
            Self::Control => Some(-10.0),
            _ => None,
        }
    }

    pub fn references() -> Vec<MethodSpec> {
        vec![Self::Oracle, Self::RandomNonControl, Self::Control, Self::GlobalBest]
    }
}

/// Assignments of `method`, trained on `train`, for the test points.
pub fn method_assignments(method: &MethodSpec, train: &Dataset, test: &TestSet, seed: u64) -> Result<Vec<usize>> {
    let cfg = &test.cfg;
    match method {
        MethodSpec::Oracle => Ok((0..test.n()).map(|i| oracle_assignment(test.row(i), cfg)).collect()),
        MethodSpec::RandomNonControl => {
            let mut r = rng::stream(seed, 9);
            Ok((0..test.n()).map(|_| r.random_range(1..=cfg.k)).collect())
        }
        MethodSpec::Control => Ok(vec![0; test.n()]),
        MethodSpec::GlobalBest => {
            let counts = train.arm_counts();
            let mut sums = vec![0.0; train.n_arms()];
            for (y, &a) in train.outcomes().iter().zip(train.arms()) {
                sums[a] += y;
            }
            let means = sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| s / c as f64));
            let best = crate::tree::argmax_smallest(means).ok_or(Error::AllArmsMissing)?;
            Ok(vec![best; test.n()])
        }
        MethodSpec::Separate { forest, .. } => {
            let params = RegForestParams { seed: rng::derive_seed(seed, 7), ..*forest };
            let model = fit_separate_arm_forests(train, &params)?;
            model.assign_rows(&test.x, N_COVARIATES)
        }
        MethodSpec::Forest { pipeline, .. } => {
            let fitted = fit_pipeline(train, &pipeline.with_seed(rng::derive_seed(seed, 7)))?;
            fitted.assign_rows(&test.x, N_COVARIATES)
        }
    }
}

/// One tidy output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub method: String,
    pub value: f64,
    pub match_rate: f64,
}

/// Per-method summary across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub method: String,
    pub values: Vec<f64>,
    pub match_rates: Vec<f64>,
    pub reference: Option<f64>,
    pub mean: f64,
    pub mean_match_rate: f64,
    /// Minimum, lower quartile, median, upper quartile, maximum.
    pub quantiles: [f64; 5],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ReplicationRow>,
    pub reports: Vec<PolicyReport>,
}

/// Runs every method on `cfg.replications` fresh draws.
///
/// Methods within a replication share the draw and the learner seed. A
/// failing method is logged and left out of that replication.
pub fn run_experiment(cfg: &SimConfig, methods: &[MethodSpec]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let per_rep: Vec<Vec<ReplicationRow>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = rng::derive_seed(cfg.seed, r as u64);
            let (train, test) = match generate_dataset(cfg, seed) {
                Ok(v) => v,
                Err(e) => {
                    warn!(replication = r, error = %e, "replication skipped");
                    return Vec::new();
                }
            };
            methods
                .iter()
                .filter_map(|m| match method_assignments(m, &train, &test, seed) {
                    Ok(a) => {
                        let ev = evaluate_assignments(&a, &test);
                        Some(ReplicationRow { replication: r, method: m.label().to_string(), value: ev.value, match_rate: ev.match_rate })
                    }
                    Err(e) => {
                        warn!(replication = r, method = m.label(), error = %e, "method failed");
                        None
                    }
                })
                .collect()
        })
        .collect();
    let rows: Vec<ReplicationRow> = per_rep.into_iter().flatten().collect();
    let reports = methods
        .iter()
        .filter_map(|m| {
            let mine: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == m.label()).collect();
            if mine.is_empty() {
                return None;
            }
            let values: Vec<f64> = mine.iter().map(|r| r.value).collect();
            let match_rates: Vec<f64> = mine.iter().map(|r| r.match_rate).collect();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = values.len() as f64;
            Some(PolicyReport {
                method: m.label().to_string(),
                mean: values.iter().sum::<f64>() / n,
                mean_match_rate: match_rates.iter().sum::<f64>() / n,
                quantiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&sorted, q)),
                reference: m.reference_value(cfg),
                values,
                match_rates,
            })
        })
        .collect();
    Ok(ExperimentResult { rows, reports })
}

pub fn write_rows_csv(rows: &[ReplicationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
