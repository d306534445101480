//! Residualize, optionally cluster arms, then fit the assignment forest.

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_arms, fit_clustered_forest, fold_fitted_values, ArmClustering, KMeansSettings};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::forest::{fit_forest, AssignmentForest, ForestParams};
use crate::policy::Policy;
use crate::residualize::{crossfit_residualize, BaselineSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    /// Number of non-control groups `M`.
    pub groups: usize,
    pub hold_out_control: bool,
    pub folds: usize,
    pub kmeans: KMeansSettings,
    /// Seed for the fitted-value folds.
    pub seed: u64,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self { groups: 1, hold_out_control: true, folds: 5, kmeans: KMeansSettings::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub forest: ForestParams,
    pub baseline: Option<BaselineSpec>,
    pub clustering: Option<ClusterSettings>,
}

impl PipelineConfig {
    /// Sets every seed in the configuration from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.forest.tree.seed = seed;
        if let Some(b) = &mut self.baseline {
            b.seed = crate::rng::derive_seed(seed, 101);
        }
        if let Some(c) = &mut self.clustering {
            c.seed = crate::rng::derive_seed(seed, 202);
            c.kmeans.seed = crate::rng::derive_seed(seed, 303);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub forest: AssignmentForest,
    pub clustering: Option<ArmClustering>,
    /// Cross-fitted baseline per training row, when residualized.
    pub baseline: Option<Vec<f64>>,
}

impl Policy for FittedPipeline {
    fn assign(&self, x: &[f64]) -> Result<usize> {
        self.forest.assign(x)
    }
}

/// Runs the full training pipeline on `data`.
///
/// Residuals are computed once up front; the fitted-value folds used for
/// clustering and the final forest both work on them.
pub fn fit_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<FittedPipeline> {
    cfg.forest.validate()?;
    let (train, baseline) = match &cfg.baseline {
        Some(spec) => {
            let (r, b) = crossfit_residualize(data, spec)?;
            (r, Some(b))
        }
        None => (data.clone(), None),
    };
    let (forest, clustering) = match &cfg.clustering {
        Some(c) => {
            let fv = fold_fitted_values(&train, &cfg.forest, c.folds, c.seed)?;
            let arms = cluster_arms(&fv, c.groups, c.hold_out_control, &c.kmeans)?;
            (fit_clustered_forest(&train, &arms, &cfg.forest)?, Some(arms))
        }
        None => (fit_forest(&train, &cfg.forest)?, None),
    };
    Ok(FittedPipeline { forest, clustering, baseline })
}
