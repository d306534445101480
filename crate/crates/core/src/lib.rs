//! Tree-based treatment assignment for many arms.
//!
//! Assignment trees split on covariates to maximize the value of assigning
//! each leaf to its best arm. Forests of such trees average honest per-arm
//! estimates. Optional steps residualize outcomes on a baseline prediction
//! and cluster similar arms before growing.

pub mod cluster;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod normal_model;
pub mod pipeline;
pub mod policy;
pub mod regforest;
pub mod residualize;
pub mod rng;
pub mod simulate;
pub mod tree;
pub mod tuning;

pub use cluster::{ArmClustering, FittedValueMatrix, KMeansSettings};
pub use dataset::{load_csv, CsvSchema, Dataset, SubsampleSpec};
pub use error::{Error, Result};
pub use forest::{fit_forest, AssignmentForest, ForestParams, HonestyMode, ModelFile};
pub use normal_model::NormalModelParams;
pub use pipeline::{fit_pipeline, ClusterSettings, FittedPipeline, PipelineConfig};
pub use policy::{policy_value_ipw, ConstantPolicy, Policy};
pub use regforest::{RegForest, RegForestParams, SeparateArmForests};
pub use residualize::{BaselineKind, BaselineSpec};
pub use simulate::{MethodSpec, SimConfig};
pub use tree::{AssignmentTree, TreeGrowParams, UtilityKind};
pub use tuning::{Learner, TuningGrid, TuningResult};
