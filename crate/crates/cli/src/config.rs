//! JSON run configuration and the flag overrides applied on top of it.

use std::path::Path;

use anyhow::Context;
use armforest::normal_model::NormalModelParams;
use armforest::{BaselineKind, BaselineSpec, ClusterSettings, CsvSchema, PipelineConfig, SimConfig, TuningGrid, UtilityKind};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub schema: CsvSchema,
    pub pipeline: PipelineConfig,
    pub simulation: SimConfig,
    /// Method names for `simulate`; see [`crate::commands::METHOD_NAMES`].
    pub methods: Vec<String>,
    pub grid: TuningGrid,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            schema: CsvSchema::default(),
            pipeline: PipelineConfig::default(),
            simulation: SimConfig::default(),
            methods: vec![
                "oracle".into(),
                "random".into(),
                "control".into(),
                "global_best".into(),
                "separate".into(),
                "joint".into(),
            ],
            grid: TuningGrid::default(),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub params: NormalModelParams,
    pub draws: usize,
    /// Pass threshold in standard errors.
    pub n_se: f64,
    /// Extra arm counts at which to report best-arm probabilities.
    pub arm_counts: Vec<usize>,
    pub lemma: Vec<LemmaInput>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { params: NormalModelParams::default(), draws: 1_000_000, n_se: 3.0, arm_counts: Vec::new(), lemma: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaInput {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dim: usize,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    Raw,
    Control,
    Weighted,
}

/// Flags shared by every command that trains a pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Residualize outcomes against a cross-fitted baseline first.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Number of non-control arm groups; 0 disables clustering.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Keep the control arm in its own group.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub hold_out_control: Option<bool>,
    /// Cross-fitting folds for the baseline and the clustering fitted values.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Minimum rows per child.
    #[arg(long)]
    pub nu: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Leaf utility estimator: N, P or weighted.
    #[arg(long)]
    pub utility: Option<UtilityKind>,
    #[arg(long)]
    pub normalize_gain: bool,
}

impl PipelineFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        let f = &mut cfg.forest;
        set(&mut f.n_trees, self.trees);
        set(&mut f.beta, self.beta);
        set(&mut f.lambda2, self.lambda2);
        set(&mut f.tree.lambda1, self.lambda1);
        set(&mut f.tree.min_leaf, self.nu);
        set(&mut f.tree.epsilon, self.epsilon);
        set(&mut f.tree.kappa, self.kappa);
        set(&mut f.tree.delta, self.delta);
        set(&mut f.tree.utility, self.utility);
        if self.normalize_gain {
            f.tree.normalize_gain = true;
        }
        match self.baseline {
            Some(BaselineArg::None) => cfg.baseline = None,
            Some(b) => {
                let kind = match b {
                    BaselineArg::Raw => BaselineKind::RawAverage,
                    BaselineArg::Control => BaselineKind::ControlBaseline,
                    _ => BaselineKind::WeightedAverage,
                };
                cfg.baseline.get_or_insert_with(BaselineSpec::default).kind = kind;
            }
            None => {}
        }
        match self.clusters {
            Some(0) => cfg.clustering = None,
            Some(m) => cfg.clustering.get_or_insert_with(ClusterSettings::default).groups = m,
            None => {}
        }
        if let Some(c) = &mut cfg.clustering {
            set(&mut c.hold_out_control, self.hold_out_control);
            set(&mut c.folds, self.folds);
        }
        if let Some(b) = &mut cfg.baseline {
            set(&mut b.folds, self.folds);
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
