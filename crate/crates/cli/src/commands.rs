use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use armforest::dataset::load_covariates_csv;
use armforest::normal_model::{lemma_check, mc_oracle, utility_ratio_joint, utility_ratio_separate, NormalModelParams};
use armforest::simulate::{run_experiment, write_rows_csv};
use armforest::tuning::{select_params, write_score_table};
use armforest::{fit_pipeline, load_csv, policy_value_ipw, MethodSpec, ModelFile, PipelineConfig, RegForestParams};
use serde::Serialize;
use serde_json::json;
use tracing::info;

use crate::config::{self, RunConfig};
use crate::{AssignArgs, Common, ConfigError, EvaluateArgs, FitArgs, OracleArgs, SimulateArgs, TuneArgs};

pub const METHOD_NAMES: [&str; 7] = ["oracle", "random", "control", "global_best", "separate", "joint", "clustered"];

/// `rows.csv` -> `rows.config.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn provenance(command: &str, cfg: &RunConfig) -> serde_json::Value {
    json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "config": cfg })
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = config::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn require_seed(cfg: &RunConfig, command: &str) -> anyhow::Result<u64> {
    cfg.seed.ok_or_else(|| ConfigError(format!("`{command}` needs a seed (--seed or \"seed\" in the config)")).into())
}

/// Separate-forest settings mirroring the assignment forest's size.
fn separate_params(p: &PipelineConfig) -> RegForestParams {
    RegForestParams {
        n_trees: p.forest.n_trees,
        min_leaf: p.forest.tree.min_leaf,
        fraction: p.forest.beta,
        covariate_fraction: p.forest.tree.delta,
        seed: 0,
    }
}

fn method(name: &str, p: &PipelineConfig) -> anyhow::Result<MethodSpec> {
    Ok(match name {
        "oracle" => MethodSpec::Oracle,
        "random" => MethodSpec::RandomNonControl,
        "control" => MethodSpec::Control,
        "global_best" => MethodSpec::GlobalBest,
        "separate" => MethodSpec::Separate { label: name.into(), forest: separate_params(p) },
        "joint" => MethodSpec::Forest { label: name.into(), pipeline: PipelineConfig { clustering: None, ..*p } },
        "clustered" => {
            if p.clustering.is_none() {
                return Err(ConfigError("method `clustered` needs clustering settings (--clusters M)".into()).into());
            }
            MethodSpec::Forest { label: name.into(), pipeline: *p }
        }
        other => return Err(ConfigError(format!("unknown method `{other}`; expected one of {}", METHOD_NAMES.join(", "))).into()),
    })
}

pub fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    a.pipeline.apply(&mut cfg.pipeline);
    if a.reference_only {
        cfg.methods = MethodSpec::references().iter().map(|m| m.label().to_string()).collect();
    }
    if let Some(r) = a.replications {
        cfg.simulation.replications = r;
    }
    cfg.simulation.seed = require_seed(&cfg, "simulate")?;
    let methods = cfg.methods.iter().map(|m| method(m, &cfg.pipeline)).collect::<anyhow::Result<Vec<_>>>()?;
    info!(replications = cfg.simulation.replications, methods = methods.len(), "simulating");
    let result = run_experiment(&cfg.simulation, &methods)?;
    write_rows_csv(&result.rows, &a.out)?;
    let mut side = provenance("simulate", &cfg);
    side["reports"] = serde_json::to_value(&result.reports)?;
    write_json(&sidecar(&a.out), &side)
}

pub fn fit(a: FitArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    a.pipeline.apply(&mut cfg.pipeline);
    let seed = require_seed(&cfg, "fit")?;
    cfg.pipeline = cfg.pipeline.with_seed(seed);
    let data = load_csv(&a.input, &cfg.schema)?;
    info!(n = data.n(), arms = data.n_arms(), d = data.d(), "fitting");
    let fitted = fit_pipeline(&data, &cfg.pipeline)?;
    if let Some(path) = &a.dump_residuals {
        let Some(baseline) = &fitted.baseline else {
            return Err(ConfigError("--dump-residuals needs a baseline (--baseline raw|control|weighted)".into()).into());
        };
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["row", "y", "baseline", "residual"])?;
        for (i, (&y, &b)) in data.outcomes().iter().zip(baseline).enumerate() {
            w.write_record([i.to_string(), y.to_string(), b.to_string(), (y - b).to_string()])?;
        }
        w.flush()?;
    }
    let mut meta = provenance("fit", &cfg);
    meta["clustering"] = serde_json::to_value(&fitted.clustering)?;
    ModelFile::new(fitted.forest, meta).save(&a.out)?;
    Ok(())
}

pub fn assign(a: AssignArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    let model = ModelFile::load(&a.model)?;
    let forest = &model.forest;
    let (x, d) = load_covariates_csv(&a.input, &cfg.schema)?;
    if d != forest.d() {
        return Err(armforest::Error::DimensionMismatch { expected: forest.d(), got: d }.into());
    }
    let estimates = forest.predict_rows(&x)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut header = vec!["row".to_string(), "arm".to_string()];
    header.extend((0..forest.n_arms()).map(|k| format!("estimate_{k}")));
    w.write_record(&header)?;
    for (i, est) in estimates.iter().enumerate() {
        let arm = forest.assign(&x[i * d..(i + 1) * d])?;
        let mut rec = vec![i.to_string(), arm.to_string()];
        rec.extend(est.iter().map(|e| e.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&sidecar(&a.out), &json!({ "command": "assign", "config": cfg, "model_config": model.config }))
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.common)?;
    let model = ModelFile::load(&a.model)?;
    let data = load_csv(&a.input, &cfg.schema)?;
    if data.d() != model.forest.d() {
        return Err(armforest::Error::DimensionMismatch { expected: model.forest.d(), got: data.d() }.into());
    }
    if data.n_arms() > model.forest.n_arms() {
        return Err(ConfigError(format!("data has {} arms but the model knows {}", data.n_arms(), model.forest.n_arms())).into());
    }
    let value = policy_value_ipw(&data, &model.forest)?;
    let report = json!({
        "command": "evaluate",
        "config": cfg,
        "model_config": model.config,
        "n": data.n(),
        "value": value,
    });
    match &a.out {
        Some(path) => write_json(path, &report),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(())
        }
    }
}

pub fn tune(a: TuneArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    a.pipeline.apply(&mut cfg.pipeline);
    if let Some(f) = a.cv_folds {
        cfg.grid.folds = f;
    }
    cfg.grid.seed = require_seed(&cfg, "tune")?;
    let data = load_csv(&a.input, &cfg.schema)?;
    info!(configs = cfg.grid.configs(&cfg.pipeline).len(), "tuning");
    let result = select_params(&data, &cfg.pipeline, &cfg.grid)?;
    write_score_table(&result.table, &a.out)?;
    let mut side = provenance("tune", &cfg);
    side["best"] = serde_json::to_value(result.best)?;
    side["best_score"] = json!(result.best_score);
    write_json(&sidecar(&a.out), &side)
}

#[derive(Debug, Serialize)]
struct OracleRow {
    identity: String,
    closed_form: Option<f64>,
    monte_carlo: f64,
    se: f64,
    pass: Option<bool>,
}

impl OracleRow {
    fn against(identity: &str, closed: f64, mc: f64, se: f64, n_se: f64) -> Self {
        Self { identity: identity.into(), closed_form: Some(closed), monte_carlo: mc, se, pass: Some((mc - closed).abs() <= n_se * se) }
    }
}

pub fn oracle(a: OracleArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(d) = a.draws {
        cfg.oracle.draws = d;
    }
    let seed = cfg.seed.unwrap_or(0);
    let o = &cfg.oracle;
    let p = o.params;
    let s = mc_oracle(&p, o.draws, seed)?;
    let mut rows = vec![
        OracleRow::against("ratio_joint", utility_ratio_joint(&p), s.ratio_joint.mean, s.ratio_joint.se, o.n_se),
        OracleRow::against("ratio_separate", utility_ratio_separate(&p), s.ratio_separate.mean, s.ratio_separate.se, o.n_se),
        OracleRow::against("best_arm_random", 1.0 / p.n_arms() as f64, s.best_arm_random.mean, s.best_arm_random.se, o.n_se),
        OracleRow { identity: format!("best_arm_joint[k={}]", p.k), closed_form: None, monte_carlo: s.best_arm_joint.mean, se: s.best_arm_joint.se, pass: None },
    ];
    for (i, &k) in o.arm_counts.iter().enumerate() {
        let q = NormalModelParams { k, ..p };
        let sk = mc_oracle(&q, o.draws, armforest::rng::derive_seed(seed, i as u64 + 1))?;
        rows.push(OracleRow { identity: format!("best_arm_joint[k={k}]"), closed_form: None, monte_carlo: sk.best_arm_joint.mean, se: sk.best_arm_joint.se, pass: None });
        rows.push(OracleRow::against(&format!("ratio_joint[k={k}]"), utility_ratio_joint(&q), sk.ratio_joint.mean, sk.ratio_joint.se, o.n_se));
    }
    for (i, l) in o.lemma.iter().enumerate() {
        let c = lemma_check(l.x, l.y, l.z, l.dim, o.draws, armforest::rng::derive_seed(seed, 1000 + i as u64))?;
        rows.push(OracleRow {
            identity: format!("lemma[x={},y={},z={},dim={}]", l.x, l.y, l.z, l.dim),
            closed_form: Some(c.rhs.mean),
            monte_carlo: c.lhs.mean,
            se: c.diff.se,
            pass: Some(c.passes(o.n_se)),
        });
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&sidecar(&a.out), &provenance("oracle", &cfg))
}
