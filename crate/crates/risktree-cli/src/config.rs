//! Experiment configuration: a single strict JSON file.
//!
//! Unknown keys are rejected everywhere, and semantic validation (level
//! bounds, envelope parameters, policy dimensions) happens before any
//! computation so a bad config never produces partial output.

use serde::{Deserialize, Serialize};

use risktree::envelope::{KernelSet, RiskEnvelope};
use risktree::market::{AssetModel, AssetSpec, Policy, Rule};
use risktree::tree::{build_tree, ScenarioTree};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tree: TreeConfig,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub envelope: EnvelopeConfig,
    pub tasks: Vec<TaskConfig>,
    pub seed: u64,
    pub output_dir: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub steps: usize,
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub assets: Vec<AssetConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    pub drift: NumOrPerLevel,
    pub diffusion: NumOrPerLevel,
    pub s0: f64,
}

/// Constant coefficient or one value per level.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum NumOrPerLevel {
    Constant(f64),
    PerLevel(Vec<f64>),
}

impl NumOrPerLevel {
    fn to_rule(&self, steps: usize, field: &str) -> Result<Rule, CliError> {
        match self {
            NumOrPerLevel::Constant(v) => {
                if !v.is_finite() {
                    return Err(CliError::schema(format!("{field} must be finite")));
                }
                Ok(Rule::Constant(*v))
            }
            NumOrPerLevel::PerLevel(vs) => {
                if vs.len() != steps {
                    return Err(CliError::schema(format!(
                        "{field} per-level table must have exactly {steps} entries, got {}",
                        vs.len()
                    )));
                }
                if vs.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::schema(format!("{field} must be finite")));
                }
                Ok(Rule::PerLevel(vs.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_level: Option<Vec<Vec<f64>>>,
    /// Initial wealth; defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
}

/// Envelope block with an explicit `type` tag; field presence is validated
/// manually so unknown keys and missing parameters are both named.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<NumOrPerLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<NumOrPerLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskConfig {
    Measure(LevelParams),
    Deviation(LevelParams),
    Contrib(LevelParams),
    Axioms(AxiomsParams),
    Consistency(ConsistencyParams),
    BsdeMc(BsdeMcParams),
    ExampleKappa(EmptyParams),
    Stddev(StddevParams),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Measure(_) => "measure",
            TaskConfig::Deviation(_) => "deviation",
            TaskConfig::Contrib(_) => "contrib",
            TaskConfig::Axioms(_) => "axioms",
            TaskConfig::Consistency(_) => "consistency",
            TaskConfig::BsdeMc(_) => "bsde-mc",
            TaskConfig::ExampleKappa(_) => "example-kappa",
            TaskConfig::Stddev(_) => "stddev",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LevelParams {
    pub level: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AxiomsParams {
    pub trials: usize,
    pub level: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyParams {
    pub s: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeMcParams {
    pub steps: usize,
    pub paths: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyParams {}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StddevParams {
    pub weights: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Fully validated experiment: every domain object built and checked.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub tree: ScenarioTree,
    pub model: AssetModel,
    pub policy: Policy,
    pub x0: f64,
    pub envelope: RiskEnvelope,
    pub seed: u64,
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::schema(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(format!("config schema: {e}")))
}

pub fn build_experiment(
    mut config: ExperimentConfig,
    seed_override: Option<u64>,
    trials_override: Option<usize>,
) -> Result<Experiment, CliError> {
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(trials) = trials_override {
        for task in &mut config.tasks {
            if let TaskConfig::Axioms(params) = task {
                params.trials = trials;
            }
        }
    }

    let tree = build_tree(config.tree.steps, config.tree.horizon).map_err(CliError::from_core)?;
    let steps = tree.steps();

    if config.model.assets.is_empty() {
        return Err(CliError::schema("model.assets must be non-empty"));
    }
    let mut specs = Vec::with_capacity(config.model.assets.len());
    for (i, asset) in config.model.assets.iter().enumerate() {
        specs.push(AssetSpec {
            drift: asset.drift.to_rule(steps, &format!("model.assets[{i}].drift"))?,
            diffusion: asset
                .diffusion
                .to_rule(steps, &format!("model.assets[{i}].diffusion"))?,
            s0: asset.s0,
        });
    }
    let model = AssetModel::new(specs).map_err(CliError::from_core)?;
    let d = model.asset_count();

    let policy = match (&config.policy.constant, &config.policy.per_level) {
        (Some(shares), None) => {
            if shares.len() != d {
                return Err(CliError::schema(format!(
                    "policy.constant must have {d} entries (one per asset), got {}",
                    shares.len()
                )));
            }
            Policy::constant(&tree, shares)
        }
        (None, Some(levels)) => {
            if levels.len() != steps {
                return Err(CliError::schema(format!(
                    "policy.per_level must have exactly {steps} rows, got {}",
                    levels.len()
                )));
            }
            if levels.iter().any(|row| row.len() != d) {
                return Err(CliError::schema(format!(
                    "policy.per_level rows must have {d} entries (one per asset)"
                )));
            }
            Policy::per_level(&tree, levels).map_err(CliError::from_core)?
        }
        _ => {
            return Err(CliError::schema(
                "policy must set exactly one of `constant` or `per_level`",
            ))
        }
    };
    let x0 = config.policy.x0.unwrap_or(0.0);
    if !x0.is_finite() {
        return Err(CliError::schema("policy.x0 must be finite"));
    }

    let envelope = build_envelope(&config.envelope, steps)?;
    if let Err(e) = envelope.validate_hard(&tree) {
        return Err(CliError::schema(format!("envelope: {e}")));
    }

    for task in &config.tasks {
        validate_task(task, &tree)?;
    }

    Ok(Experiment {
        seed: config.seed,
        tree,
        model,
        policy,
        x0,
        envelope,
        config,
    })
}

fn build_envelope(config: &EnvelopeConfig, steps: usize) -> Result<RiskEnvelope, CliError> {
    let forbid = |cond: bool, field: &str, kind: &str| {
        if cond {
            Err(CliError::schema(format!(
                "envelope.{field} is not a parameter of type \"{kind}\""
            )))
        } else {
            Ok(())
        }
    };
    match config.kind.as_str() {
        "kappa" => {
            forbid(config.lo.is_some(), "lo", "kappa")?;
            forbid(config.hi.is_some(), "hi", "kappa")?;
            forbid(config.lambda.is_some(), "lambda", "kappa")?;
            let kappa = config
                .kappa
                .ok_or_else(|| CliError::schema("envelope.kappa is required"))?;
            if !(kappa.is_finite() && kappa >= 0.0) {
                return Err(CliError::schema(format!(
                    "envelope.kappa must be a finite nonnegative real, got {kappa}"
                )));
            }
            Ok(RiskEnvelope::kappa(kappa))
        }
        "interval" => {
            forbid(config.kappa.is_some(), "kappa", "interval")?;
            forbid(config.lambda.is_some(), "lambda", "interval")?;
            let lo = config
                .lo
                .as_ref()
                .ok_or_else(|| CliError::schema("envelope.lo is required"))?
                .to_rule(steps, "envelope.lo")?;
            let hi = config
                .hi
                .as_ref()
                .ok_or_else(|| CliError::schema("envelope.hi is required"))?
                .to_rule(steps, "envelope.hi")?;
            for level in 0..steps {
                if lo.eval(level, 0) > hi.eval(level, 0) {
                    return Err(CliError::schema(format!(
                        "envelope.lo exceeds envelope.hi at level {level}"
                    )));
                }
            }
            Ok(RiskEnvelope::KernelGenerated(KernelSet::Interval { lo, hi }))
        }
        "cvar" => {
            forbid(config.kappa.is_some(), "kappa", "cvar")?;
            forbid(config.lo.is_some(), "lo", "cvar")?;
            forbid(config.hi.is_some(), "hi", "cvar")?;
            let lambda = config
                .lambda
                .ok_or_else(|| CliError::schema("envelope.lambda is required"))?;
            if !(lambda.is_finite() && lambda > 0.0 && lambda <= 1.0) {
                return Err(CliError::schema(format!(
                    "envelope.lambda must lie in (0, 1], got {lambda}"
                )));
            }
            Ok(RiskEnvelope::CVaR(lambda))
        }
        "reference" => {
            forbid(config.kappa.is_some(), "kappa", "reference")?;
            forbid(config.lo.is_some(), "lo", "reference")?;
            forbid(config.hi.is_some(), "hi", "reference")?;
            forbid(config.lambda.is_some(), "lambda", "reference")?;
            Ok(RiskEnvelope::ReferenceOnly)
        }
        other => Err(CliError::schema(format!(
            "envelope.type must be one of kappa|interval|cvar|reference, got \"{other}\""
        ))),
    }
}

fn validate_task(task: &TaskConfig, tree: &ScenarioTree) -> Result<(), CliError> {
    let steps = tree.steps();
    let check_level = |level: usize, field: &str| {
        if level > steps {
            Err(CliError::schema(format!(
                "{field} = {level} exceeds tree depth {steps}"
            )))
        } else {
            Ok(())
        }
    };
    match task {
        TaskConfig::Measure(p) | TaskConfig::Deviation(p) | TaskConfig::Contrib(p) => {
            check_level(p.level, "task level")
        }
        TaskConfig::Axioms(p) => {
            if p.trials == 0 {
                return Err(CliError::schema("axioms.trials must be >= 1"));
            }
            check_level(p.level, "axioms.level")
        }
        TaskConfig::Consistency(p) => {
            check_level(p.t, "consistency.t")?;
            if p.s > p.t {
                return Err(CliError::schema(format!(
                    "consistency.s = {} must not exceed consistency.t = {}",
                    p.s, p.t
                )));
            }
            Ok(())
        }
        TaskConfig::BsdeMc(p) => {
            if p.steps == 0 || p.paths < 2 {
                return Err(CliError::schema(
                    "bsde-mc needs steps >= 1 and paths >= 2",
                ));
            }
            Ok(())
        }
        TaskConfig::ExampleKappa(_) => Ok(()),
        TaskConfig::Stddev(p) => {
            if p.weights.is_empty() {
                return Err(CliError::schema("stddev.weights must be non-empty"));
            }
            if p.covariance.len() != p.weights.len()
                || p.covariance.iter().any(|row| row.len() != p.weights.len())
            {
                return Err(CliError::schema(
                    "stddev.covariance must be square and match weights",
                ));
            }
            Ok(())
        }
    }
}
