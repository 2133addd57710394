//! Asset dynamics, trading policies, and wealth processes on the tree.
//!
//! Assets follow the arithmetic Euler step
//! `S_{k+1} = S_k + b_k dt + sigma_k dB_{k+1}` against the single Brownian
//! driver; negative prices are permitted by design. Coefficients are rules
//! of `(level, node)` so drift and diffusion may depend on the path.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, PredictableProcess, ScenarioTree};

/// Coefficient rule evaluated at `(level, node)`.
#[derive(Clone)]
pub enum Rule {
    /// Same value on every step and node.
    Constant(f64),
    /// One value per level, shared by all nodes of that level.
    PerLevel(Vec<f64>),
    /// Arbitrary adapted rule.
    Path(Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>),
}

impl Rule {
    pub fn eval(&self, level: usize, node: usize) -> f64 {
        match self {
            Rule::Constant(v) => *v,
            Rule::PerLevel(vs) => vs[level.min(vs.len() - 1)],
            Rule::Path(f) => f(level, node),
        }
    }

    /// True when the rule cannot depend on the node index, i.e. the
    /// coefficient is deterministic.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Rule::Path(_))
    }

    /// Materialize the rule as a scalar predictable process.
    pub fn to_process(&self, tree: &ScenarioTree) -> PredictableProcess {
        let levels = (0..tree.steps())
            .map(|k| (0..tree.nodes_at(k)).map(|n| self.eval(k, n)).collect())
            .collect();
        PredictableProcess::from_scalar_levels(levels)
    }
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Constant(v) => write!(f, "Constant({v})"),
            Rule::PerLevel(vs) => write!(f, "PerLevel({vs:?})"),
            Rule::Path(_) => write!(f, "Path(<fn>)"),
        }
    }
}

/// Drift, diffusion and initial price of one asset.
#[derive(Debug, Clone)]
pub struct AssetSpec {
    pub drift: Rule,
    pub diffusion: Rule,
    pub s0: f64,
}

/// A `d`-asset market driven by the single Brownian motion.
#[derive(Debug, Clone)]
pub struct AssetModel {
    assets: Vec<AssetSpec>,
}

impl AssetModel {
    pub fn new(assets: Vec<AssetSpec>) -> Result<Self> {
        if assets.is_empty() {
            return Err(Error::InvalidParameter(
                "asset model needs at least one asset".into(),
            ));
        }
        for (i, a) in assets.iter().enumerate() {
            if !a.s0.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "asset {i} has non-finite initial price"
                )));
            }
        }
        Ok(Self { assets })
    }

    /// Single asset with constant coefficients.
    pub fn single(drift: f64, diffusion: f64, s0: f64) -> Result<Self> {
        Self::new(vec![AssetSpec {
            drift: Rule::Constant(drift),
            diffusion: Rule::Constant(diffusion),
            s0,
        }])
    }

    pub fn asset_count(&self) -> usize {
        self.assets.len()
    }

    pub fn assets(&self) -> &[AssetSpec] {
        &self.assets
    }

    fn coeff(&self, i: usize, rule: fn(&AssetSpec) -> &Rule, k: usize, n: usize) -> Result<f64> {
        let v = rule(&self.assets[i]).eval(k, n);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "model coefficient",
                level: k,
                node: n,
            });
        }
        Ok(v)
    }

    pub fn drift(&self, asset: usize, level: usize, node: usize) -> Result<f64> {
        self.coeff(asset, |a| &a.drift, level, node)
    }

    pub fn diffusion(&self, asset: usize, level: usize, node: usize) -> Result<f64> {
        self.coeff(asset, |a| &a.diffusion, level, node)
    }

    /// True when every coefficient rule is deterministic (node independent).
    pub fn is_deterministic(&self) -> bool {
        self.assets
            .iter()
            .all(|a| a.drift.is_deterministic() && a.diffusion.is_deterministic())
    }
}

/// Trading policy: shares held in each asset, predictable over steps.
#[derive(Debug, Clone)]
pub struct Policy {
    shares: PredictableProcess,
}

impl Policy {
    pub fn new(shares: PredictableProcess) -> Self {
        Self { shares }
    }

    /// Constant share vector on every step.
    pub fn constant(tree: &ScenarioTree, shares: &[f64]) -> Self {
        let dim = shares.len();
        let mut p = PredictableProcess::zeros(tree, dim);
        for k in 0..tree.steps() {
            for node in 0..tree.nodes_at(k) {
                p.set(k, node, shares);
            }
        }
        Self { shares: p }
    }

    /// One share vector per level.
    pub fn per_level(tree: &ScenarioTree, levels: &[Vec<f64>]) -> Result<Self> {
        if levels.len() != tree.steps() {
            return Err(Error::LevelMismatch {
                expected: tree.steps(),
                got: levels.len(),
            });
        }
        let dim = levels[0].len();
        let mut p = PredictableProcess::zeros(tree, dim);
        for (k, row) in levels.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for node in 0..tree.nodes_at(k) {
                p.set(k, node, row);
            }
        }
        Ok(Self { shares: p })
    }

    pub fn dim(&self) -> usize {
        self.shares.dim()
    }

    pub fn shares(&self) -> &PredictableProcess {
        &self.shares
    }

    pub fn value(&self, level: usize, node: usize) -> &[f64] {
        self.shares.value(level, node)
    }
}

/// Value process of an investment: initial wealth plus the integral of the
/// policy against asset increments.
#[derive(Debug, Clone)]
pub struct WealthProcess {
    pub initial: f64,
    pub values: AdaptedProcess,
}

impl WealthProcess {
    pub fn terminal(&self) -> &[f64] {
        self.values.terminal()
    }
}

/// Simulate asset values: `S_0 = s0`, `S_{k+1} = S_k + b dt + sigma dB`.
pub fn simulate_assets(tree: &ScenarioTree, model: &AssetModel) -> Result<AdaptedProcess> {
    let d = model.asset_count();
    let mut s = AdaptedProcess::zeros(tree, d);
    let init: Vec<f64> = model.assets().iter().map(|a| a.s0).collect();
    s.set(0, 0, &init);
    for k in 0..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let cur = s.value(k, node).to_vec();
            for (child, down) in [(2 * node, false), (2 * node + 1, true)] {
                let db = tree.increment(down);
                let mut next = Vec::with_capacity(d);
                for (i, cv) in cur.iter().enumerate() {
                    let b = model.drift(i, k, node)?;
                    let sig = model.diffusion(i, k, node)?;
                    next.push(cv + b * tree.dt() + sig * db);
                }
                s.set(k + 1, child, &next);
            }
        }
    }
    Ok(s)
}

/// Wealth of `policy` with initial capital `x0`:
/// `X_{k+1} = X_k + u_k . (b_k dt + sigma_k dB_{k+1})`.
pub fn wealth(
    tree: &ScenarioTree,
    model: &AssetModel,
    policy: &Policy,
    x0: f64,
) -> Result<WealthProcess> {
    let d = model.asset_count();
    if policy.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: policy.dim(),
        });
    }
    let mut x = AdaptedProcess::zeros(tree, 1);
    x.set_scalar(0, 0, x0);
    for k in 0..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let cur = x.scalar(k, node);
            let u = policy.value(k, node);
            let mut drift_part = 0.0;
            let mut vol_part = 0.0;
            for (i, ui) in u.iter().enumerate() {
                drift_part += ui * model.drift(i, k, node)?;
                vol_part += ui * model.diffusion(i, k, node)?;
            }
            for (child, down) in [(2 * node, false), (2 * node + 1, true)] {
                let db = tree.increment(down);
                x.set_scalar(k + 1, child, cur + drift_part * tree.dt() + vol_part * db);
            }
        }
    }
    Ok(WealthProcess {
        initial: x0,
        values: x,
    })
}
