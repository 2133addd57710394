//! Exact finite model of the Brownian filtration.
//!
//! A [`ScenarioTree`] is a non-recombining binary tree with `N` steps over a
//! horizon `T`: level `k` has `2^k` nodes, each carrying conditional branch
//! probability 1/2, and the Brownian increment on every step is `±sqrt(dt)`
//! with `dt = T/N`. Paths are indexed so that node `n` at level `k` has the
//! "up" child `2n` and the "down" child `2n + 1`; consequently the node an
//! individual leaf passes through at level `k` is `leaf >> (N - k)`.
//!
//! On this tree, conditional expectation, martingale representation, the
//! stochastic integral and the Doléans exponential are all exact, which is
//! what makes every identity in the higher modules testable at 1e-9..1e-12
//! tolerances instead of Monte Carlo ones.

use crate::error::{Error, Result};

/// Hard cap on tree depth; 2^26 leaves is the largest node count we are
/// willing to hold in memory for a single payoff.
pub const MAX_STEPS: usize = 26;

/// Binary scenario tree standing in for the filtered space (Omega, F, P).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    steps: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
}

impl ScenarioTree {
    /// Build a tree with `steps >= 1` steps over `horizon > 0` time units.
    ///
    /// Rejects `steps > MAX_STEPS` with a capacity error.
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        if steps > MAX_STEPS {
            return Err(Error::Capacity {
                what: "tree steps",
                requested: steps as u64,
                limit: MAX_STEPS as u64,
            });
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be a positive finite real, got {horizon}"
            )));
        }
        let dt = horizon / steps as f64;
        Ok(Self {
            steps,
            horizon,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Number of nodes at `level` (level 0 is the root).
    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.steps
    }

    /// Probability of any single node at `level`.
    pub fn node_probability(&self, level: usize) -> f64 {
        1.0 / self.nodes_at(level) as f64
    }

    /// Node at `level` on the path through `leaf`.
    pub fn ancestor_of_leaf(&self, leaf: usize, level: usize) -> usize {
        leaf >> (self.steps - level)
    }

    /// Brownian increment applied on the step from `(level, node)` to the
    /// child selected by `down` (false = up child `2n`, true = down child).
    pub fn increment(&self, down: bool) -> f64 {
        if down {
            -self.sqrt_dt
        } else {
            self.sqrt_dt
        }
    }

    fn check_level(&self, level: usize, max: usize) -> Result<()> {
        if level > max {
            return Err(Error::LevelOutOfRange { level, max });
        }
        Ok(())
    }

    /// Equal-weight average over the two children, iterated from
    /// `level_from` down to `level_to`. Reduction order is fixed (up, down)
    /// for bit reproducibility.
    pub fn condense(&self, level_from: usize, values: &[f64], level_to: usize) -> Result<Vec<f64>> {
        self.check_level(level_from, self.steps)?;
        if level_to > level_from {
            return Err(Error::LevelMismatch {
                expected: level_from,
                got: level_to,
            });
        }
        if values.len() != self.nodes_at(level_from) {
            return Err(Error::LengthMismatch {
                level: level_from,
                expected: self.nodes_at(level_from),
                got: values.len(),
            });
        }
        let mut cur = values.to_vec();
        for _ in level_to..level_from {
            let half = cur.len() / 2;
            let mut next = Vec::with_capacity(half);
            for n in 0..half {
                next.push(0.5 * (cur[2 * n] + cur[2 * n + 1]));
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Replicate node values at `level_from` onto the nodes of the finer
    /// `level_to >= level_from` (lift of an F_t-measurable quantity).
    pub fn lift(&self, level_from: usize, values: &[f64], level_to: usize) -> Result<Vec<f64>> {
        self.check_level(level_to, self.steps)?;
        if level_from > level_to {
            return Err(Error::LevelMismatch {
                expected: level_from,
                got: level_to,
            });
        }
        if values.len() != self.nodes_at(level_from) {
            return Err(Error::LengthMismatch {
                level: level_from,
                expected: self.nodes_at(level_from),
                got: values.len(),
            });
        }
        let reps = 1usize << (level_to - level_from);
        let mut out = Vec::with_capacity(values.len() * reps);
        for &v in values {
            out.extend(std::iter::repeat_n(v, reps));
        }
        Ok(out)
    }

    /// Expectation of node values at `level` under the node probabilities.
    pub fn expectation(&self, level: usize, values: &[f64]) -> Result<f64> {
        Ok(self.condense(level, values, 0)?[0])
    }
}

/// F-adapted process: one value vector per node at every level `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        let levels = (0..=tree.steps())
            .map(|k| vec![0.0; tree.nodes_at(k) * dim])
            .collect();
        Self { dim, levels }
    }

    /// Wrap scalar per-level values; `levels[k]` must hold `2^k` entries.
    pub fn from_scalar_levels(levels: Vec<Vec<f64>>) -> Self {
        Self { dim: 1, levels }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored levels (`steps + 1`).
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn last_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn values_at(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn value(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.dim..(node + 1) * self.dim]
    }

    pub fn scalar(&self, level: usize, node: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.levels[level][node]
    }

    pub fn set(&mut self, level: usize, node: usize, value: &[f64]) {
        debug_assert_eq!(value.len(), self.dim);
        self.levels[level][node * self.dim..(node + 1) * self.dim].copy_from_slice(value);
    }

    pub fn set_scalar(&mut self, level: usize, node: usize, value: f64) {
        debug_assert_eq!(self.dim, 1);
        self.levels[level][node] = value;
    }

    /// Terminal values (level `N`); only meaningful for scalar processes.
    pub fn terminal(&self) -> &[f64] {
        self.levels.last().expect("adapted process has level 0")
    }
}

/// Predictable process: the value stored at `(k, node)` is held on the step
/// from level `k` to `k + 1`; levels run over `0..N` only.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableProcess {
    dim: usize,
    levels: Vec<Vec<f64>>,
}

impl PredictableProcess {
    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        let levels = (0..tree.steps())
            .map(|k| vec![0.0; tree.nodes_at(k) * dim])
            .collect();
        Self { dim, levels }
    }

    pub fn from_scalar_levels(levels: Vec<Vec<f64>>) -> Self {
        Self { dim: 1, levels }
    }

    /// Constant scalar on every step.
    pub fn constant(tree: &ScenarioTree, value: f64) -> Self {
        let levels = (0..tree.steps())
            .map(|k| vec![value; tree.nodes_at(k)])
            .collect();
        Self { dim: 1, levels }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of steps covered.
    pub fn step_count(&self) -> usize {
        self.levels.len()
    }

    pub fn values_at(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn value(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.dim..(node + 1) * self.dim]
    }

    pub fn scalar(&self, level: usize, node: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.levels[level][node]
    }

    pub fn set(&mut self, level: usize, node: usize, value: &[f64]) {
        debug_assert_eq!(value.len(), self.dim);
        self.levels[level][node * self.dim..(node + 1) * self.dim].copy_from_slice(value);
    }

    pub fn set_scalar(&mut self, level: usize, node: usize, value: f64) {
        debug_assert_eq!(self.dim, 1);
        self.levels[level][node] = value;
    }
}

/// Financial position at the terminal time: one real per leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPayoff {
    values: Vec<f64>,
}

impl TerminalPayoff {
    /// Wrap leaf values, rejecting non-finite entries.
    pub fn new(tree: &ScenarioTree, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.leaf_count() {
            return Err(Error::LengthMismatch {
                level: tree.steps(),
                expected: tree.leaf_count(),
                got: values.len(),
            });
        }
        for (leaf, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "terminal payoff",
                    level: tree.steps(),
                    node: leaf,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn constant(tree: &ScenarioTree, value: f64) -> Result<Self> {
        Self::new(tree, vec![value; tree.leaf_count()])
    }

    /// Terminal slice of an adapted scalar process.
    pub fn from_adapted(tree: &ScenarioTree, process: &AdaptedProcess) -> Result<Self> {
        Self::new(tree, process.terminal().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.values.iter().map(|&v| f(v)).collect()
    }
}

/// Build a scenario tree; thin wrapper kept for symmetry with the other
/// free-function operations.
pub fn build_tree(steps: usize, horizon: f64) -> Result<ScenarioTree> {
    ScenarioTree::new(steps, horizon)
}

/// The driving Brownian motion: `B_0 = 0`, children differ from the parent
/// by exactly `±sqrt(dt)`.
pub fn brownian(tree: &ScenarioTree) -> AdaptedProcess {
    let mut levels = Vec::with_capacity(tree.steps() + 1);
    levels.push(vec![0.0]);
    for k in 0..tree.steps() {
        let prev = &levels[k];
        let mut next = Vec::with_capacity(prev.len() * 2);
        for &b in prev {
            next.push(b + tree.sqrt_dt());
            next.push(b - tree.sqrt_dt());
        }
        levels.push(next);
    }
    AdaptedProcess::from_scalar_levels(levels)
}

/// Conditional expectation `E[X | F_t]` of scalar node values given at
/// `level_of_values >= t`; the tower property holds exactly.
pub fn cond_expectation(
    tree: &ScenarioTree,
    values: &[f64],
    level_of_values: usize,
    t: usize,
) -> Result<Vec<f64>> {
    tree.condense(level_of_values, values, t)
}

/// Conditional expectation of a terminal payoff at level `t`.
pub fn cond_expectation_terminal(
    tree: &ScenarioTree,
    payoff: &TerminalPayoff,
    t: usize,
) -> Result<Vec<f64>> {
    tree.condense(tree.steps(), payoff.values(), t)
}

/// Martingale representation of `X`: returns the martingale `M_k = E_k[X]`
/// and the unique integrand with
/// `sigma_k(n) = (M_{k+1}(up) - M_{k+1}(down)) / (2 sqrt(dt))`, so that
/// `X = M_0 + sum_k sigma_k * dB_{k+1}` holds path-wise.
pub fn martingale_representation(
    tree: &ScenarioTree,
    payoff: &TerminalPayoff,
) -> Result<(AdaptedProcess, PredictableProcess)> {
    let n = tree.steps();
    let mut m_levels = vec![Vec::new(); n + 1];
    m_levels[n] = payoff.values().to_vec();
    for k in (0..n).rev() {
        let child = &m_levels[k + 1];
        let mut cur = Vec::with_capacity(tree.nodes_at(k));
        for node in 0..tree.nodes_at(k) {
            cur.push(0.5 * (child[2 * node] + child[2 * node + 1]));
        }
        m_levels[k] = cur;
    }
    let denom = 2.0 * tree.sqrt_dt();
    let mut sigma_levels = Vec::with_capacity(n);
    for k in 0..n {
        let child = &m_levels[k + 1];
        let mut cur = Vec::with_capacity(tree.nodes_at(k));
        for node in 0..tree.nodes_at(k) {
            cur.push((child[2 * node] - child[2 * node + 1]) / denom);
        }
        sigma_levels.push(cur);
    }
    Ok((
        AdaptedProcess::from_scalar_levels(m_levels),
        PredictableProcess::from_scalar_levels(sigma_levels),
    ))
}

/// Discrete Doléans-Dade exponential of `phi` against the Brownian driver:
/// `E_0 = 1`, `E_{k+1} = E_k (1 + phi_k dB_{k+1})`, a positive mean-one
/// martingale provided `|phi| sqrt(dt) < 1` at every node.
pub fn doleans_exponential(
    tree: &ScenarioTree,
    phi: &PredictableProcess,
) -> Result<AdaptedProcess> {
    doleans_exponential_from(tree, phi, 0)
}

/// Doléans exponential restarted at `start_level`: identically one at and
/// before the start, compounding only on later steps. Kernels before the
/// start are ignored (treated as zero).
pub fn doleans_exponential_from(
    tree: &ScenarioTree,
    phi: &PredictableProcess,
    start_level: usize,
) -> Result<AdaptedProcess> {
    if phi.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: phi.dim(),
        });
    }
    if phi.step_count() != tree.steps() {
        return Err(Error::LevelMismatch {
            expected: tree.steps(),
            got: phi.step_count(),
        });
    }
    let mut levels = Vec::with_capacity(tree.steps() + 1);
    levels.push(vec![1.0]);
    for k in 0..tree.steps() {
        let prev = &levels[k];
        let mut next = Vec::with_capacity(prev.len() * 2);
        for node in 0..tree.nodes_at(k) {
            let e = prev[node];
            if k < start_level {
                next.push(e);
                next.push(e);
                continue;
            }
            let p = phi.scalar(k, node);
            let product = p.abs() * tree.sqrt_dt();
            if !(product < 1.0) {
                return Err(Error::DensityPositivity {
                    level: k,
                    node,
                    kernel: p,
                    product,
                });
            }
            next.push(e * (1.0 + p * tree.sqrt_dt()));
            next.push(e * (1.0 - p * tree.sqrt_dt()));
        }
        levels.push(next);
    }
    Ok(AdaptedProcess::from_scalar_levels(levels))
}

/// Discrete stochastic integral `(H . X)_k = sum_{j<k} H_j * (X_{j+1} - X_j)`,
/// with the dot a Euclidean product when `H` and `X` are vector valued.
pub fn stochastic_integral(
    tree: &ScenarioTree,
    h: &PredictableProcess,
    x: &AdaptedProcess,
) -> Result<AdaptedProcess> {
    if h.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: h.dim(),
        });
    }
    if h.step_count() != tree.steps() || x.level_count() != tree.steps() + 1 {
        return Err(Error::LevelMismatch {
            expected: tree.steps(),
            got: h.step_count().min(x.last_level()),
        });
    }
    let dim = h.dim();
    let mut levels = Vec::with_capacity(tree.steps() + 1);
    levels.push(vec![0.0]);
    for k in 0..tree.steps() {
        let prev = &levels[k];
        let mut next = Vec::with_capacity(prev.len() * 2);
        for node in 0..tree.nodes_at(k) {
            let hv = h.value(k, node);
            let xv = x.value(k, node);
            for child in [2 * node, 2 * node + 1] {
                let xc = x.value(k + 1, child);
                let mut inc = 0.0;
                for i in 0..dim {
                    inc += hv[i] * (xc[i] - xv[i]);
                }
                next.push(prev[node] + inc);
            }
        }
        levels.push(next);
    }
    Ok(AdaptedProcess::from_scalar_levels(levels))
}

/// Path sum `sum_{k in [from, N)} f(k, node_k) * dt` evaluated leaf-wise;
/// the workhorse behind recorder and contribution accumulations.
pub fn accumulate_over_paths(
    tree: &ScenarioTree,
    from_level: usize,
    mut f: impl FnMut(usize, usize) -> f64,
) -> Vec<f64> {
    let n = tree.steps();
    let mut totals = vec![0.0; tree.leaf_count()];
    for (leaf, total) in totals.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in from_level..n {
            let node = leaf >> (n - k);
            acc += f(k, node) * tree.dt();
        }
        *total = acc;
    }
    totals
}
