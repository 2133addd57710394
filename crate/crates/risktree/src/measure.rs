//! Evaluation of conditional coherent and generalized deviation measures,
//! the correspondence between them, robust volatility recorders, the axiom
//! suite, and time-consistency checks.
//!
//! Kernel-generated measures are evaluated by backward BSDE induction with
//! the support-function driver, which is the time-consistent evaluation and
//! coincides with the brute-force dual value over vertex densities.
//! Conditional CVaR is evaluated per node by the greedy density (sort and
//! fill at cap `1/lambda`), the exact finite-sample optimum of the dual
//! problem. The reference envelope degenerates to `E_t[-X]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bsde::solve_tree;
use crate::envelope::{DensityProcess, Driver, KernelSet, RiskEnvelope};
use crate::error::{Error, Result};
use crate::tree::{
    accumulate_over_paths, cond_expectation_terminal, doleans_exponential,
    martingale_representation, AdaptedProcess, PredictableProcess, ScenarioTree, TerminalPayoff,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Coherent,
    Deviation,
}

/// Node-indexed outcome of a conditional risk measurement.
#[derive(Debug, Clone, Serialize)]
pub struct MeasureResult {
    pub level: usize,
    pub values: Vec<f64>,
    pub kind: MeasureKind,
    pub envelope: String,
}

fn check_level(tree: &ScenarioTree, t: usize) -> Result<()> {
    if t > tree.steps() {
        return Err(Error::LevelOutOfRange {
            level: t,
            max: tree.steps(),
        });
    }
    Ok(())
}

fn negated(tree: &ScenarioTree, x: &TerminalPayoff) -> TerminalPayoff {
    TerminalPayoff::new(tree, x.map(|v| -v)).expect("negation preserves finiteness")
}

fn validate_hard(tree: &ScenarioTree, envelope: &RiskEnvelope) -> Result<()> {
    envelope.validate_hard(tree)
}

/// Greedy worst-case density of the CVaR envelope for payoff `x`,
/// conditioned at level `t`: per node, conditional density `1/lambda` on
/// the worst outcomes until the unit mass is exhausted (one fractional
/// leaf). This is the exact optimum of `sup E_t[-XQ]` over
/// `{0 <= Q <= 1/lambda, E_t Q = 1}` on the finite tree.
pub fn cvar_worst_density(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    lambda: f64,
    t: usize,
) -> Result<DensityProcess> {
    check_level(tree, t)?;
    validate_hard(tree, &RiskEnvelope::CVaR(lambda))?;
    let n = tree.steps();
    let sub = 1usize << (n - t);
    let p = 1.0 / sub as f64;
    let cap = 1.0 / lambda;
    let mut q = vec![0.0; tree.leaf_count()];
    for node in 0..tree.nodes_at(t) {
        let start = node * sub;
        let mut order: Vec<usize> = (0..sub).collect();
        // worst payoff (largest loss) first; ties resolved by leaf index
        order.sort_by(|&a, &b| {
            let xa = x.values()[start + a];
            let xb = x.values()[start + b];
            xa.partial_cmp(&xb).expect("finite payoffs").then(a.cmp(&b))
        });
        let mut mass = 1.0;
        for &i in &order {
            if mass <= 0.0 {
                break;
            }
            let qi = cap.min(mass / p);
            q[start + i] = qi;
            mass -= qi * p;
        }
    }
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = q;
    for k in (0..n).rev() {
        let child = &levels[k + 1];
        levels[k] = (0..tree.nodes_at(k))
            .map(|node| 0.5 * (child[2 * node] + child[2 * node + 1]))
            .collect();
    }
    Ok(DensityProcess {
        values: AdaptedProcess::from_scalar_levels(levels),
        conditioning_level: t,
    })
}

/// Conditional coherent risk measure `C_t(X)` of the envelope.
pub fn coherent(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    envelope: &RiskEnvelope,
    t: usize,
) -> Result<MeasureResult> {
    check_level(tree, t)?;
    validate_hard(tree, envelope)?;
    let values = match envelope {
        RiskEnvelope::KernelGenerated(kernels) => {
            let solution = solve_tree(tree, &negated(tree, x), &Driver::Support(kernels.clone()))?;
            solution.y.values_at(t).to_vec()
        }
        RiskEnvelope::CVaR(lambda) => {
            let density = cvar_worst_density(tree, x, *lambda, t)?;
            let weighted: Vec<f64> = x
                .values()
                .iter()
                .zip(density.terminal())
                .map(|(xi, qi)| -xi * qi)
                .collect();
            tree.condense(tree.steps(), &weighted, t)?
        }
        RiskEnvelope::ReferenceOnly => {
            cond_expectation_terminal(tree, &negated(tree, x), t)?
        }
    };
    Ok(MeasureResult {
        level: t,
        values,
        kind: MeasureKind::Coherent,
        envelope: envelope.describe(),
    })
}

/// Conditional generalized deviation measure `D_t(X) = C_t(X) + E_t[X]`.
pub fn deviation(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    envelope: &RiskEnvelope,
    t: usize,
) -> Result<MeasureResult> {
    let c = coherent(tree, x, envelope, t)?;
    let e = cond_expectation_terminal(tree, x, t)?;
    let values = c.values.iter().zip(&e).map(|(cv, ev)| cv + ev).collect();
    Ok(MeasureResult {
        level: t,
        values,
        kind: MeasureKind::Deviation,
        envelope: c.envelope,
    })
}

/// Finite family of recorder weight processes (scalar for the single
/// driver).
#[derive(Debug, Clone)]
pub struct RecorderWeights {
    weights: Vec<PredictableProcess>,
}

impl RecorderWeights {
    /// Wrap a non-empty family of scalar weight processes and check the
    /// positivity condition `min_K K <= 0 <= max_K K` node-wise, which is
    /// what makes `sup_K K x >= 0` for every real `x`.
    pub fn new(tree: &ScenarioTree, weights: Vec<PredictableProcess>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter(
                "recorder weight family must be non-empty".into(),
            ));
        }
        for w in &weights {
            if w.dim() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: w.dim(),
                });
            }
            if w.step_count() != tree.steps() {
                return Err(Error::LevelMismatch {
                    expected: tree.steps(),
                    got: w.step_count(),
                });
            }
        }
        for k in 0..tree.steps() {
            for node in 0..tree.nodes_at(k) {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for w in &weights {
                    let v = w.scalar(k, node);
                    min = min.min(v);
                    max = max.max(v);
                }
                if min > 0.0 || max < 0.0 {
                    return Err(Error::RecorderPositivity {
                        level: k,
                        node,
                        min,
                        max,
                    });
                }
            }
        }
        Ok(Self { weights })
    }

    /// Constant weights, one process per value.
    pub fn constants(tree: &ScenarioTree, values: &[f64]) -> Result<Self> {
        Self::new(
            tree,
            values
                .iter()
                .map(|&v| PredictableProcess::constant(tree, v))
                .collect(),
        )
    }

    pub fn weights(&self) -> &[PredictableProcess] {
        &self.weights
    }

    fn sup_at(&self, level: usize, node: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .map(|w| w.scalar(level, node) * x)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Robust volatility recorder
/// `V_t(X) = E_t[ sum_{s >= t} sup_K K_s sigma^X_s dt ]`, computed from the
/// martingale representation of `X` and a leaf-wise backward accumulation.
pub fn volatility_recorder(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    weights: &RecorderWeights,
    t: usize,
) -> Result<Vec<f64>> {
    check_level(tree, t)?;
    let (_, sigma) = martingale_representation(tree, x)?;
    let totals = accumulate_over_paths(tree, t, |k, node| {
        weights.sup_at(k, node, sigma.scalar(k, node))
    });
    tree.condense(tree.steps(), &totals, t)
}

/// Recorder weights `K = -phi E(phi . B)` generated by the interval
/// endpoints (or finite values) of a kernel set, optionally extended by
/// explicitly selected kernel processes such as the worst case of a
/// position.
pub fn recorder_weights_from_kernels(
    tree: &ScenarioTree,
    kernels: &KernelSet,
    selected: &[PredictableProcess],
) -> Result<RecorderWeights> {
    let mut sources: Vec<PredictableProcess> = Vec::new();
    match kernels {
        KernelSet::Interval { lo, hi } => {
            sources.push(lo.to_process(tree));
            sources.push(hi.to_process(tree));
        }
        KernelSet::Finite(values) => {
            for &v in values {
                sources.push(PredictableProcess::constant(tree, v));
            }
        }
    }
    sources.extend(selected.iter().cloned());
    let mut weights = Vec::with_capacity(sources.len());
    for phi in &sources {
        let exp = doleans_exponential(tree, phi)?;
        let mut k_proc = PredictableProcess::zeros(tree, 1);
        for k in 0..tree.steps() {
            for node in 0..tree.nodes_at(k) {
                k_proc.set_scalar(k, node, -phi.scalar(k, node) * exp.scalar(k, node));
            }
        }
        weights.push(k_proc);
    }
    RecorderWeights::new(tree, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    /// M1t
    Subadditivity,
    /// M2t, including preservation of zero
    PositiveHomogeneity,
    /// C1t
    Monotonicity,
    /// C2t
    CashTranslation,
    /// D1t
    TranslationInvariance,
    /// D2't
    Nonnegativity,
}

#[derive(Debug, Clone, Serialize)]
pub struct AxiomStat {
    pub axiom: Axiom,
    pub max_residual: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AxiomSuiteReport {
    pub kind: MeasureKind,
    pub level: usize,
    pub trials: usize,
    pub seed: u64,
    pub relative_tolerance: f64,
    pub stats: Vec<AxiomStat>,
}

impl AxiomSuiteReport {
    pub fn total_violations(&self) -> usize {
        self.stats.iter().map(|s| s.violations).sum()
    }

    pub fn max_residual(&self) -> f64 {
        self.stats
            .iter()
            .map(|s| s.max_residual)
            .fold(0.0, f64::max)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-trial RNG derivation.
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(trial)))
}

fn gaussian_leaves(tree: &ScenarioTree, rng: &mut ChaCha8Rng) -> TerminalPayoff {
    let values: Vec<f64> = (0..tree.leaf_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    TerminalPayoff::new(tree, values).expect("gaussian draws are finite")
}

fn add_lifted(tree: &ScenarioTree, x: &TerminalPayoff, level: usize, addend: &[f64]) -> TerminalPayoff {
    let lifted = tree.lift(level, addend, tree.steps()).expect("lift");
    let values = x
        .values()
        .iter()
        .zip(&lifted)
        .map(|(a, b)| a + b)
        .collect();
    TerminalPayoff::new(tree, values).expect("finite")
}

fn scale_lifted(tree: &ScenarioTree, x: &TerminalPayoff, level: usize, factor: &[f64]) -> TerminalPayoff {
    let lifted = tree.lift(level, factor, tree.steps()).expect("lift");
    let values = x
        .values()
        .iter()
        .zip(&lifted)
        .map(|(a, b)| a * b)
        .collect();
    TerminalPayoff::new(tree, values).expect("finite")
}

/// Seeded property run over the measure axioms.
///
/// Each trial draws Gaussian payoffs `X`, `Y`, an `F_t`-measurable shift `C`
/// and a positive `F_t`-measurable scale `lambda`, and asserts every axiom
/// applicable to `kind` node-wise at the conditioning level within
/// `rel_tol` (relative to the magnitudes involved). Report-only.
pub fn axiom_suite<F>(
    tree: &ScenarioTree,
    eval: F,
    kind: MeasureKind,
    level: usize,
    seed: u64,
    trials: usize,
    rel_tol: f64,
) -> Result<AxiomSuiteReport>
where
    F: Fn(&TerminalPayoff, usize) -> Result<Vec<f64>>,
{
    check_level(tree, level)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let axioms: &[Axiom] = match kind {
        MeasureKind::Coherent => &[
            Axiom::Subadditivity,
            Axiom::PositiveHomogeneity,
            Axiom::Monotonicity,
            Axiom::CashTranslation,
        ],
        MeasureKind::Deviation => &[
            Axiom::Subadditivity,
            Axiom::PositiveHomogeneity,
            Axiom::TranslationInvariance,
            Axiom::Nonnegativity,
        ],
    };
    let mut stats: Vec<AxiomStat> = axioms
        .iter()
        .map(|&axiom| AxiomStat {
            axiom,
            max_residual: 0.0,
            violations: 0,
        })
        .collect();
    let record = |stats: &mut Vec<AxiomStat>, axiom: Axiom, residual: f64| {
        let stat = stats
            .iter_mut()
            .find(|s| s.axiom == axiom)
            .expect("axiom registered");
        if residual > stat.max_residual {
            stat.max_residual = residual;
        }
        if residual > rel_tol {
            stat.violations += 1;
        }
    };

    // preservation of zero, once: part of positive homogeneity
    let zero = TerminalPayoff::constant(tree, 0.0)?;
    let rho_zero = eval(&zero, level)?;
    for v in &rho_zero {
        record(&mut stats, Axiom::PositiveHomogeneity, v.abs());
    }

    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let x = gaussian_leaves(tree, &mut rng);
        let y = gaussian_leaves(tree, &mut rng);
        let c: Vec<f64> = (0..tree.nodes_at(level))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lambda: Vec<f64> = (0..tree.nodes_at(level))
            .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();

        let rho_x = eval(&x, level)?;
        let rho_y = eval(&y, level)?;
        let sum = TerminalPayoff::new(
            tree,
            x.values()
                .iter()
                .zip(y.values())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        let rho_sum = eval(&sum, level)?;
        for n in 0..tree.nodes_at(level) {
            let scale = 1.0_f64.max(rho_sum[n].abs().max(rho_x[n].abs()).max(rho_y[n].abs()));
            let r = (rho_sum[n] - rho_x[n] - rho_y[n]) / scale;
            record(&mut stats, Axiom::Subadditivity, r.max(0.0));
        }

        let scaled = scale_lifted(tree, &x, level, &lambda);
        let rho_scaled = eval(&scaled, level)?;
        for n in 0..tree.nodes_at(level) {
            let expect = lambda[n] * rho_x[n];
            let scale = 1.0_f64.max(rho_scaled[n].abs().max(expect.abs()));
            record(
                &mut stats,
                Axiom::PositiveHomogeneity,
                (rho_scaled[n] - expect).abs() / scale,
            );
        }

        let shifted = add_lifted(tree, &x, level, &c);
        let rho_shifted = eval(&shifted, level)?;
        match kind {
            MeasureKind::Coherent => {
                // C2t: rho(X + C) = rho(X) - C
                for n in 0..tree.nodes_at(level) {
                    let expect = rho_x[n] - c[n];
                    let scale = 1.0_f64.max(rho_shifted[n].abs().max(expect.abs()));
                    record(
                        &mut stats,
                        Axiom::CashTranslation,
                        (rho_shifted[n] - expect).abs() / scale,
                    );
                }
                // C1t on the dominated pair X <= X + |Y|
                let bigger = TerminalPayoff::new(
                    tree,
                    x.values()
                        .iter()
                        .zip(y.values())
                        .map(|(a, b)| a + b.abs())
                        .collect(),
                )?;
                let rho_bigger = eval(&bigger, level)?;
                for n in 0..tree.nodes_at(level) {
                    let scale = 1.0_f64.max(rho_x[n].abs().max(rho_bigger[n].abs()));
                    let r = (rho_bigger[n] - rho_x[n]) / scale;
                    record(&mut stats, Axiom::Monotonicity, r.max(0.0));
                }
            }
            MeasureKind::Deviation => {
                // D1t: rho(X + C) = rho(X)
                for n in 0..tree.nodes_at(level) {
                    let scale = 1.0_f64.max(rho_shifted[n].abs().max(rho_x[n].abs()));
                    record(
                        &mut stats,
                        Axiom::TranslationInvariance,
                        (rho_shifted[n] - rho_x[n]).abs() / scale,
                    );
                }
                // D2't: rho(X) >= 0
                for n in 0..tree.nodes_at(level) {
                    let scale = 1.0_f64.max(rho_x[n].abs());
                    record(&mut stats, Axiom::Nonnegativity, (-rho_x[n]).max(0.0) / scale);
                }
            }
        }
    }

    Ok(AxiomSuiteReport {
        kind,
        level,
        trials,
        seed,
        relative_tolerance: rel_tol,
        stats,
    })
}

/// Axiom suite over the measures generated by a risk envelope.
pub fn axiom_suite_for_envelope(
    tree: &ScenarioTree,
    envelope: &RiskEnvelope,
    kind: MeasureKind,
    level: usize,
    seed: u64,
    trials: usize,
    rel_tol: f64,
) -> Result<AxiomSuiteReport> {
    validate_hard(tree, envelope)?;
    match kind {
        MeasureKind::Coherent => axiom_suite(
            tree,
            |x, t| Ok(coherent(tree, x, envelope, t)?.values),
            kind,
            level,
            seed,
            trials,
            rel_tol,
        ),
        MeasureKind::Deviation => axiom_suite(
            tree,
            |x, t| Ok(deviation(tree, x, envelope, t)?.values),
            kind,
            level,
            seed,
            trials,
            rel_tol,
        ),
    }
}

/// Residuals of the two recursions that define time-consistency:
/// `C_s(X) = C_s(-C_t(X))` and
/// `D_s(X) = E_s[D_t(X)] + D_s(E_t[X] - D_t(X))`.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub s: usize,
    pub t: usize,
    pub envelope: String,
    /// Whether the family is recursive by construction (kernel-generated
    /// and reference families are; CVaR is not).
    pub time_consistent_family: bool,
    pub c3_residuals: Vec<f64>,
    pub d3_residuals: Vec<f64>,
    pub max_c3: f64,
    pub max_d3: f64,
}

pub fn time_consistency_check(
    tree: &ScenarioTree,
    envelope: &RiskEnvelope,
    x: &TerminalPayoff,
    s: usize,
    t: usize,
) -> Result<ConsistencyReport> {
    check_level(tree, t)?;
    if s > t {
        return Err(Error::LevelMismatch { expected: t, got: s });
    }
    let c_s = coherent(tree, x, envelope, s)?.values;
    let c_t = coherent(tree, x, envelope, t)?.values;
    let neg_ct: Vec<f64> = c_t.iter().map(|v| -v).collect();
    let lifted = tree.lift(t, &neg_ct, tree.steps())?;
    let nested = coherent(tree, &TerminalPayoff::new(tree, lifted)?, envelope, s)?.values;
    let c3_residuals: Vec<f64> = c_s
        .iter()
        .zip(&nested)
        .map(|(a, b)| (a - b).abs())
        .collect();

    let d_s = deviation(tree, x, envelope, s)?.values;
    let d_t = deviation(tree, x, envelope, t)?.values;
    let e_t = cond_expectation_terminal(tree, x, t)?;
    let expected_dt = tree.condense(t, &d_t, s)?;
    let inner: Vec<f64> = e_t.iter().zip(&d_t).map(|(e, d)| e - d).collect();
    let lifted_inner = tree.lift(t, &inner, tree.steps())?;
    let d_nested = deviation(tree, &TerminalPayoff::new(tree, lifted_inner)?, envelope, s)?.values;
    let d3_residuals: Vec<f64> = d_s
        .iter()
        .zip(expected_dt.iter().zip(&d_nested))
        .map(|(d, (e, n))| (d - (e + n)).abs())
        .collect();

    let max_c3 = c3_residuals.iter().cloned().fold(0.0, f64::max);
    let max_d3 = d3_residuals.iter().cloned().fold(0.0, f64::max);
    Ok(ConsistencyReport {
        s,
        t,
        envelope: envelope.describe(),
        time_consistent_family: !matches!(envelope, RiskEnvelope::CVaR(_)),
        c3_residuals,
        d3_residuals,
        max_c3,
        max_d3,
    })
}
