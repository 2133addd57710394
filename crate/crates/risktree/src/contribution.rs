//! Exposed faces, worst-case densities, the risk-adjusted loss process,
//! marginal and total risk contributions, aggregation and time-consistency
//! of contributions, the Z-identity, and the static standard-deviation
//! example.
//!
//! Sign convention: densities are written as `E(phi . B)` throughout, so the
//! price of risk is `theta = -phi` and the risk-adjusted loss of assets is
//! `ell = -(b + sigma phi) E(phi . B)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::bsde::solve_tree;
use crate::envelope::{DensityProcess, Driver, RiskEnvelope};
use crate::error::{Error, Result};
use crate::market::{AssetModel, Policy};
use crate::measure::{coherent, cvar_worst_density, deviation};
use crate::tree::{
    accumulate_over_paths, PredictableProcess, ScenarioTree, TerminalPayoff,
};

/// Worst-case element of the risk envelope for a position, conditioned at
/// `t*`: the density attaining `C_{t*}(X) = E_{t*}[-X Q]`.
///
/// Kernel-generated envelopes carry the subgradient-selected kernel process
/// (zero before `t*`); CVaR faces consist of the greedy density alone and
/// expose only the kernel implied by the density's martingale
/// representation.
#[derive(Debug, Clone)]
pub struct ExposedFaceElement {
    /// Subgradient-selected kernel, present for kernel-generated envelopes.
    pub worst_kernel: Option<PredictableProcess>,
    /// Worst-case density process, restarted at the conditioning level.
    pub density: DensityProcess,
    pub conditioning_level: usize,
}

impl ExposedFaceElement {
    /// Kernel of the density's one-step representation
    /// `D_{k+1} = D_k (1 + phi dB)`; equal to the selected kernel when one
    /// is present, and defined as zero on nodes where the density vanishes.
    pub fn implied_kernel(&self, tree: &ScenarioTree) -> PredictableProcess {
        if let Some(phi) = &self.worst_kernel {
            return phi.clone();
        }
        let mut out = PredictableProcess::zeros(tree, 1);
        let d = &self.density.values;
        for k in 0..tree.steps() {
            for node in 0..tree.nodes_at(k) {
                let cur = d.scalar(k, node);
                if cur == 0.0 {
                    continue;
                }
                let up = d.scalar(k + 1, 2 * node);
                let down = d.scalar(k + 1, 2 * node + 1);
                out.set_scalar(k, node, (up - down) / (2.0 * tree.sqrt_dt() * cur));
            }
        }
        out
    }
}

/// Worst-case density of `envelope` for payoff `x` at conditioning level
/// `t`. For kernel envelopes the kernel is the deterministic subgradient
/// selection along the backward induction (interval endpoint by the sign of
/// `Z`, minimal-absolute-value kernel on ties).
pub fn exposed_face(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    envelope: &RiskEnvelope,
    t: usize,
) -> Result<ExposedFaceElement> {
    if t > tree.steps() {
        return Err(Error::LevelOutOfRange {
            level: t,
            max: tree.steps(),
        });
    }
    match envelope {
        RiskEnvelope::KernelGenerated(kernels) => {
            let driver = Driver::Support(kernels.clone());
            let neg = TerminalPayoff::new(tree, x.map(|v| -v))?;
            let solution = solve_tree(tree, &neg, &driver)?;
            let mut phi = PredictableProcess::zeros(tree, 1);
            for k in t..tree.steps() {
                for node in 0..tree.nodes_at(k) {
                    phi.set_scalar(k, node, driver.subgradient(k, node, solution.z.scalar(k, node)));
                }
            }
            let density = DensityProcess::from_kernel(tree, &phi, t)?;
            Ok(ExposedFaceElement {
                worst_kernel: Some(phi),
                density,
                conditioning_level: t,
            })
        }
        RiskEnvelope::CVaR(lambda) => {
            let density = cvar_worst_density(tree, x, *lambda, t)?;
            Ok(ExposedFaceElement {
                worst_kernel: None,
                density,
                conditioning_level: t,
            })
        }
        RiskEnvelope::ReferenceOnly => Ok(ExposedFaceElement {
            worst_kernel: Some(PredictableProcess::zeros(tree, 1)),
            density: DensityProcess::reference(tree, t),
            conditioning_level: t,
        }),
    }
}

/// Exposed-face bounds of the directional derivative of `C_t(.)` at `X` in
/// direction `Y`, plus one-sided finite-difference probes.
#[derive(Debug, Clone, Serialize)]
pub struct SubdifferentialReport {
    pub level: usize,
    /// esssup over the face of `E_t[-QY]`, node-wise.
    pub upper: Vec<f64>,
    /// essinf over the face of `E_t[-QY]`, node-wise.
    pub lower: Vec<f64>,
    /// Count of nodes with a subgradient tie (`Z = 0`).
    pub tie_nodes: usize,
    pub probes: Vec<SubdifferentialProbe>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubdifferentialProbe {
    pub theta: f64,
    pub quotients: Vec<f64>,
    /// Quotients lie inside `[lower - 10|theta|, upper + 10|theta|]`.
    pub within_bounds: bool,
}

/// Enumerate the argmax kernel selections (interval endpoints on tie nodes
/// where `Z = 0`) and evaluate `E_t[-QY]` over the resulting face vertices;
/// then probe the difference quotients at the requested step sizes.
pub fn subdifferential_bounds(
    tree: &ScenarioTree,
    x: &TerminalPayoff,
    y: &TerminalPayoff,
    envelope: &RiskEnvelope,
    t: usize,
    thetas: &[f64],
    enumeration_limit: u64,
) -> Result<SubdifferentialReport> {
    let kernels = match envelope {
        RiskEnvelope::KernelGenerated(k) => k,
        other => {
            return Err(Error::UnsupportedEnvelope {
                op: "subdifferential_bounds",
                kind: other.kind_name().into(),
            })
        }
    };
    let driver = Driver::Support(kernels.clone());
    let neg = TerminalPayoff::new(tree, x.map(|v| -v))?;
    let solution = solve_tree(tree, &neg, &driver)?;

    // fixed selections where the argmax is unique; endpoint choices on ties
    let tie_eps = 1e-12;
    let mut base = PredictableProcess::zeros(tree, 1);
    let mut ties: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut combos: u64 = 1;
    for k in t..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let z = solution.z.scalar(k, node);
            if z.abs() <= tie_eps {
                let eps = kernels.endpoints(k, node);
                combos = combos.saturating_mul(eps.len() as u64);
                if combos > enumeration_limit {
                    return Err(Error::EnumerationBound {
                        size: combos,
                        limit: enumeration_limit,
                    });
                }
                ties.push((k, node, eps));
            } else {
                base.set_scalar(k, node, driver.subgradient(k, node, z));
            }
        }
    }

    let nodes_t = tree.nodes_at(t);
    let mut upper = vec![f64::NEG_INFINITY; nodes_t];
    let mut lower = vec![f64::INFINITY; nodes_t];
    let mut selection = vec![0usize; ties.len()];
    loop {
        let mut phi = base.clone();
        for ((k, node, eps), &pick) in ties.iter().zip(&selection) {
            phi.set_scalar(*k, *node, eps[pick]);
        }
        let density = DensityProcess::from_kernel(tree, &phi, t)?;
        let weighted: Vec<f64> = y
            .values()
            .iter()
            .zip(density.terminal())
            .map(|(yi, qi)| -yi * qi)
            .collect();
        let vals = tree.condense(tree.steps(), &weighted, t)?;
        for n in 0..nodes_t {
            upper[n] = upper[n].max(vals[n]);
            lower[n] = lower[n].min(vals[n]);
        }
        let mut i = ties.len();
        loop {
            if i == 0 {
                // finished enumerating; run the probes and return
                let rho_x = coherent(tree, x, envelope, t)?.values;
                let mut probes = Vec::with_capacity(thetas.len());
                for &theta in thetas {
                    let bumped = TerminalPayoff::new(
                        tree,
                        x.values()
                            .iter()
                            .zip(y.values())
                            .map(|(a, b)| a + theta * b)
                            .collect(),
                    )?;
                    let rho_bumped = coherent(tree, &bumped, envelope, t)?.values;
                    let quotients: Vec<f64> = rho_bumped
                        .iter()
                        .zip(&rho_x)
                        .map(|(b, a)| (b - a) / theta)
                        .collect();
                    let tol = 10.0 * theta.abs();
                    let within = quotients
                        .iter()
                        .enumerate()
                        .all(|(n, &q)| q >= lower[n] - tol && q <= upper[n] + tol);
                    probes.push(SubdifferentialProbe {
                        theta,
                        quotients,
                        within_bounds: within,
                    });
                }
                return Ok(SubdifferentialReport {
                    level: t,
                    upper,
                    lower,
                    tie_nodes: ties.len(),
                    probes,
                });
            }
            i -= 1;
            selection[i] += 1;
            if selection[i] < ties[i].2.len() {
                break;
            }
            selection[i] = 0;
        }
    }
}

/// Risk-adjusted loss of assets under the worst-case probability:
/// `ell^i_k = -(b^i_k + sigma^i_k phi_k) D_k`, one component per asset.
///
/// Satisfies the representation identity
/// `sum_{(k,n) in E} p(n) ell_k(n) dt = E[-X^{1_E} Q]` for every
/// predictable node set `E`, exactly on the tree.
pub fn doleans_loss_process(
    tree: &ScenarioTree,
    model: &AssetModel,
    face: &ExposedFaceElement,
) -> Result<PredictableProcess> {
    let phi = face.implied_kernel(tree);
    let d = model.asset_count();
    let mut ell = PredictableProcess::zeros(tree, d);
    let mut row = vec![0.0; d];
    for k in 0..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let dens = face.density.values.scalar(k, node);
            let p = phi.scalar(k, node);
            for (i, slot) in row.iter_mut().enumerate() {
                let b = model.drift(i, k, node)?;
                let s = model.diffusion(i, k, node)?;
                *slot = -(b + s * p) * dens;
            }
            ell.set(k, node, &row);
        }
    }
    Ok(ell)
}

/// Full contribution decomposition of the terminal wealth risk at `t*`.
#[derive(Debug, Clone)]
pub struct ContributionReport {
    pub conditioning_level: usize,
    pub face: ExposedFaceElement,
    /// Risk-adjusted loss `ell`, the marginal contribution of the coherent
    /// measure.
    pub ell: PredictableProcess,
    /// `m^D = ell + b`.
    pub marginal_deviation: PredictableProcess,
    /// Alternative deviation marginal `m^D_alt = -sigma phi D` from the
    /// recorder identification.
    pub marginal_deviation_alt: PredictableProcess,
    /// `delta = m^D - m^D_alt = b (1 - D)` path-wise.
    pub delta: PredictableProcess,
    /// `c^C = u (.) m^C` element-wise.
    pub contrib_coherent: PredictableProcess,
    /// `c^D = u (.) m^D` element-wise.
    pub contrib_deviation: PredictableProcess,
    /// `C_{t*}(X^u_T)` node-wise at `t*`.
    pub coherent_values: Vec<f64>,
    /// `D_{t*}(X^u_T)` node-wise at `t*`.
    pub deviation_values: Vec<f64>,
    /// `C_{t*}(X^u_T) - (E_{t*}[sum u m^C dt] - X^u_{t*})` node-wise.
    pub aggregation_residual_coherent: Vec<f64>,
    /// `D_{t*}(X^u_T) - E_{t*}[sum u m^D dt]` node-wise.
    pub aggregation_residual_deviation: Vec<f64>,
    /// `E_{t*}[sum u delta dt]` node-wise; vanishes whenever `u (.) b` is
    /// deterministic.
    pub delta_conditional_mean: Vec<f64>,
}

impl ContributionReport {
    pub fn max_aggregation_residual(&self) -> f64 {
        self.aggregation_residual_coherent
            .iter()
            .chain(&self.aggregation_residual_deviation)
            .fold(0.0, |acc, r| acc.max(r.abs()))
    }

    pub fn max_delta_conditional_mean(&self) -> f64 {
        self.delta_conditional_mean
            .iter()
            .fold(0.0, |acc, r| acc.max(r.abs()))
    }
}

/// Marginal and total risk contributions of `policy` in `model` under
/// `envelope`, conditioned at `t*`, with both aggregation identities
/// evaluated node-wise.
pub fn marginal_and_total_contributions(
    tree: &ScenarioTree,
    model: &AssetModel,
    policy: &Policy,
    x0: f64,
    envelope: &RiskEnvelope,
    t_star: usize,
) -> Result<ContributionReport> {
    let d = model.asset_count();
    let wealth = crate::market::wealth(tree, model, policy, x0)?;
    let terminal = TerminalPayoff::from_adapted(tree, &wealth.values)?;
    let face = exposed_face(tree, &terminal, envelope, t_star)?;
    let ell = doleans_loss_process(tree, model, &face)?;
    let phi = face.implied_kernel(tree);

    let mut marginal_deviation = PredictableProcess::zeros(tree, d);
    let mut marginal_deviation_alt = PredictableProcess::zeros(tree, d);
    let mut delta = PredictableProcess::zeros(tree, d);
    let mut contrib_coherent = PredictableProcess::zeros(tree, d);
    let mut contrib_deviation = PredictableProcess::zeros(tree, d);
    for k in 0..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let dens = face.density.values.scalar(k, node);
            let p = phi.scalar(k, node);
            let u = policy.value(k, node);
            let lv = ell.value(k, node).to_vec();
            let mut md = vec![0.0; d];
            let mut md_alt = vec![0.0; d];
            let mut dl = vec![0.0; d];
            let mut cc = vec![0.0; d];
            let mut cd = vec![0.0; d];
            for i in 0..d {
                let b = model.drift(i, k, node)?;
                let s = model.diffusion(i, k, node)?;
                md[i] = lv[i] + b;
                md_alt[i] = -s * p * dens;
                dl[i] = md[i] - md_alt[i];
                cc[i] = u[i] * lv[i];
                cd[i] = u[i] * md[i];
            }
            marginal_deviation.set(k, node, &md);
            marginal_deviation_alt.set(k, node, &md_alt);
            delta.set(k, node, &dl);
            contrib_coherent.set(k, node, &cc);
            contrib_deviation.set(k, node, &cd);
        }
    }

    let coherent_values = coherent(tree, &terminal, envelope, t_star)?.values;
    let deviation_values = deviation(tree, &terminal, envelope, t_star)?.values;

    let sum_over = |p: &PredictableProcess| -> Result<Vec<f64>> {
        let totals = accumulate_over_paths(tree, t_star, |k, node| {
            p.value(k, node).iter().sum::<f64>()
        });
        tree.condense(tree.steps(), &totals, t_star)
    };
    let agg_c = sum_over(&contrib_coherent)?;
    let agg_d = sum_over(&contrib_deviation)?;
    let mut delta_scaled = PredictableProcess::zeros(tree, d);
    for k in 0..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let u = policy.value(k, node);
            let dl = delta.value(k, node).to_vec();
            let row: Vec<f64> = u.iter().zip(&dl).map(|(ui, di)| ui * di).collect();
            delta_scaled.set(k, node, &row);
        }
    }
    let delta_conditional_mean = sum_over(&delta_scaled)?;

    let aggregation_residual_coherent: Vec<f64> = (0..tree.nodes_at(t_star))
        .map(|n| coherent_values[n] - (agg_c[n] - wealth.values.scalar(t_star, n)))
        .collect();
    let aggregation_residual_deviation: Vec<f64> = (0..tree.nodes_at(t_star))
        .map(|n| deviation_values[n] - agg_d[n])
        .collect();

    Ok(ContributionReport {
        conditioning_level: t_star,
        face,
        ell,
        marginal_deviation,
        marginal_deviation_alt,
        delta,
        contrib_coherent,
        contrib_deviation,
        coherent_values,
        deviation_values,
        aggregation_residual_coherent,
        aggregation_residual_deviation,
        delta_conditional_mean,
    })
}

/// Comparison of the contribution machinery rooted at two conditioning
/// levels on their common future.
///
/// The selected kernels must agree node-wise (the time-consistency content
/// of the marginals); the density-normalized marginals `-(b + sigma phi)`
/// and `-sigma phi` then agree exactly, while the raw marginals differ by
/// the density restart factor, which is reported rather than asserted.
#[derive(Debug, Clone, Serialize)]
pub struct ContributionConsistencyReport {
    pub t1: usize,
    pub t2: usize,
    pub time_consistent_family: bool,
    /// Max |phi(t1-face) - phi(t2-face)| on levels >= max(t1, t2).
    pub max_kernel_gap: f64,
    /// Max gap of density-normalized marginals on the common future.
    pub max_normalized_marginal_gap: f64,
    /// Max gap of the raw (density-weighted) marginals; nonzero in general
    /// because the faces restart their densities at different levels.
    pub max_raw_marginal_gap: f64,
    /// Max residual of `m^D - m^C - b = 0`, both conditioning levels.
    pub max_correspondence_residual: f64,
}

pub fn contribution_time_consistency(
    tree: &ScenarioTree,
    model: &AssetModel,
    policy: &Policy,
    x0: f64,
    envelope: &RiskEnvelope,
    t1: usize,
    t2: usize,
) -> Result<ContributionConsistencyReport> {
    let r1 = marginal_and_total_contributions(tree, model, policy, x0, envelope, t1)?;
    let r2 = marginal_and_total_contributions(tree, model, policy, x0, envelope, t2)?;
    let phi1 = r1.face.implied_kernel(tree);
    let phi2 = r2.face.implied_kernel(tree);
    let common = t1.max(t2);
    let d = model.asset_count();

    let mut max_kernel_gap = 0.0f64;
    let mut max_norm_gap = 0.0f64;
    let mut max_raw_gap = 0.0f64;
    for k in common..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let p1 = phi1.scalar(k, node);
            let p2 = phi2.scalar(k, node);
            max_kernel_gap = max_kernel_gap.max((p1 - p2).abs());
            for i in 0..d {
                let b = model.drift(i, k, node)?;
                let s = model.diffusion(i, k, node)?;
                let norm1 = -(b + s * p1);
                let norm2 = -(b + s * p2);
                max_norm_gap = max_norm_gap.max((norm1 - norm2).abs());
                let raw1 = r1.ell.value(k, node)[i];
                let raw2 = r2.ell.value(k, node)[i];
                max_raw_gap = max_raw_gap.max((raw1 - raw2).abs());
            }
        }
    }

    let mut max_corr = 0.0f64;
    for report in [&r1, &r2] {
        for k in 0..tree.steps() {
            for node in 0..tree.nodes_at(k) {
                for i in 0..d {
                    let b = model.drift(i, k, node)?;
                    let md = report.marginal_deviation.value(k, node)[i];
                    let mc = report.ell.value(k, node)[i];
                    max_corr = max_corr.max((md - mc - b).abs());
                }
            }
        }
    }

    Ok(ContributionConsistencyReport {
        t1,
        t2,
        time_consistent_family: !matches!(envelope, RiskEnvelope::CVaR(_)),
        max_kernel_gap,
        max_normalized_marginal_gap: max_norm_gap,
        max_raw_marginal_gap: max_raw_gap,
        max_correspondence_residual: max_corr,
    })
}

/// Residuals of the Z-identity: the summed deviation contribution equals
/// `Z phi` with the worst-case volatility `Z_k = -(u_k . sigma_k) D_k`.
///
/// The BSDE's own second component satisfies `Z phi = g(Z)` exactly (the
/// subgradient attains the support function); its gap to the worst-case
/// volatility is reported, not asserted, because the two differ path-wise
/// on the tree whenever the deviation value process carries volatility.
#[derive(Debug, Clone, Serialize)]
pub struct ZIdentityReport {
    pub level: usize,
    /// Node-wise max of `|sum_i c^{D,i} - Z phi|` with `c^D = u m^D_alt`.
    pub max_residual_alt: f64,
    /// Node-wise max of `|sum_i u_i m^D_i - Z phi - u.b (1 - D)|`; the
    /// `u.b (1 - D)` term is what the `m^D = ell + b` route adds.
    pub max_residual_def: f64,
    /// Max of the separately reported `u.b (1 - D)` term.
    pub max_ub_term: f64,
    /// Max |Z_bsde phi(Z_bsde) - g(Z_bsde)| (exact subgradient check).
    pub max_driver_residual: f64,
    /// Max |Z_bsde - Z_worst_case|, reported only.
    pub max_bsde_gap: f64,
}

pub fn z_identity_check(
    tree: &ScenarioTree,
    model: &AssetModel,
    policy: &Policy,
    x0: f64,
    envelope: &RiskEnvelope,
    t: usize,
) -> Result<ZIdentityReport> {
    let kernels = match envelope {
        RiskEnvelope::KernelGenerated(k) => k,
        other => {
            return Err(Error::UnsupportedEnvelope {
                op: "z_identity_check",
                kind: other.kind_name().into(),
            })
        }
    };
    let report = marginal_and_total_contributions(tree, model, policy, x0, envelope, t)?;
    let phi = report.face.implied_kernel(tree);
    let driver = Driver::Support(kernels.clone());
    let wealth = crate::market::wealth(tree, model, policy, x0)?;
    let terminal = TerminalPayoff::new(tree, wealth.terminal().iter().map(|v| -v).collect())?;
    let bsde = solve_tree(tree, &terminal, &driver)?;

    let d = model.asset_count();
    let mut max_alt = 0.0f64;
    let mut max_def = 0.0f64;
    let mut max_ub = 0.0f64;
    let mut max_driver = 0.0f64;
    let mut max_gap = 0.0f64;
    for k in t..tree.steps() {
        for node in 0..tree.nodes_at(k) {
            let dens = report.face.density.values.scalar(k, node);
            let p = phi.scalar(k, node);
            let u = policy.value(k, node);
            let mut u_sigma = 0.0;
            let mut u_b = 0.0;
            let mut sum_alt = 0.0;
            let mut sum_def = 0.0;
            for i in 0..d {
                u_sigma += u[i] * model.diffusion(i, k, node)?;
                u_b += u[i] * model.drift(i, k, node)?;
                sum_alt += u[i] * report.marginal_deviation_alt.value(k, node)[i];
                sum_def += u[i] * report.marginal_deviation.value(k, node)[i];
            }
            let z_wc = -u_sigma * dens;
            let ub_term = u_b * (1.0 - dens);
            max_alt = max_alt.max((sum_alt - z_wc * p).abs());
            max_def = max_def.max((sum_def - z_wc * p - ub_term).abs());
            max_ub = max_ub.max(ub_term.abs());

            let zb = bsde.z.scalar(k, node);
            let sub = driver.subgradient(k, node, zb);
            max_driver = max_driver.max((zb * sub - driver.evaluate(k, node, zb)).abs());
            max_gap = max_gap.max((zb - z_wc).abs());
        }
    }
    Ok(ZIdentityReport {
        level: t,
        max_residual_alt: max_alt,
        max_residual_def: max_def,
        max_ub_term: max_ub,
        max_driver_residual: max_driver,
        max_bsde_gap: max_gap,
    })
}

/// Static portfolio with positive-definite covariance.
#[derive(Debug, Clone)]
pub struct StaticPortfolio {
    pub weights: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl StaticPortfolio {
    pub fn new(weights: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = weights.len();
        if d == 0 {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        if covariance.len() != d || covariance.iter().any(|row| row.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.len(),
            });
        }
        let m = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        for i in 0..d {
            for j in 0..i {
                let scale = 1.0_f64.max(m[(i, j)].abs());
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            weights,
            covariance: m,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StaticContribution {
    pub total: f64,
    pub marginals: Vec<f64>,
    pub contributions: Vec<f64>,
}

/// Standard-deviation risk of a static portfolio with its Euler
/// decomposition: `f(w) = sqrt(w' L w)`, `marginal_i = (L w)_i / f`,
/// `contribution_i = w_i marginal_i`, and `sum contributions = f`.
pub fn static_stddev_contribution(portfolio: &StaticPortfolio) -> Result<StaticContribution> {
    if Cholesky::new(portfolio.covariance.clone()).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let w = DVector::from_column_slice(&portfolio.weights);
    let lw = &portfolio.covariance * &w;
    let quad = w.dot(&lw);
    if quad <= 0.0 {
        return Err(Error::InvalidParameter(
            "portfolio weights carry no variance (w' L w = 0)".into(),
        ));
    }
    let total = quad.sqrt();
    let marginals: Vec<f64> = lw.iter().map(|v| v / total).collect();
    let contributions: Vec<f64> = portfolio
        .weights
        .iter()
        .zip(&marginals)
        .map(|(wi, mi)| wi * mi)
        .collect();
    Ok(StaticContribution {
        total,
        marginals,
        contributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AssetModel, AssetSpec, Policy, Rule};
    use crate::tree::{brownian, build_tree, cond_expectation_terminal};
    use approx::assert_relative_eq;

    fn brownian_payoff(tree: &ScenarioTree) -> TerminalPayoff {
        TerminalPayoff::from_adapted(tree, &brownian(tree)).unwrap()
    }

    fn kappa_market(tree: &ScenarioTree) -> (AssetModel, Policy) {
        (
            AssetModel::single(0.0, 1.0, 0.0).unwrap(),
            Policy::constant(tree, &[1.0]),
        )
    }

    #[test]
    fn face_of_terminal_brownian_selects_lower_endpoint() {
        let tree = build_tree(4, 0.5).unwrap();
        let x = brownian_payoff(&tree);
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.5), 0).unwrap();
        let phi = face.worst_kernel.as_ref().unwrap();
        for k in 0..4 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(phi.scalar(k, node), -0.5);
            }
        }
        // defining identity at the root
        let weighted: Vec<f64> = x
            .values()
            .iter()
            .zip(face.density.terminal())
            .map(|(xi, qi)| -xi * qi)
            .collect();
        let value = tree.expectation(4, &weighted).unwrap();
        assert_relative_eq!(value, 0.25, max_relative = 1e-13);
    }

    #[test]
    fn face_sign_flips_with_payoff() {
        let tree = build_tree(3, 0.5).unwrap();
        let x = TerminalPayoff::new(
            &tree,
            brownian(&tree).terminal().iter().map(|v| -v).collect(),
        )
        .unwrap();
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.5), 0).unwrap();
        let phi = face.worst_kernel.as_ref().unwrap();
        for k in 0..3 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(phi.scalar(k, node), 0.5);
            }
        }
    }

    #[test]
    fn face_of_constant_payoff_is_reference() {
        let tree = build_tree(3, 0.75).unwrap();
        let x = TerminalPayoff::constant(&tree, 2.0).unwrap();
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.5), 0).unwrap();
        let phi = face.worst_kernel.as_ref().unwrap();
        for k in 0..3 {
            assert!(phi.values_at(k).iter().all(|&v| v == 0.0));
        }
        assert!(face.density.terminal().iter().all(|&q| q == 1.0));
    }

    #[test]
    fn face_defining_identity_nodewise() {
        let tree = build_tree(5, 1.0).unwrap();
        let payoff: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 151 + 19) % 71) as f64 / 13.0 - 2.5)
            .collect();
        let x = TerminalPayoff::new(&tree, payoff).unwrap();
        for env in [
            RiskEnvelope::kappa(0.5),
            RiskEnvelope::CVaR(0.4),
            RiskEnvelope::ReferenceOnly,
        ] {
            for t in [0usize, 2] {
                let face = exposed_face(&tree, &x, &env, t).unwrap();
                let weighted: Vec<f64> = x
                    .values()
                    .iter()
                    .zip(face.density.terminal())
                    .map(|(xi, qi)| -xi * qi)
                    .collect();
                let lhs = tree.condense(5, &weighted, t).unwrap();
                let rhs = coherent(&tree, &x, &env, t).unwrap().values;
                for (a, b) in lhs.iter().zip(&rhs) {
                    assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn implied_kernel_matches_selected_kernel() {
        let tree = build_tree(4, 1.0).unwrap();
        let payoff: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let x = TerminalPayoff::new(&tree, payoff).unwrap();
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.4), 1).unwrap();
        let selected = face.worst_kernel.clone().unwrap();
        let face_no_kernel = ExposedFaceElement {
            worst_kernel: None,
            density: face.density.clone(),
            conditioning_level: 1,
        };
        let implied = face_no_kernel.implied_kernel(&tree);
        for k in 0..4 {
            for node in 0..tree.nodes_at(k) {
                assert_relative_eq!(
                    implied.scalar(k, node),
                    selected.scalar(k, node),
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn subdifferential_homogeneous_direction() {
        let tree = build_tree(4, 0.5).unwrap();
        let x = brownian_payoff(&tree);
        let report = subdifferential_bounds(
            &tree,
            &x,
            &x,
            &RiskEnvelope::kappa(0.5),
            0,
            &[1e-3, -1e-3, 1e-4, -1e-4],
            1 << 16,
        )
        .unwrap();
        assert_relative_eq!(report.upper[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(report.lower[0], 0.25, max_relative = 1e-12);
        for probe in &report.probes {
            assert!(probe.within_bounds);
            assert_relative_eq!(probe.quotients[0], 0.25, max_relative = 1e-9);
        }
    }

    #[test]
    fn subdifferential_zero_direction() {
        let tree = build_tree(3, 0.75).unwrap();
        let x = brownian_payoff(&tree);
        let y = TerminalPayoff::constant(&tree, 0.0).unwrap();
        let report = subdifferential_bounds(
            &tree,
            &x,
            &y,
            &RiskEnvelope::kappa(0.5),
            0,
            &[1e-3, -1e-3],
            1 << 16,
        )
        .unwrap();
        assert_eq!(report.upper[0], 0.0);
        assert_eq!(report.lower[0], 0.0);
    }

    #[test]
    fn subdifferential_cash_direction() {
        let tree = build_tree(3, 0.75).unwrap();
        let payoff: Vec<f64> = (0..8).map(|i| ((i * 5) % 7) as f64 / 2.0 - 1.0).collect();
        let x = TerminalPayoff::new(&tree, payoff).unwrap();
        let c = 1.75;
        let y = TerminalPayoff::constant(&tree, c).unwrap();
        let report = subdifferential_bounds(
            &tree,
            &x,
            &y,
            &RiskEnvelope::kappa(0.5),
            0,
            &[1e-3, -1e-3, 1e-4, -1e-4],
            1 << 16,
        )
        .unwrap();
        assert_relative_eq!(report.upper[0], -c, max_relative = 1e-12);
        assert_relative_eq!(report.lower[0], -c, max_relative = 1e-12);
        for probe in &report.probes {
            assert!(probe.within_bounds);
        }
    }

    #[test]
    fn subdifferential_ties_enumerate_constant_payoff() {
        // constant X makes every node a tie; face spans all vertex densities
        let tree = build_tree(2, 0.5).unwrap();
        let x = TerminalPayoff::constant(&tree, 1.0).unwrap();
        let y = brownian_payoff(&tree);
        let report = subdifferential_bounds(
            &tree,
            &x,
            &y,
            &RiskEnvelope::kappa(0.5),
            0,
            &[1e-3, -1e-3],
            1 << 16,
        )
        .unwrap();
        assert_eq!(report.tie_nodes, 3);
        // directional derivative bounds are +/- C_0(±B) = kappa T
        assert_relative_eq!(report.upper[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(report.lower[0], -0.25, max_relative = 1e-12);
        for probe in &report.probes {
            assert!(probe.within_bounds);
        }
    }

    #[test]
    fn loss_process_kappa_market() {
        let tree = build_tree(3, 0.5).unwrap();
        let (model, policy) = kappa_market(&tree);
        let w = crate::market::wealth(&tree, &model, &policy, 0.0).unwrap();
        let x = TerminalPayoff::from_adapted(&tree, &w.values).unwrap();
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.5), 0).unwrap();
        let ell = doleans_loss_process(&tree, &model, &face).unwrap();
        for k in 0..3 {
            for node in 0..tree.nodes_at(k) {
                let expect = 0.5 * face.density.values.scalar(k, node);
                assert_relative_eq!(ell.value(k, node)[0], expect, max_relative = 1e-14);
                assert!(ell.value(k, node)[0] > 0.0);
            }
        }
        // E = all nodes of one level: mu(E) = kappa dt by the mean-one
        // martingale property of the density
        for k in 0..3 {
            let mu: f64 = (0..tree.nodes_at(k))
                .map(|n| tree.node_probability(k) * ell.value(k, n)[0] * tree.dt())
                .sum();
            assert_relative_eq!(mu, 0.5 * tree.dt(), max_relative = 1e-13);
        }
    }

    #[test]
    fn loss_process_reference_is_negative_drift() {
        let tree = build_tree(3, 0.5).unwrap();
        let model = AssetModel::single(0.7, 1.0, 0.0).unwrap();
        let face = ExposedFaceElement {
            worst_kernel: Some(PredictableProcess::zeros(&tree, 1)),
            density: DensityProcess::reference(&tree, 0),
            conditioning_level: 0,
        };
        let ell = doleans_loss_process(&tree, &model, &face).unwrap();
        for k in 0..3 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(ell.value(k, node)[0], -0.7);
            }
        }
    }

    #[test]
    fn doleans_measure_representation_identity() {
        let tree = build_tree(4, 1.0).unwrap();
        let model = AssetModel::new(vec![
            AssetSpec {
                drift: Rule::Constant(0.3),
                diffusion: Rule::Constant(1.1),
                s0: 1.0,
            },
            AssetSpec {
                drift: Rule::PerLevel(vec![0.0, 0.2, -0.1, 0.4]),
                diffusion: Rule::Constant(0.6),
                s0: 2.0,
            },
        ])
        .unwrap();
        let policy = Policy::constant(&tree, &[1.0, -0.5]);
        let w = crate::market::wealth(&tree, &model, &policy, 0.0).unwrap();
        let x = TerminalPayoff::from_adapted(&tree, &w.values).unwrap();
        let t_star = 1;
        let face = exposed_face(&tree, &x, &RiskEnvelope::kappa(0.4), t_star).unwrap();
        let ell = doleans_loss_process(&tree, &model, &face).unwrap();

        // mu(E) = E[-X^{1_E e_i} Q] for deterministic pseudo-random node sets
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for asset in 0..2 {
            for _ in 0..25 {
                let mut picked = Vec::new();
                for k in 0..4 {
                    for node in 0..tree.nodes_at(k) {
                        if next() % 3 == 0 {
                            picked.push((k, node));
                        }
                    }
                }
                let mut shares = PredictableProcess::zeros(&tree, 2);
                for &(k, n) in &picked {
                    let mut row = vec![0.0; 2];
                    row[asset] = 1.0;
                    shares.set(k, n, &row);
                }
                let indicator_wealth =
                    crate::market::wealth(&tree, &model, &Policy::new(shares), 0.0).unwrap();
                let weighted: Vec<f64> = indicator_wealth
                    .terminal()
                    .iter()
                    .zip(face.density.terminal())
                    .map(|(x, q)| -x * q)
                    .collect();
                let mu = tree.expectation(4, &weighted).unwrap();
                let mut direct = 0.0;
                for &(k, n) in &picked {
                    direct +=
                        tree.node_probability(k) * ell.value(k, n)[asset] * tree.dt();
                }
                assert_relative_eq!(mu, direct, max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn kappa_contribution_report_anchor() {
        let tree = build_tree(4, 0.5).unwrap();
        let (model, policy) = kappa_market(&tree);
        let report = marginal_and_total_contributions(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::kappa(0.5),
            0,
        )
        .unwrap();
        assert_relative_eq!(report.deviation_values[0], 0.25, max_relative = 1e-13);
        assert!(report.max_aggregation_residual() <= 1e-9, "{report:?}");
        // delta = b (1 - D) vanishes when b = 0
        for k in 0..4 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(report.delta.value(k, node)[0], 0.0);
            }
        }
    }

    #[test]
    fn zero_policy_contribution() {
        let tree = build_tree(3, 0.75).unwrap();
        let model = AssetModel::single(0.2, 1.0, 1.0).unwrap();
        let policy = Policy::constant(&tree, &[0.0]);
        let report = marginal_and_total_contributions(
            &tree,
            &model,
            &policy,
            2.0,
            &RiskEnvelope::kappa(0.5),
            0,
        )
        .unwrap();
        assert_relative_eq!(report.coherent_values[0], -2.0, max_relative = 1e-14);
        assert!(report.max_aggregation_residual() <= 1e-12);
        for k in 0..3 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(report.contrib_deviation.value(k, node)[0], 0.0);
            }
        }
    }

    #[test]
    fn deterministic_drift_delta_has_zero_conditional_mean() {
        let tree = build_tree(4, 1.0).unwrap();
        let model = AssetModel::single(1.0, 1.0, 0.0).unwrap();
        let policy = Policy::constant(&tree, &[1.0]);
        let report = marginal_and_total_contributions(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::kappa(0.5),
            0,
        )
        .unwrap();
        // path-wise delta is nonzero ...
        let nonzero = (0..4).any(|k| {
            (0..tree.nodes_at(k)).any(|n| report.delta.value(k, n)[0].abs() > 1e-12)
        });
        assert!(nonzero);
        // ... but its conditional mean vanishes and both aggregations hold
        assert!(report.max_delta_conditional_mean() <= 1e-12, "{report:?}");
        assert!(report.max_aggregation_residual() <= 1e-9, "{report:?}");
    }

    #[test]
    fn aggregation_holds_for_cvar_faces() {
        let tree = build_tree(4, 1.0).unwrap();
        let model = AssetModel::single(0.1, 0.9, 1.0).unwrap();
        let policy = Policy::constant(&tree, &[2.0]);
        let report = marginal_and_total_contributions(
            &tree,
            &model,
            &policy,
            0.5,
            &RiskEnvelope::CVaR(0.5),
            1,
        )
        .unwrap();
        assert!(report.max_aggregation_residual() <= 1e-9, "{report:?}");
    }

    #[test]
    fn contribution_consistency_kappa() {
        let tree = build_tree(4, 0.5).unwrap();
        let (model, policy) = kappa_market(&tree);
        let report = contribution_time_consistency(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::kappa(0.5),
            0,
            1,
        )
        .unwrap();
        assert!(report.time_consistent_family);
        assert_eq!(report.max_kernel_gap, 0.0);
        assert!(report.max_normalized_marginal_gap <= 1e-12);
        assert_eq!(report.max_correspondence_residual, 0.0);
        // raw marginals differ by the density restart factor
        assert!(report.max_raw_marginal_gap > 0.0);
    }

    #[test]
    fn contribution_consistency_cvar_reports_gaps() {
        // policy (3, 1) on the unit-vol market generates the terminal
        // payoffs (2, 1, -1, -2), the counterexample where the greedy faces
        // at t1 = 0 and t2 = 1 disagree on level 1
        let tree = build_tree(2, 0.5).unwrap();
        let model = AssetModel::single(0.0, 1.0, 0.0).unwrap();
        let policy = Policy::per_level(&tree, &[vec![3.0], vec![1.0]]).unwrap();
        let w = crate::market::wealth(&tree, &model, &policy, 0.0).unwrap();
        assert_eq!(w.terminal(), &[2.0, 1.0, -1.0, -2.0]);
        let report = contribution_time_consistency(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::CVaR(0.5),
            0,
            1,
        )
        .unwrap();
        assert!(!report.time_consistent_family);
        assert!(report.max_kernel_gap > 1.0, "{report:?}");
    }

    #[test]
    fn contribution_consistency_reference() {
        let tree = build_tree(3, 0.75).unwrap();
        let model = AssetModel::single(0.4, 1.0, 0.0).unwrap();
        let policy = Policy::constant(&tree, &[1.0]);
        let report = contribution_time_consistency(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::ReferenceOnly,
            0,
            2,
        )
        .unwrap();
        assert_eq!(report.max_kernel_gap, 0.0);
        assert_eq!(report.max_raw_marginal_gap, 0.0);
        // m^C = -b and m^D = 0 for the reference envelope
        let r = marginal_and_total_contributions(
            &tree,
            &model,
            &policy,
            0.0,
            &RiskEnvelope::ReferenceOnly,
            0,
        )
        .unwrap();
        for k in 0..3 {
            for node in 0..tree.nodes_at(k) {
                assert_eq!(r.ell.value(k, node)[0], -0.4);
                assert_eq!(r.marginal_deviation.value(k, node)[0], 0.0);
            }
        }
    }

    #[test]
    fn z_identity_kappa_example() {
        let tree = build_tree(4, 0.5).unwrap();
        let (model, policy) = kappa_market(&tree);
        let report =
            z_identity_check(&tree, &model, &policy, 0.0, &RiskEnvelope::kappa(0.5), 0).unwrap();
        assert!(report.max_residual_alt <= 1e-12, "{report:?}");
        assert!(report.max_residual_def <= 1e-12, "{report:?}");
        assert_eq!(report.max_ub_term, 0.0);
        assert!(report.max_driver_residual <= 1e-15);
    }

    #[test]
    fn z_identity_zero_policy_and_zero_kappa() {
        let tree = build_tree(3, 0.75).unwrap();
        let model = AssetModel::single(0.0, 1.0, 0.0).unwrap();
        let zero_policy = Policy::constant(&tree, &[0.0]);
        let report = z_identity_check(
            &tree,
            &model,
            &zero_policy,
            0.0,
            &RiskEnvelope::kappa(0.5),
            0,
        )
        .unwrap();
        assert_eq!(report.max_residual_alt, 0.0);

        let policy = Policy::constant(&tree, &[1.0]);
        let report =
            z_identity_check(&tree, &model, &policy, 0.0, &RiskEnvelope::kappa(0.0), 0).unwrap();
        assert!(report.max_residual_alt <= 1e-15);
        let d = deviation(
            &tree,
            &TerminalPayoff::from_adapted(
                &tree,
                &crate::market::wealth(&tree, &model, &policy, 0.0)
                    .unwrap()
                    .values,
            )
            .unwrap(),
            &RiskEnvelope::kappa(0.0),
            0,
        )
        .unwrap();
        assert_eq!(d.values[0], 0.0);
    }

    #[test]
    fn z_identity_rejects_cvar() {
        let tree = build_tree(2, 0.5).unwrap();
        let (model, policy) = kappa_market(&tree);
        assert!(matches!(
            z_identity_check(&tree, &model, &policy, 0.0, &RiskEnvelope::CVaR(0.5), 0),
            Err(Error::UnsupportedEnvelope { .. })
        ));
    }

    #[test]
    fn static_stddev_identity_cases() {
        let p = StaticPortfolio::new(
            vec![1.0, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let r = static_stddev_contribution(&p).unwrap();
        assert_relative_eq!(r.total, 2.0f64.sqrt(), max_relative = 1e-15);
        for c in &r.contributions {
            assert_relative_eq!(*c, 1.0 / 2.0f64.sqrt(), max_relative = 1e-15);
        }

        let p = StaticPortfolio::new(
            vec![1.0, 0.0],
            vec![vec![4.0, 0.5], vec![0.5, 2.0]],
        )
        .unwrap();
        let r = static_stddev_contribution(&p).unwrap();
        assert_relative_eq!(r.total, 2.0, max_relative = 1e-15);
        assert_relative_eq!(r.contributions[0], 2.0, max_relative = 1e-15);
        assert_eq!(r.contributions[1], 0.0);
    }

    #[test]
    fn static_stddev_scaling_and_euler() {
        let cov = vec![vec![2.0, 0.3, 0.1], vec![0.3, 1.0, -0.2], vec![0.1, -0.2, 1.5]];
        let w = vec![0.5, -0.25, 1.0];
        let base = static_stddev_contribution(&StaticPortfolio::new(w.clone(), cov.clone()).unwrap())
            .unwrap();
        let doubled = static_stddev_contribution(
            &StaticPortfolio::new(w.iter().map(|v| 2.0 * v).collect(), cov).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(doubled.total, 2.0 * base.total, max_relative = 1e-14);
        for (a, b) in doubled.contributions.iter().zip(&base.contributions) {
            assert_relative_eq!(*a, 2.0 * b, max_relative = 1e-13);
        }
        let sum: f64 = base.contributions.iter().sum();
        assert_relative_eq!(sum, base.total, max_relative = 1e-12);
    }

    #[test]
    fn static_stddev_rejects_bad_covariance() {
        assert!(matches!(
            static_stddev_contribution(
                &StaticPortfolio::new(vec![1.0, 1.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]])
                    .unwrap()
            ),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(StaticPortfolio::new(
            vec![1.0, 1.0],
            vec![vec![1.0, 0.5], vec![0.4, 1.0]]
        )
        .is_err());
    }

    #[test]
    fn conditional_mean_of_face_density_stays_one() {
        let tree = build_tree(4, 1.0).unwrap();
        let payoff: Vec<f64> = (0..16).map(|i| ((i * 11) % 9) as f64 - 4.0).collect();
        let x = TerminalPayoff::new(&tree, payoff).unwrap();
        for env in [RiskEnvelope::kappa(0.5), RiskEnvelope::CVaR(0.5)] {
            let face = exposed_face(&tree, &x, &env, 2).unwrap();
            let cond = cond_expectation_terminal(
                &tree,
                &TerminalPayoff::new(&tree, face.density.terminal().to_vec()).unwrap(),
                2,
            )
            .unwrap();
            for v in &cond {
                assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
            }
        }
    }
}
