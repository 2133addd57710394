//! Regression Monte Carlo backend for the BSDE, for settings the exact tree
//! cannot reach (fine time grids, and by extension multi-dimensional
//! drivers).
//!
//! Backward least-squares scheme on simulated Gaussian paths:
//! `Z_k` is the regression of the centered `(Y_{k+1} - E_k[Y_{k+1}]) dB / dt`
//! on basis features of the state (same conditional expectation as the raw
//! target, far less noise through sublinear drivers), and `Y_k` the
//! regression of `Y_{k+1}` plus `g_k(Z_k) dt`.
//! Regressions are ridge-stabilized with a fixed penalty of `1e-10` relative
//! to the Gram trace, which keeps degenerate designs (the constant state at
//! the initial step) solvable and deterministic.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::envelope::Driver;
use crate::error::{Error, Result};

/// Hard cap on `path_count * steps`.
pub const MAX_SAMPLES: u64 = 200_000_000;

/// Relative ridge penalty applied to every regression Gram matrix.
pub const RIDGE_RELATIVE: f64 = 1e-10;

/// Seeded ensemble of Brownian increments, `path_count x steps`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub steps: usize,
    pub path_count: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        self.increments[path * self.steps + step]
    }

    /// Cumulative Brownian path including the initial zero
    /// (length `steps + 1`).
    pub fn brownian_path(&self, path: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut acc = 0.0;
        out.push(acc);
        for k in 0..self.steps {
            acc += self.increment(path, k);
            out.push(acc);
        }
        out
    }
}

/// Draw a reproducible ensemble of Gaussian increments scaled by
/// `sqrt(dt)`; identical seeds give bit-identical ensembles.
pub fn simulate_paths(
    seed: u64,
    steps: usize,
    path_count: usize,
    horizon: f64,
) -> Result<PathEnsemble> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    if path_count < 2 {
        return Err(Error::InvalidParameter("path_count must be >= 2".into()));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "horizon must be a positive finite real, got {horizon}"
        )));
    }
    let samples = steps as u64 * path_count as u64;
    if samples > MAX_SAMPLES {
        return Err(Error::Capacity {
            what: "path ensemble samples",
            requested: samples,
            limit: MAX_SAMPLES,
        });
    }
    let dt = horizon / steps as f64;
    let scale = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let increments: Vec<f64> = (0..samples)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(PathEnsemble {
        steps,
        path_count,
        horizon,
        dt,
        seed,
        increments,
    })
}

/// Polynomial feature map of the Brownian state.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    pub fn feature_count(&self) -> usize {
        self.degree + 1
    }

    fn fill(&self, state: f64, out: &mut [f64]) {
        let mut v = 1.0;
        for slot in out.iter_mut() {
            *slot = v;
            v *= state;
        }
    }
}

/// Output of the regression solver.
#[derive(Debug, Clone)]
pub struct McSolution {
    /// Estimate of `Y_0` from the backward recursion.
    pub y0: f64,
    /// Standard error from the cross-sectional variance of the per-path
    /// accumulated value `xi + sum_k g(Z_k) dt`.
    pub std_error: f64,
    /// Per-path `Y` values, `path_count x (steps + 1)` row-major.
    pub y: Vec<f64>,
    /// Per-path `Z` values, `path_count x steps` row-major.
    pub z: Vec<f64>,
}

/// Ridge-regularized least squares: returns fitted values of the target on
/// the design. The design is indexed `path * m + j`.
fn regress_fitted(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>> {
    let m = design.ncols();
    let mut gram = design.transpose() * design;
    let trace: f64 = (0..m).map(|j| gram[(j, j)]).sum();
    let ridge = RIDGE_RELATIVE * trace / m as f64;
    for j in 0..m {
        gram[(j, j)] += ridge;
    }
    let rhs = design.transpose() * target;
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| {
        let max_d = (0..m).map(|j| gram[(j, j)]).fold(f64::NEG_INFINITY, f64::max);
        let min_d = (0..m).map(|j| gram[(j, j)]).fold(f64::INFINITY, f64::min);
        Error::SingularRegression {
            step,
            condition: max_d / min_d.max(f64::MIN_POSITIVE),
        }
    })?;
    let beta = chol.solve(&rhs);
    Ok(design * beta)
}

/// Solve the BSDE with terminal condition `terminal(path)` approximately by
/// backward least squares. The driver is evaluated at node 0 of each level,
/// so only node-independent (deterministic) generators are meaningful here.
pub fn solve_mc(
    ensemble: &PathEnsemble,
    terminal: &dyn Fn(&[f64]) -> f64,
    driver: &Driver,
    basis: &RegressionBasis,
) -> Result<McSolution> {
    let n = ensemble.steps;
    let paths = ensemble.path_count;
    let m = basis.feature_count();
    if paths < m {
        return Err(Error::InvalidParameter(format!(
            "need at least {m} paths for {m} basis features"
        )));
    }

    // Brownian states per step, path-major
    let mut states = vec![0.0; paths * (n + 1)];
    for p in 0..paths {
        let mut acc = 0.0;
        for k in 0..n {
            acc += ensemble.increment(p, k);
            states[p * (n + 1) + k + 1] = acc;
        }
    }

    let mut y = vec![0.0; paths * (n + 1)];
    let mut z = vec![0.0; paths * n];
    let mut driver_acc = vec![0.0; paths];
    let mut path_buf = vec![0.0; n + 1];
    for p in 0..paths {
        path_buf.copy_from_slice(&states[p * (n + 1)..(p + 1) * (n + 1)]);
        let v = terminal(&path_buf);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "terminal rule output",
                level: n,
                node: p,
            });
        }
        y[p * (n + 1) + n] = v;
    }
    let terminal_values: Vec<f64> = (0..paths).map(|p| y[p * (n + 1) + n]).collect();

    let mut feature_row = vec![0.0; m];
    for k in (0..n).rev() {
        let mut design = DMatrix::zeros(paths, m);
        for p in 0..paths {
            basis.fill(states[p * (n + 1) + k], &mut feature_row);
            for j in 0..m {
                if !feature_row[j].is_finite() {
                    return Err(Error::NonFinite {
                        what: "basis feature",
                        level: k,
                        node: p,
                    });
                }
                design[(p, j)] = feature_row[j];
            }
        }
        let y_target = DVector::from_fn(paths, |p, _| y[p * (n + 1) + k + 1]);
        let y_fit = regress_fitted(&design, &y_target, k)?;
        // centered Z target: E[(Y - E_k[Y]) dB | F_k] = E[Y dB | F_k], and
        // the centering strips the conditional-mean noise out of Z
        let z_target = DVector::from_fn(paths, |p, _| {
            (y[p * (n + 1) + k + 1] - y_fit[p]) * ensemble.increment(p, k) / ensemble.dt
        });
        let z_fit = regress_fitted(&design, &z_target, k)?;
        for p in 0..paths {
            let zk = z_fit[p];
            let g = driver.evaluate(k, 0, zk);
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "driver output",
                    level: k,
                    node: p,
                });
            }
            z[p * n + k] = zk;
            y[p * (n + 1) + k] = y_fit[p] + g * ensemble.dt;
            driver_acc[p] += g * ensemble.dt;
        }
    }

    let y0 = (0..paths).map(|p| y[p * (n + 1)]).sum::<f64>() / paths as f64;
    // cross-sectional variance of xi + sum g(Z) dt
    let v: Vec<f64> = (0..paths)
        .map(|p| terminal_values[p] + driver_acc[p])
        .collect();
    let mean_v: f64 = v.iter().sum::<f64>() / paths as f64;
    let var: f64 =
        v.iter().map(|x| (x - mean_v).powi(2)).sum::<f64>() / (paths as f64 - 1.0);
    let std_error = (var / paths as f64).sqrt();

    Ok(McSolution {
        y0,
        std_error,
        y,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ensembles_are_reproducible() {
        let a = simulate_paths(42, 50, 1000, 0.5).unwrap();
        let b = simulate_paths(42, 50, 1000, 0.5).unwrap();
        assert_eq!(a.increments, b.increments);
        let c = simulate_paths(43, 50, 1000, 0.5).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn tiny_ensemble_shape() {
        let e = simulate_paths(1, 1, 2, 1.0).unwrap();
        assert_eq!(e.steps, 1);
        assert_eq!(e.path_count, 2);
        assert_eq!(e.brownian_path(0).len(), 2);
        assert_eq!(e.brownian_path(0)[0], 0.0);
    }

    #[test]
    fn capacity_and_parameter_checks() {
        assert!(matches!(
            simulate_paths(1, 100_000, 10_000, 1.0),
            Err(Error::Capacity { .. })
        ));
        assert!(simulate_paths(1, 0, 10, 1.0).is_err());
        assert!(simulate_paths(1, 10, 1, 1.0).is_err());
        assert!(simulate_paths(1, 10, 10, -1.0).is_err());
    }

    #[test]
    fn increment_moments_within_five_sigma() {
        let e = simulate_paths(7, 20, 20_000, 0.5).unwrap();
        let n = e.increments.len() as f64;
        let mean: f64 = e.increments.iter().sum::<f64>() / n;
        let var: f64 = e.increments.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mean_sigma = (e.dt / n).sqrt();
        assert!(mean.abs() <= 5.0 * mean_sigma, "mean {mean}");
        let var_sigma = e.dt * (2.0 / (n - 1.0)).sqrt();
        assert!((var - e.dt).abs() <= 5.0 * var_sigma, "var {var} vs dt {}", e.dt);
    }

    #[test]
    fn constant_terminal_recovers_constant() {
        // exact up to the documented ridge penalty, which shifts the fit by
        // O(1e-10) per regression step
        let e = simulate_paths(5, 10, 500, 1.0).unwrap();
        let sol = solve_mc(&e, &|_| 2.5, &Driver::kappa(0.5), &RegressionBasis::new(2)).unwrap();
        assert_relative_eq!(sol.y0, 2.5, max_relative = 1e-8);
        assert!(sol.std_error <= 1e-8);
    }

    #[test]
    fn zero_driver_martingale_estimate() {
        let e = simulate_paths(11, 20, 20_000, 0.5).unwrap();
        let sol = solve_mc(
            &e,
            &|path| -path[path.len() - 1],
            &Driver::zero(),
            &RegressionBasis::new(2),
        )
        .unwrap();
        assert!(sol.y0.abs() <= 4.0 * sol.std_error.max(1e-6), "{}", sol.y0);
    }

    #[test]
    fn overflowing_basis_is_rejected() {
        // a long horizon makes |B| ~ 10..40, so b^400 overflows to infinity
        let e = simulate_paths(3, 4, 512, 400.0).unwrap();
        let result = solve_mc(
            &e,
            &|path| -path[path.len() - 1],
            &Driver::kappa(0.01),
            &RegressionBasis::new(400),
        );
        assert!(matches!(result, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn kappa_driver_estimate_converges() {
        let e = simulate_paths(18, 50, 100_000, 0.5).unwrap();
        let sol = solve_mc(
            &e,
            &|path| -path[path.len() - 1],
            &Driver::kappa(0.5),
            &RegressionBasis::new(2),
        )
        .unwrap();
        assert!(
            (sol.y0 - 0.25).abs() <= 0.0025,
            "y0 {} err {}",
            sol.y0,
            (sol.y0 - 0.25).abs()
        );
        assert!((sol.y0 - 0.25).abs() <= 3.0 * sol.std_error);
        // Z regresses to -1
        let n = e.steps;
        let mid = n / 2;
        let mean_z: f64 =
            (0..e.path_count).map(|p| sol.z[p * n + mid]).sum::<f64>() / e.path_count as f64;
        assert!((mean_z + 1.0).abs() <= 0.05, "mean z {mean_z}");
    }
}
