//! Cross-module property tests: invariants that tie the envelope, BSDE,
//! measure and market layers together on randomized inputs.

use proptest::prelude::*;

use risktree::bsde::solve_tree;
use risktree::envelope::{robust_expectation_brute, Driver, KernelSet, RiskEnvelope};
use risktree::market::{AssetModel, AssetSpec, Policy, Rule};
use risktree::measure::{coherent, cvar_worst_density, deviation};
use risktree::market::wealth as wealth_fn;
use risktree::tree::{build_tree, cond_expectation_terminal, TerminalPayoff};

mod helpers {
    use super::*;

    pub fn payoff(tree_leaves: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0..5.0f64, tree_leaves)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Backward induction equals the brute-force dual over vertex densities
    /// for random interval envelopes on small trees.
    #[test]
    fn dual_oracle_on_random_intervals(
        values in helpers::payoff(8),
        lo in -0.8..0.0f64,
        hi in 0.0..0.8f64,
    ) {
        let tree = build_tree(3, 1.0).unwrap();
        let x = TerminalPayoff::new(&tree, values).unwrap();
        let env = RiskEnvelope::KernelGenerated(KernelSet::Interval {
            lo: Rule::Constant(lo),
            hi: Rule::Constant(hi),
        });
        let induction = coherent(&tree, &x, &env, 0).unwrap().values[0];
        let brute = robust_expectation_brute(&tree, &env, &x, 0, 1 << 16).unwrap()[0];
        prop_assert!((induction - brute).abs() <= 1e-9 * brute.abs().max(1.0));
    }

    /// Comparison: leaf-wise ordered terminals give ordered solutions at
    /// every node under a sublinear driver.
    #[test]
    fn bsde_comparison(values in helpers::payoff(16), bumps in helpers::payoff(16)) {
        let tree = build_tree(4, 1.0).unwrap();
        let lo = TerminalPayoff::new(&tree, values.clone()).unwrap();
        let hi_values: Vec<f64> = values.iter().zip(&bumps).map(|(v, b)| v + b.abs()).collect();
        let hi = TerminalPayoff::new(&tree, hi_values).unwrap();
        let driver = Driver::kappa(0.6);
        let sol_lo = solve_tree(&tree, &lo, &driver).unwrap();
        let sol_hi = solve_tree(&tree, &hi, &driver).unwrap();
        for k in 0..=4 {
            for node in 0..tree.nodes_at(k) {
                prop_assert!(sol_lo.y.scalar(k, node) <= sol_hi.y.scalar(k, node) + 1e-12);
            }
        }
    }

    /// Correspondence round trip is the identity node-wise for every
    /// envelope kind and conditioning level.
    #[test]
    fn correspondence_round_trip(values in helpers::payoff(16), t in 0usize..5, pick in 0usize..3) {
        let tree = build_tree(4, 1.0).unwrap();
        let x = TerminalPayoff::new(&tree, values).unwrap();
        let env = match pick {
            0 => RiskEnvelope::kappa(0.4),
            1 => RiskEnvelope::CVaR(0.35),
            _ => RiskEnvelope::ReferenceOnly,
        };
        let d = deviation(&tree, &x, &env, t).unwrap().values;
        let neg = TerminalPayoff::new(&tree, x.map(|v| -v)).unwrap();
        let e_neg = cond_expectation_terminal(&tree, &neg, t).unwrap();
        let e_pos = cond_expectation_terminal(&tree, &x, t).unwrap();
        for n in 0..tree.nodes_at(t) {
            let back = (d[n] + e_neg[n]) + e_pos[n];
            prop_assert!((back - d[n]).abs() <= 1e-12 * d[n].abs().max(1.0));
        }
    }

    /// CVaR greedy densities are admissible: within the cap, mean one
    /// conditionally, and consistent before the conditioning level.
    #[test]
    fn cvar_densities_admissible(values in helpers::payoff(16), t in 0usize..4, lambda in 0.05..1.0f64) {
        let tree = build_tree(4, 1.0).unwrap();
        let x = TerminalPayoff::new(&tree, values).unwrap();
        let density = cvar_worst_density(&tree, &x, lambda, t).unwrap();
        let cap = 1.0 / lambda;
        for &q in density.terminal() {
            prop_assert!((-1e-12..=cap + 1e-9).contains(&q));
        }
        let cond = cond_expectation_terminal(
            &tree,
            &TerminalPayoff::new(&tree, density.terminal().to_vec()).unwrap(),
            t,
        )
        .unwrap();
        for v in &cond {
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }
        for k in 0..=t {
            for node in 0..tree.nodes_at(k) {
                prop_assert!((density.values.scalar(k, node) - 1.0).abs() <= 1e-12);
            }
        }
    }

    /// Wealth is jointly linear in the policy and the initial capital.
    #[test]
    fn wealth_linearity(
        u in proptest::collection::vec(-3.0..3.0f64, 2),
        v in proptest::collection::vec(-3.0..3.0f64, 2),
        x0 in -2.0..2.0f64,
        y0 in -2.0..2.0f64,
    ) {
        let tree = build_tree(4, 1.0).unwrap();
        let model = AssetModel::new(vec![
            AssetSpec { drift: Rule::Constant(0.2), diffusion: Rule::Constant(1.1), s0: 1.0 },
            AssetSpec { drift: Rule::Constant(-0.1), diffusion: Rule::Constant(0.7), s0: 2.0 },
        ]).unwrap();
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let wu = wealth_fn(&tree, &model, &Policy::constant(&tree, &u), x0).unwrap();
        let wv = wealth_fn(&tree, &model, &Policy::constant(&tree, &v), y0).unwrap();
        let ws = wealth_fn(&tree, &model, &Policy::constant(&tree, &sum), x0 + y0).unwrap();
        for k in 0..=4 {
            for node in 0..tree.nodes_at(k) {
                let lhs = ws.values.scalar(k, node);
                let rhs = wu.values.scalar(k, node) + wv.values.scalar(k, node);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}
