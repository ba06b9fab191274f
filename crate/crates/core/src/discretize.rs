//! Transformation of the finite continuous-time SMDP into an equivalent
//! discrete-time MDP.
//!
//! Costs become rates, `c~(s, a) = c'(s, a) / y(s, a)`, and transition rows
//! are rescaled around a strengthened diagonal controlled by the step
//! constant `eta`. Both models share the same optimal average cost, so the
//! discrete-time solution transfers back unchanged.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::smdp::{FiniteSmdp, StateSpace};

/// Tolerance separating float noise from formula bugs when the transformed
/// diagonal grazes zero.
const DIAG_SLACK: f64 = 1e-12;

/// Largest admissible discretization constant for a model:
/// `min(1/lambda, min_a { tau_a / (1 - p_a), tau_a / cdf_a(a) })`.
///
/// Pairs with a self-transition probability of one impose no bound and are
/// skipped, as the defining denominator prescribes.
pub fn eta_bound<F: Scalar>(model: &FiniteSmdp<F>) -> F {
    let mut bound = F::one() / model.workload().lambda();
    for a in 1..=model.space().b_max() {
        let tau = model.sojourn(0, a);
        let p_self = model.arrival_prob(a, a);
        if p_self < F::one() {
            bound = bound.min(tau / (F::one() - p_self));
        }
        let cdf = model.arrival_cdf(a, a);
        if cdf > F::zero() {
            bound = bound.min(tau / cdf);
        }
    }
    bound
}

/// The discrete-time MDP obtained from a finite SMDP.
///
/// Transition rows are derived on demand from the underlying SMDP rows; only
/// the cost rates are materialized.
#[derive(Debug, Clone)]
pub struct DtMdp<F> {
    smdp: FiniteSmdp<F>,
    eta: F,
    /// `c~(s, a)` flat over `state * (b_max + 1) + action`.
    cost_rate: Vec<F>,
}

/// Discretizes with step `eta = eta_fraction * eta_bound(model)`.
///
/// Larger fractions converge faster in value iteration; the default driver
/// uses 0.99, strictly inside the open bound.
pub fn to_dtmdp<F: Scalar>(model: FiniteSmdp<F>, eta_fraction: F) -> Result<DtMdp<F>> {
    if !eta_fraction.is_finite() || eta_fraction <= F::zero() || eta_fraction >= F::one() {
        return Err(Error::Config(format!(
            "eta_fraction must lie strictly inside (0, 1), got {eta_fraction}"
        )));
    }
    let eta = eta_fraction * eta_bound(&model);
    let space = model.space();
    let stride = space.b_max() + 1;
    let mut cost_rate = vec![F::zero(); space.num_states() * stride];
    let slack = F::from_f64_lossy(DIAG_SLACK);
    for s in 0..space.num_states() {
        for a in space.feasible_actions(s) {
            cost_rate[s * stride + a] = model.adapted_cost(s, a) / model.sojourn(s, a);
            let diag = raw_self_loop(&model, eta, s, a);
            if diag < -slack || diag > F::one() + slack {
                return Err(Error::Numerical(format!(
                    "transformed self-transition {diag} at ({s}, {a}) leaves [0, 1] \
                     beyond float noise"
                )));
            }
        }
    }
    Ok(DtMdp {
        smdp: model,
        eta,
        cost_rate,
    })
}

fn raw_self_loop<F: Scalar>(model: &FiniteSmdp<F>, eta: F, state: usize, action: usize) -> F {
    let y = model.sojourn(state, action);
    F::one() + eta * (model.self_transition(state, action) - F::one()) / y
}

impl<F: Scalar> DtMdp<F> {
    pub fn smdp(&self) -> &FiniteSmdp<F> {
        &self.smdp
    }

    pub fn space(&self) -> StateSpace {
        self.smdp.space()
    }

    pub fn eta(&self) -> F {
        self.eta
    }

    /// Transformed cost `c~(s, a) = c'(s, a) / y(s, a)`.
    pub fn cost_rate(&self, state: usize, action: usize) -> F {
        debug_assert!(self.space().is_feasible(state, action));
        self.cost_rate[state * (self.space().b_max() + 1) + action]
    }

    /// Transformed self-transition `m~(s | s, a)`, clamped into `[0, 1]`
    /// when within float noise of the boundary.
    pub fn self_loop(&self, state: usize, action: usize) -> F {
        raw_self_loop(&self.smdp, self.eta, state, action)
            .max(F::zero())
            .min(F::one())
    }

    /// Dense transformed row `m~(. | s, a)`.
    pub fn transition_row(&self, state: usize, action: usize) -> Result<Vec<F>> {
        let scale = self.eta / self.smdp.sojourn(state, action);
        let mut row = vec![F::zero(); self.space().num_states()];
        for (j, p) in self
            .smdp
            .transition_row(state, action)?
            .into_iter()
            .enumerate()
        {
            if j != state {
                row[j] = scale * p;
            }
        }
        row[state] = self.self_loop(state, action);
        Ok(row)
    }

    /// `sum_j m~(j | s, a) * values[j]`, the value-iteration hot path.
    ///
    /// Algebraically the transformed row mixes the SMDP row with staying put:
    /// `(eta / y) * m'(. | s, a) + (1 - eta / y) * delta_s`.
    pub fn bellman_value(&self, state: usize, action: usize, values: &[F]) -> F {
        let w = self.eta / self.smdp.sojourn(state, action);
        w * self.smdp.row_dot(state, action, values) + (F::one() - w) * values[state]
    }

    /// Maps a uniform draw `u` in `[0, 1)` to a successor state by direct
    /// inversion of the transformed row: the diagonal bucket first, then the
    /// off-diagonal masses in state order, with the overflow bucket
    /// absorbing the residual.
    ///
    /// Note the off-diagonal scale `eta / y` may exceed one; only the total
    /// leaving probability is bounded, so the row cannot be sampled as a
    /// stay-or-move coin flip.
    pub fn sample_row(&self, state: usize, action: usize, u: F) -> usize {
        let space = self.space();
        let overflow = space.overflow();
        let diag = self.self_loop(state, action);
        if u < diag {
            return state;
        }
        if action == 0 {
            return if state < space.s_max() {
                state + 1
            } else {
                overflow
            };
        }
        let mut v = u - diag;
        let w = self.eta / self.smdp.sojourn(state, action);
        let (base, probs, _lump) = self.smdp.row_parts(state, action);
        for (k, &p) in probs.iter().enumerate() {
            let j = base + k;
            if j == state {
                continue;
            }
            v = v - w * p;
            if v < F::zero() {
                return j;
            }
        }
        overflow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{ServiceProfile, Weights, Workload};
    use crate::smdp::{build_truncated, TruncationConfig};

    fn p4_model(rho: f64, s_max: usize, c_o: f64) -> FiniteSmdp<f64> {
        let profile = ServiceProfile::googlenet_p4();
        let workload = Workload::from_rho(&profile, rho).unwrap();
        let weights = Weights::new(1.0, 1.0).unwrap();
        let trunc = TruncationConfig::new(s_max, c_o).unwrap();
        build_truncated(&profile, &workload, &weights, &trunc).unwrap()
    }

    #[test]
    fn eta_bound_limit_cases() {
        // Every service-side candidate exceeds 1/lambda = 0.5, which wins.
        let profile = ServiceProfile::new(0.01, 0.6, 1.0, 0.0, 8).unwrap();
        let workload = Workload::new(2.0).unwrap();
        let weights = Weights::new(1.0, 0.0).unwrap();
        let trunc = TruncationConfig::new(16, 0.0).unwrap();
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        assert_eq!(eta_bound(&model), 0.5);

        // Vanishing arrivals: 1/lambda blows up while the service candidates
        // collapse onto tau_a, so the bound approaches tau_1 from above.
        let profile = ServiceProfile::new(10.0, 5.0, 1.0, 0.0, 4).unwrap();
        let workload = Workload::new(1e-6).unwrap();
        let trunc = TruncationConfig::new(8, 0.0).unwrap();
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        let b = eta_bound(&model);
        assert!(
            (15.0..15.01).contains(&b),
            "bound {b} should sit just above tau_1"
        );
    }

    #[test]
    fn eta_bound_matches_bruteforce_over_all_candidates() {
        let model = p4_model(0.9, 70, 100.0);
        let lambda = model.workload().lambda();
        let mut candidates = vec![1.0 / lambda];
        for a in 1..=32 {
            let tau = model.profile().latency(a);
            let p_aa = model.arrival_prob(a, a);
            if p_aa < 1.0 {
                candidates.push(tau / (1.0 - p_aa));
            }
            candidates.push(tau / model.arrival_cdf(a, a));
        }
        let brute = candidates.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(eta_bound(&model), brute);
    }

    #[test]
    fn to_dtmdp_rejects_bad_fraction() {
        let model = p4_model(0.5, 40, 0.0);
        assert!(to_dtmdp(model.clone(), 0.0).is_err());
        assert!(to_dtmdp(model.clone(), 1.0).is_err());
        assert!(to_dtmdp(model, 0.99).is_ok());
    }

    #[test]
    fn transformed_rows_are_stochastic_with_unit_interval_diagonal() {
        let dt = to_dtmdp(p4_model(0.9, 70, 100.0), 0.99).unwrap();
        for s in 0..dt.space().num_states() {
            for a in dt.space().feasible_actions(s) {
                let row = dt.transition_row(s, a).unwrap();
                let total: f64 = row.iter().sum();
                assert!(
                    (total - 1.0).abs() < 1e-10,
                    "row ({s}, {a}) sums to {total}"
                );
                let d = dt.self_loop(s, a);
                assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    #[test]
    fn diagonal_formula_for_zero_self_transition() {
        let dt = to_dtmdp(p4_model(0.9, 70, 100.0), 0.99).unwrap();
        // Waiting below s_max never stays put, so the diagonal is 1 - eta/y.
        let y = dt.smdp().sojourn(3, 0);
        let expected = 1.0 - dt.eta() / y;
        assert!((dt.self_loop(3, 0) - expected).abs() < 1e-15);
        assert!(expected >= 0.0);
    }

    #[test]
    fn cost_rates_divide_adapted_costs_exactly() {
        let dt = to_dtmdp(p4_model(0.7, 50, 10.0), 0.8).unwrap();
        for s in 0..dt.space().num_states() {
            for a in dt.space().feasible_actions(s) {
                let expected = dt.smdp().adapted_cost(s, a) / dt.smdp().sojourn(s, a);
                assert_eq!(dt.cost_rate(s, a), expected);
            }
        }
    }

    #[test]
    fn transformed_rows_match_elementwise_recomputation() {
        // Smallest legal truncation gives a compact model; rebuild every
        // m~ entry from the definition as the oracle.
        let profile = ServiceProfile::<f64>::new(0.5, 0.25, 2.0, 1.0, 2).unwrap();
        let workload = Workload::from_rho(&profile, 0.6).unwrap();
        let weights = Weights::new(1.0, 0.5).unwrap();
        let trunc = TruncationConfig::new(2, 5.0).unwrap();
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        let dt = to_dtmdp(model.clone(), 0.9).unwrap();
        let eta = dt.eta();
        for s in 0..model.space().num_states() {
            for a in model.space().feasible_actions(s) {
                let m_row = model.transition_row(s, a).unwrap();
                let y = model.sojourn(s, a);
                let got = dt.transition_row(s, a).unwrap();
                for j in 0..m_row.len() {
                    let expected = if j == s {
                        1.0 + eta * (m_row[s] - 1.0) / y
                    } else {
                        eta * m_row[j] / y
                    };
                    assert!((got[j] - expected).abs() < 1e-14, "entry ({s}, {a}) -> {j}");
                }
            }
        }
    }

    #[test]
    fn per_policy_average_cost_survives_discretization() {
        // The transformation preserves each stationary policy's average cost
        // per unit time: the embedded-chain ratio on the SMDP side equals
        // the per-step average on the transformed side.
        let profile = ServiceProfile::<f64>::new(1.0, 0.5, 2.0, 1.0, 1).unwrap();
        let workload = Workload::from_rho(&profile, 0.6).unwrap();
        let weights = Weights::new(1.0, 0.7).unwrap();
        let trunc = TruncationConfig { s_max: 1, c_o: 3.0 };
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        let dt = to_dtmdp(model.clone(), 0.9).unwrap();
        for a1 in 0..=1usize {
            for a2 in 0..=1usize {
                let actions = vec![0, a1, a2];
                let smdp_rows: Vec<Vec<f64>> = (0..3)
                    .map(|s| model.transition_row(s, actions[s]).unwrap())
                    .collect();
                let mu = crate::solver::stationary_of_rows(&smdp_rows).unwrap();
                let cost: f64 = (0..3)
                    .map(|s| mu[s] * model.adapted_cost(s, actions[s]))
                    .sum();
                let time: f64 = (0..3).map(|s| mu[s] * model.sojourn(s, actions[s])).sum();
                let g_smdp = cost / time;

                let dt_rows: Vec<Vec<f64>> = (0..3)
                    .map(|s| dt.transition_row(s, actions[s]).unwrap())
                    .collect();
                let mu_dt = crate::solver::stationary_of_rows(&dt_rows).unwrap();
                let g_dt: f64 = (0..3).map(|s| mu_dt[s] * dt.cost_rate(s, actions[s])).sum();
                assert!(
                    (g_smdp - g_dt).abs() < 1e-9,
                    "policy {actions:?}: {g_smdp} vs {g_dt}"
                );
            }
        }
    }

    #[test]
    fn larger_eta_fraction_converges_at_least_as_fast() {
        let model = p4_model(0.9, 70, 100.0);
        let fast = to_dtmdp(model.clone(), 0.99).unwrap();
        let slow = to_dtmdp(model, 0.5).unwrap();
        let (_, fast_report) =
            crate::solver::relative_value_iteration(&fast, 0.01, 20_000, 0).unwrap();
        let (_, slow_report) =
            crate::solver::relative_value_iteration(&slow, 0.01, 20_000, 0).unwrap();
        assert!(fast_report.converged);
        assert!(
            fast_report.iterations <= slow_report.iterations,
            "eta_fraction 0.99 took {} iterations vs {} at 0.5",
            fast_report.iterations,
            slow_report.iterations
        );
    }

    #[test]
    fn bellman_value_agrees_with_dense_row() {
        let dt = to_dtmdp(p4_model(0.9, 70, 100.0), 0.99).unwrap();
        let n = dt.space().num_states();
        let values: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        for s in [0usize, 5, 42, 70, 71] {
            for a in dt.space().feasible_actions(s) {
                let dense: f64 = dt
                    .transition_row(s, a)
                    .unwrap()
                    .iter()
                    .zip(&values)
                    .map(|(p, v)| p * v)
                    .sum();
                let fast = dt.bellman_value(s, a, &values);
                assert!((dense - fast).abs() < 1e-10);
            }
        }
    }
}
