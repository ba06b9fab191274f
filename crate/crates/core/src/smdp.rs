//! Finite truncation of the batch-service queue's average-cost SMDP.
//!
//! States are queue lengths `0..=s_max` plus an aggregated overflow state at
//! index `s_max + 1`. Decisions are taken at embedded epochs: a batch
//! completion, or an arrival to an idle server. Transitions out of the states
//! beyond `s_max` are lumped onto the overflow state, which is charged an
//! abstract cost rate `c_o` on top of the stage cost at `s_max`.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::profile::{traffic_intensity, PoissonIter, ServiceProfile, Weights, Workload};
use crate::scalar::Scalar;

/// Poisson mass beyond this tail is folded into the overflow lump, keeping
/// transition rows exactly stochastic. Near the resolution of the cumulative
/// sum, so the fold adds no visible overflow mass of its own.
const PMF_TAIL_TOL: f64 = 1e-16;

/// Hard cap on stored Poisson support, reached only for absurd `lambda * tau`.
const PMF_SUPPORT_CAP: usize = 4_000_000;

/// Index layout of the truncated state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpace {
    s_max: usize,
    b_max: usize,
}

impl StateSpace {
    pub fn new(s_max: usize, b_max: usize) -> Result<Self> {
        if b_max < 1 {
            return Err(Error::Config("b_max must be >= 1".into()));
        }
        if s_max < b_max {
            return Err(Error::Config(format!(
                "s_max = {s_max} must be at least b_max = {b_max}"
            )));
        }
        Ok(Self { s_max, b_max })
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    /// Number of states, `s_max + 2`.
    pub fn num_states(&self) -> usize {
        self.s_max + 2
    }

    /// Index of the overflow state.
    pub fn overflow(&self) -> usize {
        self.s_max + 1
    }

    /// Queue length a state stands for; the overflow state counts as `s_max`.
    pub fn queue_len(&self, state: usize) -> usize {
        state.min(self.s_max)
    }

    pub fn max_action(&self, state: usize) -> usize {
        self.queue_len(state).min(self.b_max)
    }

    /// Feasible batch sizes at a state: `0..=min(s, b_max)`, with the full
    /// action set at the overflow state.
    pub fn feasible_actions(&self, state: usize) -> RangeInclusive<usize> {
        0..=self.max_action(state)
    }

    pub fn is_feasible(&self, state: usize, action: usize) -> bool {
        state < self.num_states() && action <= self.max_action(state)
    }
}

/// Truncation parameters: queue cut at `s_max`, abstract overflow cost rate
/// `c_o` (per ms of sojourn time spent after landing in the overflow state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationConfig<F> {
    pub s_max: usize,
    pub c_o: F,
}

impl<F: Scalar> TruncationConfig<F> {
    pub fn new(s_max: usize, c_o: F) -> Result<Self> {
        if !c_o.is_finite() || c_o < F::zero() {
            return Err(Error::Config(format!(
                "c_o must be finite and >= 0, got {c_o}"
            )));
        }
        Ok(Self { s_max, c_o })
    }
}

/// Arrival-count distribution during one batch service, truncated where the
/// tail drops below [`PMF_TAIL_TOL`].
#[derive(Debug, Clone)]
struct ArrivalDist<F> {
    probs: Vec<F>,
    /// prefix[k] = probs[0] + .. + probs[k]
    prefix: Vec<F>,
}

impl<F: Scalar> ArrivalDist<F> {
    fn for_mean(mean: F) -> Self {
        let tol = F::from_f64_lossy(PMF_TAIL_TOL);
        let mut probs = Vec::new();
        let mut prefix = Vec::new();
        let mut cum = F::zero();
        let half_ulp = F::epsilon() / F::from_f64_lossy(2.0);
        for p in PoissonIter::new(mean) {
            cum = cum + p;
            probs.push(p);
            prefix.push(cum);
            if F::one() - cum < tol || probs.len() >= PMF_SUPPORT_CAP {
                break;
            }
            // Past the mode the terms only shrink; once they fall below the
            // accumulator's resolution the sum can never advance again.
            if p < cum * half_ulp && F::from_usize_lossy(probs.len()) > mean {
                break;
            }
        }
        Self { probs, prefix }
    }

    /// Cumulative probability of at most `k` arrivals, saturating past the
    /// stored support.
    fn cdf(&self, k: usize) -> F {
        self.prefix[k.min(self.prefix.len() - 1)]
    }

    fn prob(&self, k: usize) -> F {
        self.probs.get(k).copied().unwrap_or_else(F::zero)
    }
}

/// The truncated average-cost SMDP with materialized cost and sojourn tables.
///
/// Transition rows are not stored densely: rows for `a >= 1` share the
/// per-action Poisson vector plus an overflow lump, so memory grows as
/// `b_max * s_max` rather than `s_max^2`.
#[derive(Debug, Clone)]
pub struct FiniteSmdp<F> {
    profile: ServiceProfile<F>,
    workload: Workload<F>,
    weights: Weights<F>,
    trunc: TruncationConfig<F>,
    space: StateSpace,
    /// Expected sojourn time by action; index 0 holds the waiting case `1/lambda`.
    sojourn_by_action: Vec<F>,
    /// Adapted cost `c'(s, a)`, flat over `state * (b_max + 1) + action`.
    cost: Vec<F>,
    arrivals: Vec<ArrivalDist<F>>,
}

/// Feasible actions at a state: `{0, .., min(s, b_max)}`, treating the
/// overflow state as queue length `s_max`.
pub fn feasible_actions(state: usize, s_max: usize, b_max: usize) -> RangeInclusive<usize> {
    0..=state.min(s_max).min(b_max)
}

/// Adapted stage cost `c'(s, a)`: expected cost accrued until the next
/// decision epoch, including the abstract overflow charge at the overflow
/// state.
pub fn stage_cost<F: Scalar>(
    state: usize,
    action: usize,
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
    weights: &Weights<F>,
    trunc: &TruncationConfig<F>,
) -> Result<F> {
    let space = StateSpace::new(trunc.s_max, profile.b_max())?;
    if !space.is_feasible(state, action) {
        return Err(Error::Domain(format!(
            "action {action} infeasible at state {state} (feasible: 0..={})",
            space.max_action(state.min(space.overflow()))
        )));
    }
    let lambda = workload.lambda();
    let queue = F::from_usize_lossy(space.queue_len(state));
    let holding = if action == 0 {
        // E[integral of s(t) dt] over an Exp(lambda) wait.
        queue / lambda
    } else {
        let tau = profile.latency(action);
        queue * tau + lambda * tau * tau / F::from_f64_lossy(2.0)
    };
    let energy = if action == 0 {
        F::zero()
    } else {
        profile.energy(action)
    };
    let mut cost = weights.w1 / lambda * holding + weights.w2 * energy;
    if state == space.overflow() {
        let sojourn = if action == 0 {
            F::one() / lambda
        } else {
            profile.latency(action)
        };
        cost = cost + trunc.c_o * sojourn;
    }
    Ok(cost)
}

/// Builds the fully materialized truncated model.
pub fn build_truncated<F: Scalar>(
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
    weights: &Weights<F>,
    trunc: &TruncationConfig<F>,
) -> Result<FiniteSmdp<F>> {
    let intensity = traffic_intensity(profile, workload);
    if !intensity.stable {
        return Err(Error::Saturated {
            rho: intensity.rho.to_f64_lossy(),
        });
    }
    TruncationConfig::new(trunc.s_max, trunc.c_o)?;
    let space = StateSpace::new(trunc.s_max, profile.b_max())?;
    let lambda = workload.lambda();

    let mut sojourn_by_action = Vec::with_capacity(space.b_max() + 1);
    sojourn_by_action.push(F::one() / lambda);
    for a in 1..=space.b_max() {
        sojourn_by_action.push(profile.latency(a));
    }

    let arrivals = (1..=space.b_max())
        .map(|a| ArrivalDist::for_mean(lambda * profile.latency(a)))
        .collect();

    let stride = space.b_max() + 1;
    let mut cost = vec![F::zero(); space.num_states() * stride];
    for state in 0..space.num_states() {
        for action in space.feasible_actions(state) {
            cost[state * stride + action] =
                stage_cost(state, action, profile, workload, weights, trunc)?;
        }
    }

    Ok(FiniteSmdp {
        profile: *profile,
        workload: *workload,
        weights: *weights,
        trunc: *trunc,
        space,
        sojourn_by_action,
        cost,
        arrivals,
    })
}

impl<F: Scalar> FiniteSmdp<F> {
    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn profile(&self) -> &ServiceProfile<F> {
        &self.profile
    }

    pub fn workload(&self) -> &Workload<F> {
        &self.workload
    }

    pub fn weights(&self) -> &Weights<F> {
        &self.weights
    }

    pub fn truncation(&self) -> &TruncationConfig<F> {
        &self.trunc
    }

    fn check_feasible(&self, state: usize, action: usize) -> Result<()> {
        if !self.space.is_feasible(state, action) {
            return Err(Error::Domain(format!(
                "action {action} infeasible at state {state}"
            )));
        }
        Ok(())
    }

    /// Expected sojourn time `y(s, a)` in ms.
    pub fn sojourn(&self, _state: usize, action: usize) -> F {
        self.sojourn_by_action[action]
    }

    /// Adapted cost `c'(s, a)`.
    pub fn adapted_cost(&self, state: usize, action: usize) -> F {
        debug_assert!(self.space.is_feasible(state, action));
        self.cost[state * (self.space.b_max() + 1) + action]
    }

    /// Expected holding area (requests x ms) accrued until the next epoch.
    pub fn expected_holding(&self, state: usize, action: usize) -> F {
        let lambda = self.workload.lambda();
        let queue = F::from_usize_lossy(self.space.queue_len(state));
        if action == 0 {
            queue / lambda
        } else {
            let tau = self.profile.latency(action);
            queue * tau + lambda * tau * tau / F::from_f64_lossy(2.0)
        }
    }

    /// Energy charged per epoch: the batch energy, zero when waiting.
    pub fn action_energy(&self, action: usize) -> F {
        if action == 0 {
            F::zero()
        } else {
            self.profile.energy(action)
        }
    }

    /// Probability lumped onto the overflow state by row `(s, a)`.
    pub fn overflow_lump(&self, state: usize, action: usize) -> F {
        debug_assert!(self.space.is_feasible(state, action));
        if action == 0 {
            let goes_to_overflow = state >= self.space.s_max();
            return if goes_to_overflow {
                F::one()
            } else {
                F::zero()
            };
        }
        let dist = &self.arrivals[action - 1];
        let reach = self.space.s_max() - self.space.queue_len(state) + action;
        (F::one() - dist.cdf(reach)).max(F::zero())
    }

    /// Self-transition probability `m'(s | s, a)`.
    pub fn self_transition(&self, state: usize, action: usize) -> F {
        debug_assert!(self.space.is_feasible(state, action));
        if state == self.space.overflow() {
            if action == 0 {
                return F::one();
            }
            return self.overflow_lump(state, action);
        }
        if action == 0 {
            return F::zero();
        }
        self.arrivals[action - 1].prob(action)
    }

    /// Dense transition row `m'(. | s, a)` over all states.
    pub fn transition_row(&self, state: usize, action: usize) -> Result<Vec<F>> {
        self.check_feasible(state, action)?;
        let mut row = vec![F::zero(); self.space.num_states()];
        self.for_each_transition(state, action, |j, p| row[j] = row[j] + p);
        Ok(row)
    }

    /// Visits the nonzero entries of row `(s, a)`.
    pub fn for_each_transition(
        &self,
        state: usize,
        action: usize,
        mut visit: impl FnMut(usize, F),
    ) {
        debug_assert!(self.space.is_feasible(state, action));
        let overflow = self.space.overflow();
        if action == 0 {
            let next = if state < self.space.s_max() {
                state + 1
            } else {
                overflow
            };
            visit(next, F::one());
            return;
        }
        let base = self.space.queue_len(state) - action;
        let dist = &self.arrivals[action - 1];
        let reach = self.space.s_max() - base;
        let kk = reach.min(dist.probs.len() - 1);
        for (k, &p) in dist.probs[..=kk].iter().enumerate() {
            visit(base + k, p);
        }
        let lump = (F::one() - dist.cdf(reach)).max(F::zero());
        if lump > F::zero() {
            visit(overflow, lump);
        }
    }

    /// Inner product of row `(s, a)` with a value vector; the RVI hot path.
    pub fn row_dot(&self, state: usize, action: usize, values: &[F]) -> F {
        debug_assert!(self.space.is_feasible(state, action));
        debug_assert_eq!(values.len(), self.space.num_states());
        let overflow = self.space.overflow();
        if action == 0 {
            let next = if state < self.space.s_max() {
                state + 1
            } else {
                overflow
            };
            return values[next];
        }
        let base = self.space.queue_len(state) - action;
        let dist = &self.arrivals[action - 1];
        let reach = self.space.s_max() - base;
        let kk = reach.min(dist.probs.len() - 1);
        let mut acc = F::zero();
        for (p, v) in dist.probs[..=kk].iter().zip(&values[base..=base + kk]) {
            acc = acc + *p * *v;
        }
        let lump = (F::one() - dist.cdf(reach)).max(F::zero());
        acc + lump * values[overflow]
    }

    /// Stored pieces of a service row: the first reachable state, the
    /// in-range arrival probabilities, and the overflow lump.
    pub(crate) fn row_parts(&self, state: usize, action: usize) -> (usize, &[F], F) {
        debug_assert!(action >= 1 && self.space.is_feasible(state, action));
        let base = self.space.queue_len(state) - action;
        let dist = &self.arrivals[action - 1];
        let reach = self.space.s_max() - base;
        let kk = reach.min(dist.probs.len() - 1);
        let lump = (F::one() - dist.cdf(reach)).max(F::zero());
        (base, &dist.probs[..=kk], lump)
    }

    /// Probability of exactly `k` arrivals while serving a batch of `action`.
    pub fn arrival_prob(&self, action: usize, k: usize) -> F {
        debug_assert!(action >= 1 && action <= self.space.b_max());
        self.arrivals[action - 1].prob(k)
    }

    /// Cumulative arrival probability `P[N <= k]` while serving `action`.
    pub fn arrival_cdf(&self, action: usize, k: usize) -> F {
        debug_assert!(action >= 1 && action <= self.space.b_max());
        self.arrivals[action - 1].cdf(k)
    }

    /// Samples the next state of row `(s, a)` by inverting the stored
    /// cumulative arrival probabilities, so draws follow the materialized row
    /// exactly (the numerical tail is part of the overflow lump).
    pub fn sample_next_state(&self, state: usize, action: usize, u: F) -> usize {
        debug_assert!(self.space.is_feasible(state, action));
        let overflow = self.space.overflow();
        if action == 0 {
            return if state < self.space.s_max() {
                state + 1
            } else {
                overflow
            };
        }
        let base = self.space.queue_len(state) - action;
        let dist = &self.arrivals[action - 1];
        let reach = self.space.s_max() - base;
        let kk = reach.min(dist.probs.len() - 1);
        // First index with cdf >= u, by binary search over the prefix sums.
        let slice = &dist.prefix[..=kk];
        let mut lo = 0usize;
        let mut hi = slice.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if slice[mid] < u {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo <= kk {
            base + lo
        } else {
            overflow
        }
    }
}
