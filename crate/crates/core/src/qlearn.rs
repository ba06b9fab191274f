//! Model-free relative-value Q-learning on the discretized MDP.
//!
//! Costs are negated into rewards so the textbook max-form update applies
//! unchanged; a fixed reference entry is subtracted each step to keep the
//! average-reward iterates bounded.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::discretize::DtMdp;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::smdp::StateSpace;

/// Tabular action values over the feasible state-action pairs only;
/// infeasible pairs have no slot at all.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<F> {
    space: StateSpace,
    offsets: Vec<usize>,
    values: Vec<F>,
    /// Reference pair whose value is the subtracted bias.
    reference: (usize, usize),
}

impl<F: Scalar> QTable<F> {
    /// Zero-initialized table with the reference pair at `(0, 0)`.
    pub fn new(space: StateSpace) -> Self {
        let mut offsets = Vec::with_capacity(space.num_states() + 1);
        offsets.push(0);
        for s in 0..space.num_states() {
            offsets.push(offsets[s] + space.max_action(s) + 1);
        }
        let len = *offsets.last().expect("nonempty");
        Self {
            space,
            offsets,
            values: vec![F::zero(); len],
            reference: (0, 0),
        }
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn reference(&self) -> (usize, usize) {
        self.reference
    }

    fn slot(&self, state: usize, action: usize) -> usize {
        assert!(
            self.space.is_feasible(state, action),
            "no Q entry for infeasible pair ({state}, {action})"
        );
        self.offsets[state] + action
    }

    pub fn get(&self, state: usize, action: usize) -> F {
        self.values[self.slot(state, action)]
    }

    pub fn set(&mut self, state: usize, action: usize, value: F) {
        let slot = self.slot(state, action);
        self.values[slot] = value;
    }

    /// Greedy action and value at a state, ties broken toward the smallest
    /// action.
    pub fn greedy(&self, state: usize) -> (usize, F) {
        let mut best_action = 0;
        let mut best = F::neg_infinity();
        for a in self.space.feasible_actions(state) {
            let v = self.get(state, a);
            if v > best {
                best = v;
                best_action = a;
            }
        }
        (best_action, best)
    }

    /// The greedy policy of the current table.
    pub fn greedy_policy(&self) -> Policy {
        let actions = (0..self.space.num_states())
            .map(|s| self.greedy(s).0)
            .collect();
        Policy::new(actions, self.space.b_max()).expect("greedy actions are feasible")
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// Training controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QLearnConfig {
    /// Base exploration probability; step `n` explores with probability
    /// `epsilon0 / sqrt(n)`.
    pub epsilon0: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Snapshot the greedy policy every this many steps.
    pub snapshot_every: usize,
}

impl QLearnConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0 && self.epsilon0 <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon0 must lie in (0, 1], got {}",
                self.epsilon0
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.snapshot_every < 1 {
            return Err(Error::Config("snapshot_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws the next state from `m~(. | s, a)` and returns it with the negated
/// cost rate as the reward.
pub fn sample_transition<F: Scalar, R: RngExt>(
    env: &DtMdp<F>,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<(usize, F)> {
    if !env.space().is_feasible(state, action) {
        return Err(Error::Domain(format!(
            "action {action} infeasible at state {state}"
        )));
    }
    let u = F::from_f64_lossy(rng.random::<f64>());
    let next = env.sample_row(state, action, u);
    Ok((next, -env.cost_rate(state, action)))
}

/// One relative Q-learning update:
/// `Q(s,a) += rate * [reward + max_b Q(s',b) - Q(ref) - Q(s,a)]`,
/// the max running over feasible actions only.
pub fn q_update<F: Scalar>(
    q: &mut QTable<F>,
    state: usize,
    action: usize,
    next_state: usize,
    reward: F,
    learning_rate: F,
) {
    let (_, next_best) = q.greedy(next_state);
    let (ref_s, ref_a) = q.reference();
    let bias = q.get(ref_s, ref_a);
    let current = q.get(state, action);
    let updated = current + learning_rate * (reward + next_best - bias - current);
    q.set(state, action, updated);
}

/// Greedy policy recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub iteration: usize,
    pub policy: Policy,
    /// Exploration steps taken since the previous snapshot.
    pub exploration_events: u64,
}

#[derive(Debug, Clone)]
pub struct TrainResult<F> {
    pub policy: Policy,
    pub snapshots: Vec<PolicySnapshot>,
    pub q: QTable<F>,
    pub exploration_events: u64,
}

/// Runs a single epsilon-greedy trajectory from a random start state.
///
/// Step `n` (1-based) explores with probability `epsilon0 / sqrt(n)`. The
/// learning rate follows the `1 / sqrt(k + 2)` schedule counted per
/// state-action pair (`k` = prior updates of that pair), so the first update
/// of any entry uses `1 / sqrt(2)`; a pair that has waited a long time
/// between visits still takes a meaningful corrective step. Fully
/// deterministic given the seed.
pub fn train<F: Scalar>(env: &DtMdp<F>, config: &QLearnConfig) -> Result<TrainResult<F>> {
    config.validate()?;
    let space = env.space();
    let mut rng = Pcg64::seed_from_u64(config.seed);
    let mut q = QTable::new(space);
    let mut updates: Vec<Vec<u64>> = (0..space.num_states())
        .map(|s| vec![0u64; space.max_action(s) + 1])
        .collect();
    let mut state = rng.random_range(0..space.num_states());
    let mut snapshots = Vec::new();
    let mut explored_total = 0u64;
    let mut explored_since_snapshot = 0u64;

    for n in 1..=config.iterations {
        let threshold = config.epsilon0 / (n as f64).sqrt();
        let explore = rng.random::<f64>() <= threshold;
        let action = if explore {
            explored_total += 1;
            explored_since_snapshot += 1;
            let feasible = space.max_action(state) + 1;
            rng.random_range(0..feasible)
        } else {
            q.greedy(state).0
        };
        let (next_state, reward) = sample_transition(env, state, action, &mut rng)?;
        updates[state][action] += 1;
        let rate = F::from_f64_lossy(1.0 / ((updates[state][action] + 1) as f64).sqrt());
        q_update(&mut q, state, action, next_state, reward, rate);
        state = next_state;
        if n % config.snapshot_every == 0 {
            snapshots.push(PolicySnapshot {
                iteration: n,
                policy: q.greedy_policy(),
                exploration_events: explored_since_snapshot,
            });
            explored_since_snapshot = 0;
        }
    }

    Ok(TrainResult {
        policy: q.greedy_policy(),
        snapshots,
        q,
        exploration_events: explored_total,
    })
}

/// Fraction of states on which two policies agree, optionally weighted.
///
/// With weights (e.g. a stationary distribution, or an indicator of the
/// states that matter) the result is `sum_w[agree] / sum_w`.
pub fn policy_agreement<F: Scalar>(p1: &Policy, p2: &Policy, weights: Option<&[F]>) -> Result<F> {
    if p1.num_states() != p2.num_states() {
        return Err(Error::Domain(format!(
            "policies cover {} and {} states",
            p1.num_states(),
            p2.num_states()
        )));
    }
    if let Some(w) = weights {
        if w.len() != p1.num_states() {
            return Err(Error::Domain(format!(
                "weight vector over {} states does not match {}",
                w.len(),
                p1.num_states()
            )));
        }
        let total: F = w.iter().copied().sum();
        if total.is_nan() || total <= F::zero() {
            return Err(Error::Domain("weights must have positive total".into()));
        }
        let agree: F = (0..p1.num_states())
            .filter(|&s| p1.action(s) == p2.action(s))
            .map(|s| w[s])
            .sum();
        Ok(agree / total)
    } else {
        let agree = (0..p1.num_states())
            .filter(|&s| p1.action(s) == p2.action(s))
            .count();
        Ok(F::from_usize_lossy(agree) / F::from_usize_lossy(p1.num_states()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::to_dtmdp;
    use crate::profile::{ServiceProfile, Weights, Workload};
    use crate::smdp::{build_truncated, TruncationConfig};

    fn small_env() -> DtMdp<f64> {
        let profile = ServiceProfile::new(1.0, 0.5, 2.0, 1.0, 2).unwrap();
        let workload = Workload::from_rho(&profile, 0.6).unwrap();
        let weights = Weights::new(1.0, 0.5).unwrap();
        let trunc = TruncationConfig { s_max: 4, c_o: 5.0 };
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        to_dtmdp(model, 0.9).unwrap()
    }

    #[test]
    fn qtable_has_no_slots_for_infeasible_pairs() {
        let space = StateSpace::new(4, 2).unwrap();
        let q: QTable<f64> = QTable::new(space);
        // 1 + 2 + 3 + 3 + 3 + 3 slots for states 0..=5.
        assert_eq!(q.values().len(), 15);
    }

    #[test]
    #[should_panic(expected = "no Q entry")]
    fn qtable_rejects_infeasible_access() {
        let space = StateSpace::new(4, 2).unwrap();
        let q: QTable<f64> = QTable::new(space);
        let _ = q.get(1, 2);
    }

    #[test]
    fn zero_table_greedy_policy_waits_everywhere() {
        let space = StateSpace::new(6, 3).unwrap();
        let q: QTable<f64> = QTable::new(space);
        let policy = q.greedy_policy();
        assert!(policy.actions().iter().all(|&a| a == 0));
    }

    #[test]
    fn q_update_on_zero_table_scales_reward() {
        let space = StateSpace::new(4, 2).unwrap();
        let mut q: QTable<f64> = QTable::new(space);
        let rate = 1.0 / 2.0f64.sqrt();
        q_update(&mut q, 2, 1, 3, -4.0, rate);
        assert!((q.get(2, 1) + 4.0 / 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn q_update_fixed_point_is_stable() {
        let space = StateSpace::new(4, 2).unwrap();
        let mut q: QTable<f64> = QTable::new(space);
        // All zeros with zero reward is a fixed point of the operator.
        q_update(&mut q, 1, 1, 2, 0.0, 0.5);
        assert_eq!(q.get(1, 1), 0.0);
    }

    #[test]
    fn sampling_rejects_infeasible_actions() {
        let env = small_env();
        let mut rng = Pcg64::seed_from_u64(1);
        assert!(sample_transition(&env, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn sampling_reward_is_negated_cost() {
        let env = small_env();
        let mut rng = Pcg64::seed_from_u64(1);
        let (_, reward) = sample_transition(&env, 3, 2, &mut rng).unwrap();
        assert_eq!(reward, -env.cost_rate(3, 2));
        assert!(env.cost_rate(3, 2) > 0.0);
        assert!(reward < 0.0);
    }

    #[test]
    fn sampling_deterministic_row_always_lands_there() {
        let env = small_env();
        let mut rng = Pcg64::seed_from_u64(7);
        // Waiting at state 0 either stays (diagonal mass) or moves to 1.
        for _ in 0..200 {
            let (next, _) = sample_transition(&env, 0, 0, &mut rng).unwrap();
            assert!(next == 0 || next == 1);
        }
    }

    #[test]
    fn sampled_frequencies_match_transformed_rows() {
        let env = small_env();
        let mut rng = Pcg64::seed_from_u64(42);
        for (s, a) in [(2usize, 1usize), (3, 2), (5, 2), (0, 0)] {
            let row = env.transition_row(s, a).unwrap();
            let n = 100_000;
            let mut counts = vec![0u64; row.len()];
            for _ in 0..n {
                let (next, _) = sample_transition(&env, s, a, &mut rng).unwrap();
                counts[next] += 1;
            }
            // Chi-square against the row at the 99% level, with the critical
            // value from the Wilson-Hilferty approximation.
            let mut chi2 = 0.0;
            let mut dof = 0usize;
            for (j, &p) in row.iter().enumerate() {
                let expected = p * n as f64;
                if expected < 5.0 {
                    continue;
                }
                dof += 1;
                let diff = counts[j] as f64 - expected;
                chi2 += diff * diff / expected;
            }
            let dof = (dof.max(2) - 1) as f64;
            let z99 = 2.3263478740408408;
            let crit = dof * (1.0 - 2.0 / (9.0 * dof) + z99 * (2.0 / (9.0 * dof)).sqrt()).powi(3);
            assert!(
                chi2 < crit,
                "chi2 {chi2} exceeds 99% critical value {crit} for row ({s}, {a})"
            );
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let env = small_env();
        let config = QLearnConfig {
            epsilon0: 0.5,
            iterations: 20_000,
            seed: 99,
            snapshot_every: 5_000,
        };
        let r1 = train(&env, &config).unwrap();
        let r2 = train(&env, &config).unwrap();
        assert_eq!(r1.policy, r2.policy);
        assert_eq!(r1.q.values(), r2.q.values());
        assert_eq!(r1.snapshots.len(), 4);
        assert_eq!(r1.snapshots, r2.snapshots);
    }

    #[test]
    fn exploration_frequency_tracks_the_decay_schedule() {
        let env = small_env();
        let config = QLearnConfig {
            epsilon0: 0.8,
            iterations: 320_000,
            seed: 3,
            snapshot_every: 40_000,
        };
        let result = train(&env, &config).unwrap();
        // Expected explorations over a window [lo, hi) follow the integral of
        // the eps0/sqrt(n) schedule: eps0 * 2 * (sqrt(hi) - sqrt(lo)).
        for (w, lo) in [(1usize, 40_000usize), (4, 160_000), (7, 280_000)] {
            let observed = result.snapshots[w].exploration_events as f64;
            let hi = (lo + 40_000) as f64;
            let expected = config.epsilon0 * 2.0 * (hi.sqrt() - (lo as f64).sqrt());
            let sd = expected.sqrt();
            assert!(
                (observed - expected).abs() < 6.0 * sd + 1.0,
                "window {w}: observed {observed}, expected {expected:.1} (sd {sd:.1})"
            );
        }
    }

    #[test]
    fn q_values_stay_bounded() {
        let env = small_env();
        // Largest cost rate bounds the rewards.
        let space = env.space();
        let mut r_max = 0.0f64;
        for s in 0..space.num_states() {
            for a in space.feasible_actions(s) {
                r_max = r_max.max(env.cost_rate(s, a).abs());
            }
        }
        let config = QLearnConfig {
            epsilon0: 0.5,
            iterations: 500_000,
            seed: 11,
            snapshot_every: 500_000,
        };
        let result = train(&env, &config).unwrap();
        let band = 5.0 * r_max;
        assert!(
            result.q.values().iter().all(|&v| v.abs() <= band),
            "a Q entry escaped the numeric band {band}"
        );
    }

    #[test]
    fn greedy_policy_converges_to_enumeration_optimum_on_toy_chain() {
        // 3-state instance; compare against exhaustive policy enumeration
        // evaluated through long-run simulated average reward.
        let profile = ServiceProfile::new(1.0, 0.5, 2.0, 1.0, 1).unwrap();
        let workload = Workload::from_rho(&profile, 0.6).unwrap();
        let weights = Weights::new(1.0, 0.7).unwrap();
        let trunc = TruncationConfig { s_max: 1, c_o: 3.0 };
        let model = build_truncated(&profile, &workload, &weights, &trunc).unwrap();
        let env = to_dtmdp(model, 0.9).unwrap();

        let config = QLearnConfig {
            epsilon0: 1.0,
            iterations: 2_000_000,
            seed: 5,
            snapshot_every: 2_000_000,
        };
        let result = train(&env, &config).unwrap();

        let mut best_g = f64::INFINITY;
        let mut best_actions = vec![0, 0, 0];
        for a1 in 0..=1usize {
            for a2 in 0..=1usize {
                let actions = vec![0, a1, a2];
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|s| env.transition_row(s, actions[s]).unwrap())
                    .collect();
                let mu = crate::solver::stationary_of_rows(&rows).unwrap();
                let g: f64 = (0..3).map(|s| mu[s] * env.cost_rate(s, actions[s])).sum();
                if g < best_g {
                    best_g = g;
                    best_actions = actions;
                }
            }
        }
        assert_eq!(result.policy.actions(), best_actions.as_slice());
    }

    #[test]
    fn agreement_metric() {
        let a = Policy::new(vec![0, 1, 2, 2], 2).unwrap();
        let b = Policy::new(vec![0, 1, 1, 2], 2).unwrap();
        let same: f64 = policy_agreement(&a, &a, None).unwrap();
        assert_eq!(same, 1.0);
        let frac: f64 = policy_agreement(&a, &b, None).unwrap();
        assert!((frac - 0.75).abs() < 1e-15);
        // Weighted: only count states 2 and 3.
        let w = [0.0, 0.0, 1.0, 1.0];
        let frac: f64 = policy_agreement(&a, &b, Some(&w)).unwrap();
        assert!((frac - 0.5).abs() < 1e-15);
        let c = Policy::new(vec![0, 1, 2, 2, 2, 2], 2).unwrap();
        assert!(policy_agreement::<f64>(&a, &c, None).is_err());
    }
}
