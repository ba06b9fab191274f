//! Relative value iteration, analytic policy evaluation, and the search for
//! the smallest acceptable truncation.

use std::ops::RangeInclusive;

use serde::Serialize;

use crate::discretize::{to_dtmdp, DtMdp};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::profile::{ServiceProfile, Weights, Workload};
use crate::scalar::Scalar;
use crate::smdp::{build_truncated, FiniteSmdp, TruncationConfig};

/// Iteration controls for one solve, bundled because the truncation search
/// and the sweep drivers pass them around together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RviParams<F> {
    /// Span stopping tolerance on successive value differences.
    pub epsilon: F,
    pub iter_max: usize,
    /// Fraction of the admissible discretization bound to use.
    pub eta_fraction: F,
    /// State whose value is subtracted each iteration.
    pub ref_state: usize,
}

impl<F: Scalar> Default for RviParams<F> {
    fn default() -> Self {
        Self {
            epsilon: F::from_f64_lossy(0.01),
            iter_max: 10_000,
            eta_fraction: F::from_f64_lossy(0.99),
            ref_state: 0,
        }
    }
}

/// Outcome of a relative value iteration run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport<F> {
    /// Average cost per unit time, read off as the converged reference value.
    pub g: F,
    /// Relative values, normalized so the reference state sits at zero.
    pub h: Vec<F>,
    pub iterations: usize,
    pub final_span: F,
    pub converged: bool,
}

struct RviOutcome<F> {
    values: Vec<F>,
    actions: Vec<usize>,
    iterations: usize,
    final_span: F,
    converged: bool,
}

/// Core loop shared by the public solver and the degenerate-chain tests:
/// `J_{n+1}(s) = min_a { q(s, a, J_n) - J_n(ref) }` with a span stopping
/// rule, ties broken toward the smallest action.
fn rvi_core<F: Scalar>(
    num_states: usize,
    epsilon: F,
    iter_max: usize,
    ref_state: usize,
    feasible: impl Fn(usize) -> RangeInclusive<usize>,
    stage_value: impl Fn(usize, usize, &[F]) -> F,
) -> RviOutcome<F> {
    let mut j_prev = vec![F::zero(); num_states];
    let mut j_next = vec![F::zero(); num_states];
    let mut actions = vec![0usize; num_states];
    let mut iterations = 0;
    let mut final_span = F::infinity();
    let mut converged = false;
    while iterations < iter_max {
        iterations += 1;
        let j_ref = j_prev[ref_state];
        for s in 0..num_states {
            let mut best = F::infinity();
            let mut best_action = 0;
            for a in feasible(s) {
                let v = stage_value(s, a, &j_prev) - j_ref;
                if v < best {
                    best = v;
                    best_action = a;
                }
            }
            j_next[s] = best;
            actions[s] = best_action;
        }
        let mut hi = F::neg_infinity();
        let mut lo = F::infinity();
        for s in 0..num_states {
            let d = j_next[s] - j_prev[s];
            hi = hi.max(d);
            lo = lo.min(d);
        }
        final_span = hi - lo;
        std::mem::swap(&mut j_prev, &mut j_next);
        if final_span < epsilon {
            converged = true;
            break;
        }
    }
    RviOutcome {
        values: j_prev,
        actions,
        iterations,
        final_span,
        converged,
    }
}

/// Solves the discrete-time MDP by relative value iteration.
///
/// Starts from the zero value function, stops when the span of successive
/// differences drops below `epsilon` or after `iter_max` iterations. Hitting
/// the cap is reported, not an error; the best policy so far is still
/// returned.
pub fn relative_value_iteration<F: Scalar>(
    dtmdp: &DtMdp<F>,
    epsilon: F,
    iter_max: usize,
    ref_state: usize,
) -> Result<(Policy, SolveReport<F>)> {
    if epsilon.is_nan() || epsilon <= F::zero() {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    if iter_max < 1 {
        return Err(Error::Domain("iter_max must be >= 1".into()));
    }
    let space = dtmdp.space();
    if ref_state >= space.num_states() {
        return Err(Error::Domain(format!(
            "ref_state {ref_state} out of range for {} states",
            space.num_states()
        )));
    }
    let outcome = rvi_core(
        space.num_states(),
        epsilon,
        iter_max,
        ref_state,
        |s| space.feasible_actions(s),
        |s, a, values| dtmdp.cost_rate(s, a) + dtmdp.bellman_value(s, a, values),
    );
    let g = outcome.values[ref_state];
    let h = outcome.values.iter().map(|&v| v - g).collect();
    let policy = Policy::new(outcome.actions, space.b_max())?;
    Ok((
        policy,
        SolveReport {
            g,
            h,
            iterations: outcome.iterations,
            final_span: outcome.final_span,
            converged: outcome.converged,
        },
    ))
}

/// Stationary distribution of an explicit stochastic matrix, given as dense
/// rows.
///
/// The chain must have exactly one recurrent class reachable from state 0
/// (transient states are fine and receive zero mass). Solved by damped power
/// iteration to an L1 residual of 1e-12, falling back to a direct linear
/// solve for the state counts this crate works with.
pub fn stationary_of_rows<F: Scalar>(rows: &[Vec<F>]) -> Result<Vec<F>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Domain("empty chain".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Domain(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        let total: F = row.iter().copied().sum();
        if (total - F::one()).abs() > F::from_f64_lossy(1e-8) {
            return Err(Error::Domain(format!("row {i} is not stochastic: {total}")));
        }
    }

    let adjacency: Vec<Vec<usize>> = rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &p)| p > F::zero())
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let mut recurrent = recurrent_classes(&adjacency);
    let reachable = reachable_from(&adjacency, 0);
    recurrent.retain(|class| class.iter().any(|&s| reachable[s]));
    if recurrent.len() != 1 {
        recurrent.sort_by_key(|c| c[0]);
        return Err(Error::ReducibleChain { classes: recurrent });
    }
    let mut class = recurrent.pop().expect("checked length");
    class.sort_unstable();

    let mu_class = stationary_on_class(rows, &class)?;
    let mut mu = vec![F::zero(); n];
    for (pos, &s) in class.iter().enumerate() {
        mu[s] = mu_class[pos];
    }

    // Invariance check over the full chain, opened up to the scalar's own
    // resolution for narrower float types.
    let tol = F::from_f64_lossy(1e-8).max(F::epsilon() * F::from_f64_lossy(100.0));
    for j in 0..n {
        let image: F = (0..n).map(|i| mu[i] * rows[i][j]).sum();
        if (image - mu[j]).abs() > tol {
            return Err(Error::Numerical(format!(
                "stationary residual {} at state {j} exceeds 1e-8",
                (image - mu[j]).abs()
            )));
        }
    }
    Ok(mu)
}

fn stationary_on_class<F: Scalar>(rows: &[Vec<F>], class: &[usize]) -> Result<Vec<F>> {
    let m = class.len();
    if m == 1 {
        return Ok(vec![F::one()]);
    }
    // Compact row-major restriction; the class is closed so rows stay
    // stochastic.
    let mut p = vec![F::zero(); m * m];
    for (i, &s) in class.iter().enumerate() {
        for (j, &t) in class.iter().enumerate() {
            p[i * m + j] = rows[s][t];
        }
    }

    if let Some(mu) = power_iteration(&p, m) {
        return Ok(mu);
    }
    direct_stationary(&p, m)
}

/// Damped power iteration; the half-lazy step keeps periodic chains from
/// oscillating without changing the fixed point.
fn power_iteration<F: Scalar>(p: &[F], m: usize) -> Option<Vec<F>> {
    let tol = F::from_f64_lossy(1e-12).max(F::epsilon() * F::from_f64_lossy(4.0));
    let half = F::from_f64_lossy(0.5);
    let mut mu = vec![F::one() / F::from_usize_lossy(m); m];
    let mut image = vec![F::zero(); m];
    for _ in 0..20_000 {
        for v in image.iter_mut() {
            *v = F::zero();
        }
        for i in 0..m {
            let w = mu[i];
            if w == F::zero() {
                continue;
            }
            for j in 0..m {
                image[j] = image[j] + w * p[i * m + j];
            }
        }
        let residual: F = mu.iter().zip(&image).map(|(&a, &b)| (a - b).abs()).sum();
        if residual < tol {
            let total: F = image.iter().copied().sum();
            for v in image.iter_mut() {
                *v = *v / total;
            }
            return Some(image);
        }
        for (v, &w) in mu.iter_mut().zip(&image) {
            *v = half * (*v + w);
        }
    }
    None
}

/// Direct solve of `mu P = mu`, `sum mu = 1` by Gaussian elimination with
/// partial pivoting on the transposed system.
fn direct_stationary<F: Scalar>(p: &[F], m: usize) -> Result<Vec<F>> {
    let mut a = vec![F::zero(); m * m];
    let mut b = vec![F::zero(); m];
    for i in 0..m {
        for j in 0..m {
            a[i * m + j] = p[j * m + i] - if i == j { F::one() } else { F::zero() };
        }
    }
    // Normalization replaces the last (redundant) balance equation.
    for j in 0..m {
        a[(m - 1) * m + j] = F::one();
    }
    b[m - 1] = F::one();

    for col in 0..m {
        let pivot_row = (col..m)
            .max_by(|&r1, &r2| {
                a[r1 * m + col]
                    .abs()
                    .partial_cmp(&a[r2 * m + col].abs())
                    .expect("finite pivots")
            })
            .expect("nonempty range");
        if a[pivot_row * m + col].abs() < F::from_f64_lossy(1e-300) {
            return Err(Error::Numerical(
                "singular system while solving for the stationary distribution".into(),
            ));
        }
        if pivot_row != col {
            for j in 0..m {
                a.swap(col * m + j, pivot_row * m + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * m + col];
        for row in col + 1..m {
            let factor = a[row * m + col] / pivot;
            if factor == F::zero() {
                continue;
            }
            for j in col..m {
                a[row * m + j] = a[row * m + j] - factor * a[col * m + j];
            }
            b[row] = b[row] - factor * b[col];
        }
    }
    let mut x = vec![F::zero(); m];
    for row in (0..m).rev() {
        let mut acc = b[row];
        for j in row + 1..m {
            acc = acc - a[row * m + j] * x[j];
        }
        x[row] = acc / a[row * m + row];
    }
    // Scrub float dust and renormalize.
    for v in x.iter_mut() {
        if *v < F::zero() {
            if *v < F::from_f64_lossy(-1e-9) {
                return Err(Error::Numerical(format!(
                    "stationary solve produced negative mass {v}"
                )));
            }
            *v = F::zero();
        }
    }
    let total: F = x.iter().copied().sum();
    for v in x.iter_mut() {
        *v = *v / total;
    }
    Ok(x)
}

fn reachable_from(adjacency: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adjacency.len()];
    let mut queue = vec![start];
    seen[start] = true;
    while let Some(v) = queue.pop() {
        for &w in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push(w);
            }
        }
    }
    seen
}

/// Strongly connected components with no outgoing edges, i.e. the recurrent
/// classes of the chain.
fn recurrent_classes(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let components = strongly_connected_components(adjacency);
    let mut component_of = vec![usize::MAX; adjacency.len()];
    for (c, comp) in components.iter().enumerate() {
        for &v in comp {
            component_of[v] = c;
        }
    }
    components
        .into_iter()
        .enumerate()
        .filter(|(c, comp)| {
            comp.iter()
                .all(|&v| adjacency[v].iter().all(|&w| component_of[w] == *c))
        })
        .map(|(_, mut comp)| {
            comp.sort_unstable();
            comp
        })
        .collect()
}

/// Iterative Tarjan.
fn strongly_connected_components(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut components = Vec::new();
    let mut work: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        work.push((root, 0));
        while let Some((v, child_pos)) = work.pop() {
            if child_pos == 0 {
                index[v] = next_index;
                low[v] = next_index;
                next_index += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            let mut descended = false;
            for (i, &w) in adjacency[v].iter().enumerate().skip(child_pos) {
                if index[w] == usize::MAX {
                    work.push((v, i + 1));
                    work.push((w, 0));
                    descended = true;
                    break;
                }
                if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            }
            if descended {
                continue;
            }
            if low[v] == index[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                components.push(component);
            }
            if let Some(&(parent, _)) = work.last() {
                low[parent] = low[parent].min(low[v]);
            }
        }
    }
    components
}

/// Stationary distribution of the embedded chain induced by a policy.
pub fn stationary_distribution<F: Scalar>(
    policy: &Policy,
    model: &FiniteSmdp<F>,
) -> Result<Vec<F>> {
    check_policy_model(policy, model)?;
    let n = model.space().num_states();
    let rows: Vec<Vec<F>> = (0..n)
        .map(|s| model.transition_row(s, policy.action(s)))
        .collect::<Result<_>>()?;
    stationary_of_rows(&rows)
}

fn check_policy_model<F: Scalar>(policy: &Policy, model: &FiniteSmdp<F>) -> Result<()> {
    if policy.num_states() != model.space().num_states() || policy.b_max() != model.space().b_max()
    {
        return Err(Error::Domain(format!(
            "policy over {} states (b_max {}) does not fit model with {} states (b_max {})",
            policy.num_states(),
            policy.b_max(),
            model.space().num_states(),
            model.space().b_max()
        )));
    }
    Ok(())
}

/// Analytic performance of a policy on the truncated model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport<F> {
    /// Stationary distribution of the embedded decision-epoch chain.
    pub mu: Vec<F>,
    /// Average cost per unit time.
    pub g_pi: F,
    /// Portion of `g_pi` contributed by the overflow state.
    pub delta_pi: F,
    /// Whether `delta_pi` is below the requested tolerance.
    pub acceptable: bool,
    /// Time-average number of requests in the system.
    pub avg_queue_len: F,
    /// Average response time in ms (queue length over arrival rate).
    pub avg_response_time: F,
    /// Average power draw in mJ/ms, i.e. Watt.
    pub avg_power: F,
    /// Requests served per mJ; absent for policies that never serve.
    pub energy_efficiency: Option<F>,
}

/// Evaluates a policy by stationary-distribution averaging: cost rate and
/// overflow contribution, plus the queue/power split of the objective.
pub fn evaluate_policy<F: Scalar>(
    policy: &Policy,
    model: &FiniteSmdp<F>,
    delta: F,
) -> Result<EvalReport<F>> {
    if delta.is_nan() || delta <= F::zero() {
        return Err(Error::Domain(format!("delta must be > 0, got {delta}")));
    }
    let mu = stationary_distribution(policy, model)?;
    let space = model.space();
    let mut cost_rate = F::zero();
    let mut time_rate = F::zero();
    let mut holding_rate = F::zero();
    let mut energy_rate = F::zero();
    for (s, &mu_s) in mu.iter().enumerate() {
        let a = policy.action(s);
        cost_rate = cost_rate + mu_s * model.adapted_cost(s, a);
        time_rate = time_rate + mu_s * model.sojourn(s, a);
        holding_rate = holding_rate + mu_s * model.expected_holding(s, a);
        energy_rate = energy_rate + mu_s * model.action_energy(a);
    }
    let overflow = space.overflow();
    let g_pi = cost_rate / time_rate;
    let delta_pi = mu[overflow] * model.adapted_cost(overflow, policy.action(overflow)) / time_rate;
    let avg_queue_len = holding_rate / time_rate;
    let avg_power = energy_rate / time_rate;
    let lambda = model.workload().lambda();
    Ok(EvalReport {
        acceptable: delta_pi < delta,
        avg_queue_len,
        avg_response_time: avg_queue_len / lambda,
        avg_power,
        energy_efficiency: (avg_power > F::zero()).then(|| lambda / avg_power),
        mu,
        g_pi,
        delta_pi,
    })
}

/// Recognizes the control-limit structure: the server waits strictly below
/// some threshold and serves (a nonzero batch) at every state at or above it,
/// the overflow state counting as queue length `s_max`. Returns the
/// threshold, or `None` for any other shape.
///
/// The batch sizes above the threshold are not constrained to be maximal:
/// solved policies genuinely serve partial batches under light traffic, and
/// the wait/serve threshold is the structure worth reporting.
pub fn detect_control_limit(policy: &Policy) -> Option<usize> {
    let space = policy.space();
    let interior = &policy.actions()[..=space.s_max()];
    let limit = interior.iter().position(|&a| a != 0)?;
    for (s, &a) in interior.iter().enumerate() {
        let serves = a != 0;
        if serves != (s >= limit) {
            return None;
        }
    }
    // The overflow state stands for queue length s_max >= limit, so it must
    // serve as well.
    if policy.action(space.overflow()) == 0 {
        return None;
    }
    Some(limit)
}

/// An overflow cost rate that dominates any policy worth keeping: twice the
/// work-conserving policy's average cost at the same parameters.
///
/// With a flat overflow cost the truncated model can prefer parking in the
/// overflow state to serving at all once the energy weight is large, because
/// the holding cost saturates at `s_max`; scaling the punishment with the
/// achievable cost keeps the approximation honest across weight scales.
pub fn default_overflow_cost<F: Scalar>(
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
    weights: &Weights<F>,
    s_max: usize,
) -> Result<F> {
    let trunc = TruncationConfig {
        s_max,
        c_o: F::zero(),
    };
    let model = build_truncated(profile, workload, weights, &trunc)?;
    let wc = crate::policy::make_work_conserving(s_max, profile.b_max())?;
    let eval = evaluate_policy(&wc, &model, F::one())?;
    Ok(F::from_f64_lossy(2.0) * eval.g_pi)
}

/// One evaluated truncation size in the minimal-`s_max` search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmaxRecord<F> {
    pub s_max: usize,
    pub iterations: usize,
    pub converged: bool,
    pub g_pi: F,
    pub delta_pi: F,
    pub acceptable: bool,
    /// `b_max * s_max`, the footprint of the shared arrival vectors.
    pub space_complexity: u64,
    /// `iterations * b_max * s_max^2`, the multiplication count of the solve.
    pub time_complexity: u64,
}

/// Result of [`find_min_smax`]: the smallest acceptable truncation, its
/// solved policy, and every evaluated grid point in ascending order.
#[derive(Debug, Clone)]
pub struct MinSmaxResult<F> {
    pub chosen: SmaxRecord<F>,
    pub policy: Policy,
    pub records: Vec<SmaxRecord<F>>,
}

/// Failure of the truncation search, keeping the evaluated records.
#[derive(Debug, Clone)]
pub enum MinSmaxError<F> {
    /// No grid point met the tolerance; records of everything evaluated.
    Exhausted {
        records: Vec<SmaxRecord<F>>,
    },
    Model(Error),
}

impl<F: Scalar> std::fmt::Display for MinSmaxError<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MinSmaxError::Exhausted { records } => write!(
                f,
                "no s_max on the grid met the tolerance; largest tried: {}",
                records.last().map(|r| r.s_max).unwrap_or(0)
            ),
            MinSmaxError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl<F: Scalar> std::error::Error for MinSmaxError<F> {}

impl<F> From<Error> for MinSmaxError<F> {
    fn from(e: Error) -> Self {
        MinSmaxError::Model(e)
    }
}

/// Finds the smallest `s_max` on an ascending grid whose solved policy keeps
/// the overflow cost contribution below `delta`.
///
/// Acceptability is monotone in `s_max` (the overflow mass shrinks as the
/// truncation grows), so the grid is searched by bisection after checking the
/// endpoints; every evaluated point runs the full build, discretize, solve,
/// evaluate pipeline and is recorded.
pub fn find_min_smax<F: Scalar>(
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
    weights: &Weights<F>,
    c_o: F,
    delta: F,
    params: &RviParams<F>,
    grid: &[usize],
) -> std::result::Result<MinSmaxResult<F>, MinSmaxError<F>> {
    if grid.is_empty() {
        return Err(Error::Config("empty s_max grid".into()).into());
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("s_max grid must be strictly ascending".into()).into());
    }
    if grid[0] < profile.b_max() {
        return Err(Error::Config(format!(
            "grid starts at {} but s_max must be at least b_max = {}",
            grid[0],
            profile.b_max()
        ))
        .into());
    }

    let mut evaluated: Vec<(usize, SmaxRecord<F>, Policy)> = Vec::new();
    let run = |idx: usize,
               evaluated: &mut Vec<(usize, SmaxRecord<F>, Policy)>|
     -> std::result::Result<bool, MinSmaxError<F>> {
        let s_max = grid[idx];
        let trunc = TruncationConfig { s_max, c_o };
        let model = build_truncated(profile, workload, weights, &trunc)?;
        let dtmdp = to_dtmdp(model, params.eta_fraction)?;
        let (policy, solve) =
            relative_value_iteration(&dtmdp, params.epsilon, params.iter_max, params.ref_state)?;
        let eval = evaluate_policy(&policy, dtmdp.smdp(), delta)?;
        let b_max = profile.b_max() as u64;
        let record = SmaxRecord {
            s_max,
            iterations: solve.iterations,
            converged: solve.converged,
            g_pi: eval.g_pi,
            delta_pi: eval.delta_pi,
            acceptable: eval.acceptable,
            space_complexity: b_max * s_max as u64,
            time_complexity: solve.iterations as u64 * b_max * (s_max as u64).pow(2),
        };
        let acceptable = record.acceptable;
        evaluated.push((idx, record, policy));
        Ok(acceptable)
    };

    let last = grid.len() - 1;
    if !run(last, &mut evaluated)? {
        evaluated.sort_by_key(|(idx, _, _)| *idx);
        return Err(MinSmaxError::Exhausted {
            records: evaluated.into_iter().map(|(_, r, _)| r).collect(),
        });
    }
    let mut hi = last;
    if last > 0 && run(0, &mut evaluated)? {
        hi = 0;
    } else if last > 0 {
        // Invariant: grid[lo] unacceptable, grid[hi] acceptable.
        let mut lo = 0;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if run(mid, &mut evaluated)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }

    evaluated.sort_by_key(|(idx, _, _)| *idx);
    let (_, chosen, policy) = evaluated
        .iter()
        .find(|(idx, _, _)| *idx == hi)
        .cloned()
        .expect("chosen point was evaluated");
    Ok(MinSmaxResult {
        chosen,
        policy,
        records: evaluated.into_iter().map(|(_, r, _)| r).collect(),
    })
}
