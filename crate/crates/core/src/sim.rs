//! Continuous-time discrete-event simulation of the batch-service queue
//! under a fixed policy; the independent check on every analytic result.

use std::collections::VecDeque;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::profile::{ServiceProfile, Weights, Workload};
use crate::scalar::Scalar;

/// Queue lengths beyond this abort the run as unstable.
const QUEUE_BLOWUP: usize = 1_000_000;

/// Fraction of the horizon discarded before statistics accumulate, so
/// steady-state quantities are not biased by the empty start.
const WARMUP_FRACTION: f64 = 0.05;

/// Steady-state estimates from one simulation run. Rates are measured after
/// the warm-up cut; the raw counters cover the whole run and satisfy
/// `n_arrivals = n_served + queue_at_end + in_service_at_end` exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport<F> {
    /// Time-average number of requests in the system (waiting or in service).
    pub avg_queue_len: F,
    /// Mean time from arrival to completion of the carrying batch, ms.
    pub avg_response_time: F,
    /// Energy per unit time, mJ/ms (Watt).
    pub avg_power: F,
    /// Energy divided by requests served, mJ.
    pub energy_per_task: F,
    /// Requests completed per ms.
    pub throughput: F,
    /// The weighted objective rate at the run's weights.
    pub weighted_cost_rate: F,
    /// Post-warm-up arrivals per ms, for Little's-law checks.
    pub empirical_arrival_rate: F,
    /// Completed batches by batch size (index = batch size).
    pub batch_histogram: Vec<u64>,
    /// Queue length observed at each decision epoch (index = length).
    pub decision_state_counts: Vec<u64>,
    pub n_arrivals: u64,
    pub n_served: u64,
    pub queue_at_end: usize,
    pub in_service_at_end: usize,
    pub horizon: F,
    pub warmup: F,
    pub seed: u64,
}

/// Simulates Poisson arrivals into a batch server driven by `policy`.
///
/// Decision epochs are batch completions and arrivals to an idle server; a
/// wait decision lasts until the next arrival, a batch of size `a` occupies
/// the server for exactly its profile latency and charges its profile energy.
/// Queue lengths above the policy's `s_max` reuse the overflow action.
/// Deterministic given the seed.
pub fn simulate<F: Scalar>(
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
    weights: &Weights<F>,
    policy: &Policy,
    horizon: F,
    seed: u64,
) -> Result<SimReport<F>> {
    if !horizon.is_finite() || horizon <= F::zero() {
        return Err(Error::Domain(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if policy.b_max() > profile.b_max() {
        return Err(Error::Domain(format!(
            "policy allows batches up to {} but the profile caps at {}",
            policy.b_max(),
            profile.b_max()
        )));
    }
    let lambda = workload.lambda();
    let warmup = F::from_f64_lossy(WARMUP_FRACTION) * horizon;
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut draw_interarrival =
        move || -> F { -F::from_f64_lossy((1.0 - rng.random::<f64>()).ln()) / lambda };

    let mut clock = F::zero();
    let mut queue: VecDeque<F> = VecDeque::new();
    let mut in_service = 0usize;
    let mut next_arrival = draw_interarrival();

    // Whole-run counters.
    let mut arrivals_total = 0u64;
    let mut served_total = 0u64;
    // Post-warm-up accumulators.
    let mut area = F::zero();
    let mut response_sum = F::zero();
    let mut served_after_warmup = 0u64;
    let mut arrivals_after_warmup = 0u64;
    let mut energy = F::zero();
    let mut batch_histogram = vec![0u64; profile.b_max() + 1];
    let mut decision_state_counts: Vec<u64> = Vec::new();

    // Exact piecewise-constant integration of the system size, split at the
    // warm-up boundary.
    let advance = |clock: &mut F, area: &mut F, size: usize, to: F| {
        let from = *clock;
        debug_assert!(to >= from);
        let lo = from.max(warmup);
        if to > lo {
            *area = *area + F::from_usize_lossy(size) * (to - lo);
        }
        *clock = to;
    };

    'run: loop {
        // Decision epoch: the server is idle at `clock`.
        if clock >= warmup {
            let s = queue.len();
            if decision_state_counts.len() <= s {
                decision_state_counts.resize(s + 1, 0);
            }
            decision_state_counts[s] += 1;
        }
        let action = policy.action_for_queue_len(queue.len());
        debug_assert!(action <= queue.len());

        if action == 0 {
            if next_arrival > horizon {
                advance(&mut clock, &mut area, queue.len(), horizon);
                break 'run;
            }
            advance(&mut clock, &mut area, queue.len(), next_arrival);
            queue.push_back(clock);
            arrivals_total += 1;
            if clock >= warmup {
                arrivals_after_warmup += 1;
            }
            if queue.len() > QUEUE_BLOWUP {
                return Err(Error::SimulationDiverged {
                    at_ms: clock.to_f64_lossy(),
                    queue_len: queue.len(),
                });
            }
            next_arrival = clock + draw_interarrival();
            continue;
        }

        let completion = clock + profile.latency(action);
        let batch: Vec<F> = queue.drain(..action).collect();
        in_service = action;
        loop {
            if next_arrival < completion {
                if next_arrival > horizon {
                    advance(&mut clock, &mut area, queue.len() + in_service, horizon);
                    break 'run;
                }
                advance(
                    &mut clock,
                    &mut area,
                    queue.len() + in_service,
                    next_arrival,
                );
                queue.push_back(clock);
                arrivals_total += 1;
                if clock >= warmup {
                    arrivals_after_warmup += 1;
                }
                if queue.len() > QUEUE_BLOWUP {
                    return Err(Error::SimulationDiverged {
                        at_ms: clock.to_f64_lossy(),
                        queue_len: queue.len(),
                    });
                }
                next_arrival = clock + draw_interarrival();
            } else {
                if completion > horizon {
                    advance(&mut clock, &mut area, queue.len() + in_service, horizon);
                    break 'run;
                }
                advance(&mut clock, &mut area, queue.len() + in_service, completion);
                served_total += action as u64;
                if clock >= warmup {
                    served_after_warmup += action as u64;
                    energy = energy + profile.energy(action);
                    batch_histogram[action] += 1;
                    for arrived_at in &batch {
                        response_sum = response_sum + clock - *arrived_at;
                    }
                }
                in_service = 0;
                break;
            }
        }
    }

    let duration = horizon - warmup;
    let avg_queue_len = area / duration;
    let served = F::from_usize_lossy(served_after_warmup as usize);
    let avg_response_time = if served_after_warmup > 0 {
        response_sum / served
    } else {
        F::zero()
    };
    let avg_power = energy / duration;
    let report = SimReport {
        avg_queue_len,
        avg_response_time,
        avg_power,
        energy_per_task: if served_after_warmup > 0 {
            energy / served
        } else {
            F::zero()
        },
        throughput: served / duration,
        weighted_cost_rate: F::zero(),
        empirical_arrival_rate: F::from_usize_lossy(arrivals_after_warmup as usize) / duration,
        batch_histogram,
        decision_state_counts,
        n_arrivals: arrivals_total,
        n_served: served_total,
        queue_at_end: queue.len(),
        in_service_at_end: in_service,
        horizon,
        warmup,
        seed,
    };
    Ok(SimReport {
        weighted_cost_rate: weighted_cost_of(&report, weights, workload),
        ..report
    })
}

/// The objective rate implied by a report:
/// `(w1 / lambda) * avg_queue_len + w2 * avg_power`.
pub fn weighted_cost_of<F: Scalar>(
    report: &SimReport<F>,
    weights: &Weights<F>,
    workload: &Workload<F>,
) -> F {
    weights.w1 / workload.lambda() * report.avg_queue_len + weights.w2 * report.avg_power
}
