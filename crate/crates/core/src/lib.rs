//! Optimal dynamic batching for a single batch-service queue whose service
//! time and energy grow linearly with the batch size.
//!
//! The queue is modeled as an average-cost semi-Markov decision process over
//! the number of requests in the system, with decisions at batch completions
//! and at arrivals to an idle server. The solve pipeline:
//!
//! 1. [`smdp`] truncates the infinite state space behind an overflow state
//!    carrying an abstract overflow cost,
//! 2. [`discretize`] transforms the result into an equivalent discrete-time
//!    MDP,
//! 3. [`solver`] runs relative value iteration, extracts the policy, and
//!    evaluates it analytically under the stationary distribution (including
//!    the overflow contribution that certifies the truncation),
//! 4. [`qlearn`] cross-checks the solution with model-free relative
//!    Q-learning, and [`sim`] cross-checks it with discrete-event simulation.
//!
//! The numeric core is generic over the scalar type through [`Scalar`];
//! the crate-root aliases fix `f64`, which all shipped tolerances assume.

pub mod discretize;
pub mod error;
pub mod policy;
pub mod profile;
pub mod qlearn;
pub mod scalar;
pub mod sim;
pub mod smdp;
pub mod solver;

pub use error::{Error, Result};
pub use policy::{Policy, PolicySpec};
pub use scalar::Scalar;
pub use smdp::StateSpace;

/// `f64` service profile; see [`profile::ServiceProfile`].
pub type ServiceProfile = profile::ServiceProfile<f64>;
/// `f64` Poisson workload; see [`profile::Workload`].
pub type Workload = profile::Workload<f64>;
/// `f64` objective weights; see [`profile::Weights`].
pub type Weights = profile::Weights<f64>;
/// `f64` arrival-count distribution; see [`profile::ArrivalPmf`].
pub type ArrivalPmf = profile::ArrivalPmf<f64>;
/// `f64` truncation parameters; see [`smdp::TruncationConfig`].
pub type TruncationConfig = smdp::TruncationConfig<f64>;
/// `f64` truncated model; see [`smdp::FiniteSmdp`].
pub type FiniteSmdp = smdp::FiniteSmdp<f64>;
/// `f64` discretized model; see [`discretize::DtMdp`].
pub type DtMdp = discretize::DtMdp<f64>;
/// `f64` solver controls; see [`solver::RviParams`].
pub type RviParams = solver::RviParams<f64>;
/// `f64` solve outcome; see [`solver::SolveReport`].
pub type SolveReport = solver::SolveReport<f64>;
/// `f64` analytic evaluation; see [`solver::EvalReport`].
pub type EvalReport = solver::EvalReport<f64>;
/// `f64` truncation-search record; see [`solver::SmaxRecord`].
pub type SmaxRecord = solver::SmaxRecord<f64>;
/// `f64` action-value table; see [`qlearn::QTable`].
pub type QTable = qlearn::QTable<f64>;
/// `f64` simulation outcome; see [`sim::SimReport`].
pub type SimReport = sim::SimReport<f64>;
