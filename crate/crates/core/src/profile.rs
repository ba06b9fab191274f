//! Latency/energy model of a batch server and arrival-side quantities
//! derived from it.
//!
//! A batch of `b` requests occupies the server for `alpha * b + tau0`
//! milliseconds and consumes `beta * b + zeta0` millijoules. Units are fixed
//! crate-wide: milliseconds, millijoules, requests per millisecond. Average
//! power is therefore mJ/ms, i.e. Watt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bundled latency/energy parameters for GoogLeNet inference on a TESLA P4.
pub const GOOGLENET_P4_JSON: &str = include_str!("../profiles/googlenet-p4.json");

/// Linear latency/energy model of one (accelerator, ML model) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceProfile<F> {
    alpha: F,
    tau0: F,
    beta: F,
    zeta0: F,
    b_max: usize,
}

impl<F: Scalar> ServiceProfile<F> {
    /// Validates parameters and the monotonicity of throughput and energy
    /// efficiency over `1..=b_max`.
    pub fn new(alpha: F, tau0: F, beta: F, zeta0: F, b_max: usize) -> Result<Self> {
        for (name, v) in [
            ("alpha", alpha),
            ("tau0", tau0),
            ("beta", beta),
            ("zeta0", zeta0),
        ] {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite, got {v}")));
            }
        }
        if alpha <= F::zero() {
            return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
        }
        if beta <= F::zero() {
            return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
        }
        if tau0 < F::zero() {
            return Err(Error::Domain(format!("tau0 must be >= 0, got {tau0}")));
        }
        if zeta0 < F::zero() {
            return Err(Error::Domain(format!("zeta0 must be >= 0, got {zeta0}")));
        }
        if b_max < 1 {
            return Err(Error::Domain("b_max must be >= 1".into()));
        }
        let profile = Self {
            alpha,
            tau0,
            beta,
            zeta0,
            b_max,
        };
        for b in 1..b_max {
            if profile.throughput(b + 1) < profile.throughput(b) {
                return Err(Error::Domain(format!(
                    "throughput decreases from batch {b} to {}",
                    b + 1
                )));
            }
            if profile.energy_efficiency(b + 1) < profile.energy_efficiency(b) {
                return Err(Error::Domain(format!(
                    "energy efficiency decreases from batch {b} to {}",
                    b + 1
                )));
            }
        }
        Ok(profile)
    }

    /// The bundled GoogLeNet/TESLA-P4 profile.
    pub fn googlenet_p4() -> Self {
        load_profile_str(GOOGLENET_P4_JSON).expect("bundled profile is valid")
    }

    /// Same latency/energy coefficients with a different maximum batch size.
    pub fn with_b_max(&self, b_max: usize) -> Result<Self> {
        Self::new(self.alpha, self.tau0, self.beta, self.zeta0, b_max)
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn tau0(&self) -> F {
        self.tau0
    }

    pub fn beta(&self) -> F {
        self.beta
    }

    pub fn zeta0(&self) -> F {
        self.zeta0
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    /// Batch processing time `alpha * b + tau0` in ms. `b` must lie in
    /// `1..=b_max`.
    pub fn latency(&self, b: usize) -> F {
        debug_assert!(b >= 1 && b <= self.b_max);
        self.alpha * F::from_usize_lossy(b) + self.tau0
    }

    /// Batch energy `beta * b + zeta0` in mJ. `b` must lie in `1..=b_max`.
    pub fn energy(&self, b: usize) -> F {
        debug_assert!(b >= 1 && b <= self.b_max);
        self.beta * F::from_usize_lossy(b) + self.zeta0
    }

    /// Throughput `b / latency(b)` in requests/ms.
    pub fn throughput(&self, b: usize) -> F {
        F::from_usize_lossy(b) / self.latency(b)
    }

    /// Requests served per mJ, `b / energy(b)`.
    pub fn energy_efficiency(&self, b: usize) -> F {
        F::from_usize_lossy(b) / self.energy(b)
    }

    /// Maximum service rate, attained at the maximum batch size.
    pub fn max_throughput(&self) -> F {
        self.throughput(self.b_max)
    }

    /// All four per-batch metrics, with the batch size range checked.
    pub fn metrics(&self, b: usize) -> Result<BatchMetrics<F>> {
        if b < 1 || b > self.b_max {
            return Err(Error::Domain(format!(
                "batch size {b} outside valid range 1..={}",
                self.b_max
            )));
        }
        Ok(BatchMetrics {
            latency: self.latency(b),
            energy: self.energy(b),
            throughput: self.throughput(b),
            energy_efficiency: self.energy_efficiency(b),
        })
    }
}

/// Per-batch performance figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMetrics<F> {
    pub latency: F,
    pub energy: F,
    pub throughput: F,
    pub energy_efficiency: F,
}

/// Latency, energy, throughput, and efficiency of one batch size.
pub fn profile_metrics<F: Scalar>(
    profile: &ServiceProfile<F>,
    b: usize,
) -> Result<BatchMetrics<F>> {
    profile.metrics(b)
}

/// Poisson arrival stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workload<F> {
    lambda: F,
}

impl<F: Scalar> Workload<F> {
    pub fn new(lambda: F) -> Result<Self> {
        if !lambda.is_finite() || lambda <= F::zero() {
            return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    /// Arrival rate from a normalized traffic intensity `rho = lambda / mu_max`.
    pub fn from_rho(profile: &ServiceProfile<F>, rho: F) -> Result<Self> {
        if !rho.is_finite() || rho <= F::zero() {
            return Err(Error::Domain(format!("rho must be > 0, got {rho}")));
        }
        Self::new(rho * profile.max_throughput())
    }

    pub fn lambda(&self) -> F {
        self.lambda
    }
}

/// Objective weights on latency (`w1`) and energy (`w2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Weights<F> {
    pub w1: F,
    pub w2: F,
}

impl<F: Scalar> Weights<F> {
    pub fn new(w1: F, w2: F) -> Result<Self> {
        if !w1.is_finite() || !w2.is_finite() || w1 < F::zero() || w2 < F::zero() {
            return Err(Error::Domain(format!(
                "weights must be finite and >= 0, got w1 = {w1}, w2 = {w2}"
            )));
        }
        if w1 + w2 <= F::zero() {
            return Err(Error::Domain("w1 + w2 must be > 0".into()));
        }
        Ok(Self { w1, w2 })
    }
}

/// Traffic intensity normalized by the maximum service rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrafficIntensity<F> {
    pub rho: F,
    pub stable: bool,
}

/// `rho = lambda / mu^[b_max]` and whether the stability condition holds.
///
/// `rho >= 1` is reported, not rejected; solvers reject it.
pub fn traffic_intensity<F: Scalar>(
    profile: &ServiceProfile<F>,
    workload: &Workload<F>,
) -> TrafficIntensity<F> {
    let rho = workload.lambda() / profile.max_throughput();
    TrafficIntensity {
        rho,
        stable: rho < F::one(),
    }
}

/// A least-squares fit of a [`ServiceProfile`] to measured samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFit<F> {
    pub profile: ServiceProfile<F>,
    pub latency_rmse: F,
    pub energy_rmse: F,
    /// True when the fitted latency intercept came out negative and was
    /// clamped to zero.
    pub latency_intercept_clamped: bool,
    pub energy_intercept_clamped: bool,
}

/// Ordinary least squares of `value = slope * b + intercept` per series.
///
/// Negative fitted intercepts are clamped to zero (measurement noise can pull
/// them slightly below); a negative slope violates the linear model and is an
/// error. RMSE is reported against the returned, possibly clamped, line.
pub fn fit_linear_profile<F: Scalar>(
    latency_samples: &[(usize, F)],
    energy_samples: &[(usize, F)],
    b_max: usize,
) -> Result<ProfileFit<F>> {
    let (alpha, tau0, latency_clamped) = fit_series(latency_samples, "latency")?;
    let (beta, zeta0, energy_clamped) = fit_series(energy_samples, "energy")?;
    let profile = ServiceProfile::new(alpha, tau0, beta, zeta0, b_max)?;
    Ok(ProfileFit {
        latency_rmse: rmse(latency_samples, alpha, tau0),
        energy_rmse: rmse(energy_samples, beta, zeta0),
        profile,
        latency_intercept_clamped: latency_clamped,
        energy_intercept_clamped: energy_clamped,
    })
}

fn fit_series<F: Scalar>(samples: &[(usize, F)], name: &str) -> Result<(F, F, bool)> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!(
            "{name}: need at least 2 samples, got {}",
            samples.len()
        )));
    }
    for &(b, v) in samples {
        if b < 1 {
            return Err(Error::Fit(format!("{name}: batch sizes must be >= 1")));
        }
        if !v.is_finite() || v < F::zero() {
            return Err(Error::Fit(format!(
                "{name}: sample values must be finite and >= 0, got {v} at b = {b}"
            )));
        }
    }
    let n = F::from_usize_lossy(samples.len());
    let mean_b = samples
        .iter()
        .map(|&(b, _)| F::from_usize_lossy(b))
        .sum::<F>()
        / n;
    let mean_v = samples.iter().map(|&(_, v)| v).sum::<F>() / n;
    let mut sxx = F::zero();
    let mut sxy = F::zero();
    for &(b, v) in samples {
        let db = F::from_usize_lossy(b) - mean_b;
        sxx = sxx + db * db;
        sxy = sxy + db * (v - mean_v);
    }
    if sxx <= F::zero() {
        return Err(Error::Fit(format!(
            "{name}: degenerate design, all samples share one batch size"
        )));
    }
    let slope = sxy / sxx;
    if slope <= F::zero() {
        return Err(Error::Fit(format!(
            "{name}: fitted slope {slope} is not positive; data contradict the linear model"
        )));
    }
    let intercept = mean_v - slope * mean_b;
    if intercept < F::zero() {
        Ok((slope, F::zero(), true))
    } else {
        Ok((slope, intercept, false))
    }
}

fn rmse<F: Scalar>(samples: &[(usize, F)], slope: F, intercept: F) -> F {
    let mut acc = F::zero();
    for &(b, v) in samples {
        let r = v - (slope * F::from_usize_lossy(b) + intercept);
        acc = acc + r * r;
    }
    (acc / F::from_usize_lossy(samples.len())).sqrt()
}

/// Poisson arrival-count probabilities `p_0..p_k_max` with explicit tail mass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrivalPmf<F> {
    pub probs: Vec<F>,
    /// `1 - sum(probs)`, clamped to `[0, 1]`.
    pub tail: F,
}

impl<F: Scalar> ArrivalPmf<F> {
    pub fn mean(&self) -> F {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, &p)| F::from_usize_lossy(k) * p)
            .sum()
    }
}

/// Probabilities of `0..=k_max` Poisson arrivals within `duration` ms.
pub fn arrival_count_pmf<F: Scalar>(
    workload: &Workload<F>,
    duration: F,
    k_max: usize,
) -> Result<ArrivalPmf<F>> {
    if !duration.is_finite() || duration < F::zero() {
        return Err(Error::Domain(format!(
            "duration must be finite and >= 0, got {duration}"
        )));
    }
    let mean = workload.lambda() * duration;
    let mut probs = Vec::with_capacity(k_max + 1);
    // Compensated summation; the recurrence's drift is otherwise visible in
    // the normalization for means in the thousands.
    let mut sum = F::zero();
    let mut comp = F::zero();
    for p in PoissonIter::new(mean).take(k_max + 1) {
        let y = p - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        probs.push(p);
    }
    if sum > F::one() {
        // Accumulated rounding pushed the mass past one; rescale.
        let inv = F::one() / sum;
        for p in probs.iter_mut() {
            *p = *p * inv;
        }
        return Ok(ArrivalPmf {
            probs,
            tail: F::zero(),
        });
    }
    Ok(ArrivalPmf {
        probs,
        tail: F::one() - sum,
    })
}

/// Numerically stable Poisson probabilities `p_0, p_1, ...` for a fixed mean.
///
/// Runs the multiplicative recurrence `p_{k+1} = p_k * mean / (k + 1)` and
/// falls back to a log-space recurrence when `exp(-mean)` underflows, so very
/// large means still yield a valid (shifted) mass function.
pub(crate) struct PoissonIter<F> {
    mean: F,
    k: usize,
    state: PoissonState<F>,
}

enum PoissonState<F> {
    Direct(F),
    LogSpace(F),
}

impl<F: Scalar> PoissonIter<F> {
    pub(crate) fn new(mean: F) -> Self {
        debug_assert!(mean >= F::zero());
        let p0 = (-mean).exp();
        let state = if p0 >= F::min_positive_value() {
            PoissonState::Direct(p0)
        } else {
            PoissonState::LogSpace(-mean)
        };
        Self { mean, k: 0, state }
    }
}

impl<F: Scalar> Iterator for PoissonIter<F> {
    type Item = F;

    fn next(&mut self) -> Option<F> {
        let next_k = F::from_usize_lossy(self.k + 1);
        let p = match &mut self.state {
            PoissonState::Direct(p) => {
                let current = *p;
                *p = current * self.mean / next_k;
                current
            }
            PoissonState::LogSpace(lp) => {
                let current = lp.exp();
                *lp = *lp + self.mean.ln() - next_k.ln();
                current
            }
        };
        self.k += 1;
        Some(p)
    }
}

#[derive(Debug, Deserialize)]
struct ProfileFile {
    alpha: f64,
    tau0: f64,
    beta: f64,
    zeta0: f64,
    b_max: usize,
    units: UnitsField,
}

#[derive(Debug, Deserialize)]
struct UnitsField {
    time: String,
    energy: String,
}

/// Parses a profile from its JSON representation, rejecting unknown units.
pub fn load_profile_str<F: Scalar>(json: &str) -> Result<ServiceProfile<F>> {
    let file: ProfileFile =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("profile JSON: {e}")))?;
    if file.units.time != "ms" || file.units.energy != "mJ" {
        return Err(Error::Config(format!(
            "unsupported units (time: {:?}, energy: {:?}); this crate works in ms and mJ",
            file.units.time, file.units.energy
        )));
    }
    ServiceProfile::new(
        F::from_f64_lossy(file.alpha),
        F::from_f64_lossy(file.tau0),
        F::from_f64_lossy(file.beta),
        F::from_f64_lossy(file.zeta0),
        file.b_max,
    )
}

/// Loads a profile JSON file from disk.
pub fn load_profile_file<F: Scalar>(
    path: impl AsRef<std::path::Path>,
) -> Result<ServiceProfile<F>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    load_profile_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p4() -> ServiceProfile<f64> {
        ServiceProfile::googlenet_p4()
    }

    /// Independent Poisson oracle: direct evaluation with an explicit factorial.
    fn poisson_direct(mean: f64, k: usize) -> f64 {
        let mut factorial = 1.0;
        for i in 1..=k {
            factorial *= i as f64;
        }
        (-mean).exp() * mean.powi(k as i32) / factorial
    }

    #[test]
    fn p4_max_batch_metrics_match_published_rate() {
        let m = p4().metrics(32).unwrap();
        assert!((m.latency - 10.8152).abs() < 1e-9);
        assert!((m.throughput - 2.96).abs() < 0.01);
    }

    #[test]
    fn p4_single_request_metrics() {
        let m = p4().metrics(1).unwrap();
        assert!((m.latency - 1.3571).abs() < 1e-12);
        assert!((m.energy - 39.50).abs() < 1e-12);
    }

    #[test]
    fn zero_intercept_profile_has_unit_ratios() {
        let profile = ServiceProfile::<f64>::new(1.0, 0.0, 1.0, 0.0, 8).unwrap();
        for b in 1..=8 {
            let m = profile.metrics(b).unwrap();
            assert!((m.throughput - 1.0).abs() < 1e-15);
            assert!((m.energy_efficiency - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn metrics_rejects_out_of_range_batch() {
        let err = p4().metrics(0).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("1..=32")));
        assert!(p4().metrics(33).is_err());
    }

    #[test]
    fn metrics_strictly_increase_with_batch_size() {
        let profile = p4();
        for b in 1..32 {
            assert!(profile.latency(b + 1) > profile.latency(b));
            assert!(profile.energy(b + 1) > profile.energy(b));
        }
    }

    #[test]
    fn throughput_strictly_increases_with_positive_tau0() {
        let profile = p4();
        for b in 1..32 {
            assert!(profile.throughput(b + 1) > profile.throughput(b));
        }
        let flat = ServiceProfile::<f64>::new(2.0, 0.0, 1.0, 0.0, 16).unwrap();
        for b in 1..16 {
            assert!((flat.throughput(b + 1) - flat.throughput(b)).abs() < 1e-15);
        }
    }

    #[test]
    fn traffic_intensity_is_direct_division() {
        let profile = p4();
        let workload = Workload::new(2.664).unwrap();
        let t = traffic_intensity(&profile, &workload);
        let oracle = 2.664 / (32.0 / 10.8152);
        assert!((t.rho - oracle).abs() < 1e-12);
        assert!((t.rho - 0.9).abs() < 1e-3);
        assert!(t.stable);
    }

    #[test]
    fn traffic_intensity_vanishes_with_arrival_rate() {
        let profile = p4();
        let workload = Workload::new(1e-12).unwrap();
        let t = traffic_intensity(&profile, &workload);
        assert!(t.rho < 1e-11);
        assert!(t.stable);
    }

    #[test]
    fn traffic_intensity_reports_saturation_without_error() {
        let profile = ServiceProfile::<f64>::new(1.0, 0.0, 1.0, 0.0, 4).unwrap();
        let workload = Workload::new(1.0).unwrap();
        let t = traffic_intensity(&profile, &workload);
        assert!((t.rho - 1.0).abs() < 1e-15);
        assert!(!t.stable);
    }

    #[test]
    fn fit_recovers_exact_linear_latency() {
        let bs = [1usize, 2, 4, 8, 16, 32];
        let latency: Vec<(usize, f64)> =
            bs.iter().map(|&b| (b, 0.3051 * b as f64 + 1.052)).collect();
        let energy: Vec<(usize, f64)> = bs.iter().map(|&b| (b, 19.90 * b as f64 + 19.60)).collect();
        let fit = fit_linear_profile(&latency, &energy, 32).unwrap();
        assert!((fit.profile.alpha() - 0.3051).abs() < 1e-12);
        assert!((fit.profile.tau0() - 1.052).abs() < 1e-12);
        assert!(fit.latency_rmse <= 1e-12);
        assert!(fit.energy_rmse <= 1e-12);
        assert!(!fit.latency_intercept_clamped);
    }

    #[test]
    fn fit_zero_intercept_series() {
        let samples: Vec<(usize, f64)> = vec![(1, 2.0), (2, 4.0), (3, 6.0)];
        let fit = fit_linear_profile(&samples, &samples, 3).unwrap();
        assert!((fit.profile.alpha() - 2.0).abs() < 1e-12);
        assert!(fit.profile.tau0().abs() < 1e-12);
    }

    #[test]
    fn fit_on_noisy_data_matches_independent_ols() {
        // Fixed noise values stand in for N(0, 0.01) draws.
        let noise = [
            0.004, -0.009, 0.011, -0.002, 0.007, -0.012, 0.001, 0.009, -0.006, 0.003, -0.008,
            0.012, -0.001, 0.005, -0.010, 0.002, 0.008, -0.004, 0.010, -0.007, 0.000, 0.006,
            -0.011, 0.003, -0.005, 0.009, -0.003, 0.001, -0.013, 0.007, 0.004, -0.002,
        ];
        let latency: Vec<(usize, f64)> = (1..=32)
            .map(|b| (b, 0.3 * b as f64 + 1.0 + noise[b - 1]))
            .collect();
        let energy: Vec<(usize, f64)> = (1..=32).map(|b| (b, 2.0 * b as f64 + 1.0)).collect();
        let fit = fit_linear_profile(&latency, &energy, 32).unwrap();
        assert!((fit.profile.alpha() - 0.3).abs() < 0.01);

        // Oracle: normal equations solved by Cramer's rule.
        let n = latency.len() as f64;
        let (mut sb, mut sv, mut sbb, mut sbv) = (0.0, 0.0, 0.0, 0.0);
        for &(b, v) in &latency {
            let b = b as f64;
            sb += b;
            sv += v;
            sbb += b * b;
            sbv += b * v;
        }
        let det = n * sbb - sb * sb;
        let slope = (n * sbv - sb * sv) / det;
        let intercept = (sbb * sv - sb * sbv) / det;
        assert!((fit.profile.alpha() - slope).abs() < 1e-10);
        assert!((fit.profile.tau0() - intercept).abs() < 1e-10);
    }

    #[test]
    fn fit_rejects_degenerate_design() {
        let samples: Vec<(usize, f64)> = vec![(3, 1.0), (3, 1.1), (3, 0.9)];
        let ok: Vec<(usize, f64)> = vec![(1, 2.0), (2, 4.0)];
        let err = fit_linear_profile(&samples, &ok, 4).unwrap_err();
        assert!(matches!(err, Error::Fit(ref m) if m.contains("degenerate")));
    }

    #[test]
    fn fit_rejects_negative_slope() {
        let samples: Vec<(usize, f64)> = vec![(1, 6.0), (2, 4.0), (3, 2.0)];
        let ok: Vec<(usize, f64)> = vec![(1, 2.0), (2, 4.0)];
        let err = fit_linear_profile(&samples, &ok, 4).unwrap_err();
        assert!(matches!(err, Error::Fit(ref m) if m.contains("slope")));
    }

    #[test]
    fn fit_clamps_negative_intercept() {
        let samples: Vec<(usize, f64)> = vec![(1, 0.9), (2, 2.1), (3, 2.9)];
        let ok: Vec<(usize, f64)> = vec![(1, 2.0), (2, 4.0)];
        let fit = fit_linear_profile(&samples, &ok, 4).unwrap();
        assert!(fit.latency_intercept_clamped);
        assert!(fit.profile.tau0().abs() < 1e-15);
    }

    #[test]
    fn pmf_with_zero_duration_is_point_mass() {
        let workload = Workload::<f64>::new(3.0).unwrap();
        let pmf = arrival_count_pmf(&workload, 0.0, 5).unwrap();
        assert!((pmf.probs[0] - 1.0).abs() < 1e-15);
        for &p in &pmf.probs[1..] {
            assert_eq!(p, 0.0);
        }
        assert_eq!(pmf.tail, 0.0);
    }

    #[test]
    fn pmf_head_matches_direct_evaluation() {
        let workload = Workload::<f64>::new(1.0).unwrap();
        let pmf = arrival_count_pmf(&workload, 1.0, 0).unwrap();
        assert!((pmf.probs[0] - 0.367879441171442).abs() < 1e-12);
        assert!((pmf.probs[0] - poisson_direct(1.0, 0)).abs() < 1e-15);
    }

    #[test]
    fn pmf_mean_and_tail_for_small_rate() {
        let workload = Workload::<f64>::new(2.0).unwrap();
        let pmf = arrival_count_pmf(&workload, 1.0, 50).unwrap();
        assert!(pmf.tail < 1e-12);
        assert!((pmf.mean() - 2.0).abs() < 1e-9);
        for (k, &p) in pmf.probs.iter().enumerate().take(20) {
            assert!((p - poisson_direct(2.0, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn pmf_normalizes_across_large_means() {
        for mean in [0.1, 1.0, 17.3, 250.0, 900.0, 1e4] {
            let workload = Workload::new(mean).unwrap();
            let pmf = arrival_count_pmf(&workload, 1.0, (mean as usize) * 2 + 200).unwrap();
            let total: f64 = pmf.probs.iter().sum::<f64>() + pmf.tail;
            assert!(
                (total - 1.0).abs() < 1e-12,
                "mean {mean}: total {total} not normalized"
            );
            assert!(pmf.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!((pmf.mean() - mean).abs() / mean < 1e-9);
        }
    }

    #[test]
    fn pmf_survives_p0_underflow() {
        // exp(-800) underflows f64; the log-space path has to take over.
        let workload = Workload::new(800.0).unwrap();
        let pmf = arrival_count_pmf(&workload, 1.0, 1600).unwrap();
        assert_eq!(pmf.probs[0], 0.0);
        let total: f64 = pmf.probs.iter().sum::<f64>() + pmf.tail;
        assert!((total - 1.0).abs() < 1e-10);
        assert!((pmf.mean() - 800.0).abs() / 800.0 < 1e-6);
        let peak = pmf.probs[800];
        assert!((peak - poisson_direct_log(800.0, 800)).abs() / peak < 1e-9);
    }

    /// Log-space direct oracle for large means.
    fn poisson_direct_log(mean: f64, k: usize) -> f64 {
        let mut log_p = -mean + k as f64 * mean.ln();
        for i in 1..=k {
            log_p -= (i as f64).ln();
        }
        log_p.exp()
    }

    #[test]
    fn pmf_rejects_negative_duration() {
        let workload = Workload::<f64>::new(1.0).unwrap();
        assert!(arrival_count_pmf(&workload, -1.0, 3).is_err());
    }

    #[test]
    fn bundled_profile_round_trips_units_check() {
        let err = load_profile_str::<f64>(
            r#"{"alpha":1,"tau0":0,"beta":1,"zeta0":0,"b_max":4,"units":{"time":"s","energy":"mJ"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn profile_rejects_invalid_parameters() {
        assert!(ServiceProfile::new(0.0, 1.0, 1.0, 1.0, 4).is_err());
        assert!(ServiceProfile::new(1.0, -0.1, 1.0, 1.0, 4).is_err());
        assert!(ServiceProfile::new(1.0, 0.0, -1.0, 1.0, 4).is_err());
        assert!(ServiceProfile::new(1.0, 0.0, 1.0, 1.0, 0).is_err());
        assert!(ServiceProfile::<f64>::new(f64::NAN, 0.0, 1.0, 1.0, 4).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(Weights::new(0.0, 0.0).is_err());
        assert!(Weights::new(-1.0, 2.0).is_err());
        assert!(Weights::new(1.0, 0.0).is_ok());
    }
}
