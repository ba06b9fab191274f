//! Run configuration: one JSON file, flag overrides, and a stable hash that
//! every output file records.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dynbatch::profile::{load_profile_file, load_profile_str, GOOGLENET_P4_JSON};
use dynbatch::{ServiceProfile, Weights, Workload};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to a profile JSON file, or the bundled name `googlenet-p4`.
    pub profile: String,
    /// Optional smaller maximum batch size for studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_max_override: Option<usize>,
    pub workload: WorkloadConfig,
    pub weights: WeightsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_truncation: Option<AutoTruncation>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qlearn: Option<QlearnSection>,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Exactly one of `rho` (normalized by the maximum service rate) or `lambda`
/// (requests/ms).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorkloadConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightsConfig {
    pub w1: f64,
    pub w2: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncationSection {
    pub s_max: usize,
    pub c_o: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AutoTruncation {
    pub c_o: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_grid_start")]
    pub grid_start: usize,
    #[serde(default = "default_grid_stop")]
    pub grid_stop: usize,
    #[serde(default = "default_grid_step")]
    pub grid_step: usize,
}

fn default_grid_start() -> usize {
    32
}

fn default_grid_stop() -> usize {
    256
}

fn default_grid_step() -> usize {
    1
}

impl AutoTruncation {
    pub fn grid(&self) -> Vec<usize> {
        (self.grid_start..=self.grid_stop)
            .step_by(self.grid_step.max(1))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverSection {
    pub epsilon: f64,
    pub iter_max: usize,
    pub eta_fraction: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            iter_max: 10_000,
            eta_fraction: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QlearnSection {
    pub epsilon0: f64,
    pub iterations: usize,
    pub seed: u64,
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimulationSection {
    /// Horizon in ms.
    pub horizon: f64,
    pub seed: u64,
    pub replications: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            horizon: 400_000.0,
            seed: 1,
            replications: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSection {
    pub rho_grid: Vec<f64>,
    pub w2_grid: Vec<f64>,
    /// Raise the overflow cost to twice the work-conserving cost per point,
    /// so heavy energy weights cannot collapse the truncated model into
    /// never serving.
    #[serde(default = "default_true")]
    pub scale_overflow_cost: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSection {
    pub policies: Vec<dynbatch::PolicySpec>,
    #[serde(default = "default_eval_s_max")]
    pub eval_s_max: usize,
}

fn default_eval_s_max() -> usize {
    600
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySection {
    pub c_o_grid: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        match (self.workload.rho, self.workload.lambda) {
            (Some(_), Some(_)) => bail!("workload must set exactly one of rho/lambda, got both"),
            (None, None) => bail!("workload must set exactly one of rho/lambda, got neither"),
            _ => {}
        }
        Ok(())
    }

    pub fn load_profile(&self) -> Result<ServiceProfile> {
        let profile = if self.profile == "googlenet-p4" {
            load_profile_str(GOOGLENET_P4_JSON)?
        } else {
            load_profile_file(&self.profile)?
        };
        Ok(match self.b_max_override {
            Some(b_max) => profile.with_b_max(b_max)?,
            None => profile,
        })
    }

    pub fn workload_for(&self, profile: &ServiceProfile) -> Result<Workload> {
        Ok(match (self.workload.rho, self.workload.lambda) {
            (Some(rho), None) => Workload::from_rho(profile, rho)?,
            (None, Some(lambda)) => Workload::new(lambda)?,
            _ => unreachable!("validated at load"),
        })
    }

    pub fn weights(&self) -> Result<Weights> {
        Ok(Weights::new(self.weights.w1, self.weights.w2)?)
    }

    /// FNV-1a over the effective (post-override) configuration JSON. The
    /// output directory is not part of the experiment's identity, so two
    /// runs differing only in destination hash identically.
    pub fn hash(&self) -> String {
        let mut effective = self.clone();
        effective.out_dir = PathBuf::new();
        let canonical = serde_json::to_string(&effective).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in canonical.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
