//! Declarative run configuration. One JSON document drives every subcommand;
//! the run id is a digest of the effective config, so identical configs land
//! in the same run directory and reruns are comparable.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ncbf_core::certification::{ConformalConfig, MarginVector};
use ncbf_core::dynamics::{PointMassParams, SystemModel, UnicycleParams};
use ncbf_core::error::{Error, Result};
use ncbf_core::evaluation::{ComparisonThresholds, GridSpec, RolloutConfig};
use ncbf_core::safe_control::{AnalyticBarrier, Task};
use ncbf_core::sampling::{RegionQuotas, RegionSpec};
use ncbf_core::training::TrainConfig;

fn default_delta() -> f64 {
    PointMassParams::default().delta
}

fn default_radius() -> f64 {
    UnicycleParams::default().radius
}

fn default_safe_distance() -> f64 {
    UnicycleParams::default().safe_distance
}

/// Benchmark system selector plus physical parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    PointMass {
        #[serde(default = "default_delta")]
        delta: f64,
    },
    Unicycle {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_safe_distance")]
        safe_distance: f64,
    },
}

impl SystemConfig {
    pub fn to_model(&self) -> SystemModel {
        match self {
            SystemConfig::PointMass { delta } => {
                SystemModel::point_mass(PointMassParams { delta: *delta })
            }
            SystemConfig::Unicycle { radius, safe_distance } => {
                SystemModel::unicycle(UnicycleParams {
                    radius: *radius,
                    safe_distance: *safe_distance,
                })
            }
        }
    }

    /// The analytic barrier the scripted expert filters against.
    pub fn analytic_barrier(&self) -> AnalyticBarrier {
        match self {
            SystemConfig::PointMass { .. } => AnalyticBarrier::PointMassSpec,
            SystemConfig::Unicycle { radius, safe_distance } => {
                AnalyticBarrier::UnicycleExpert(UnicycleParams {
                    radius: *radius,
                    safe_distance: *safe_distance,
                })
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SystemConfig::PointMass { .. } => "point_mass",
            SystemConfig::Unicycle { .. } => "unicycle",
        }
    }
}

/// Reference task for an expert rollout or an evaluation rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    TrackCircle { radius: f64 },
    GoToGoal { goal: Vec<f64> },
}

impl TaskConfig {
    pub fn to_task(&self) -> Task {
        match self {
            TaskConfig::TrackCircle { radius } => Task::track_circle(*radius),
            TaskConfig::GoToGoal { goal } => Task::go_to_goal(DVector::from_row_slice(goal)),
        }
    }
}

/// Scripted expert: a reference task per trajectory (cycled), filtered
/// through the analytic barrier, started from a seeded uniform box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub tasks: Vec<TaskConfig>,
    pub kappa_gain: f64,
    pub init_center: Vec<f64>,
    pub init_half_width: f64,
}

/// Dataset construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub seed: u64,
    pub n_trajectories: usize,
    pub horizon: usize,
    pub dt: f64,
    /// Optional cap on expert records kept (in generation order), for
    /// experiments that fix the demonstration budget exactly.
    #[serde(default)]
    pub n_samples: Option<usize>,
    pub region: RegionSpec,
    pub quotas: RegionQuotas,
    pub calib_fraction: f64,
    pub expert: ExpertConfig,
}

/// Evaluation protocol: filtered rollouts on sampled tasks, optional
/// point-mass radius sweep, optional barrier-surface grid export.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub seed: u64,
    pub n_rollouts: usize,
    pub rollout: RolloutConfig,
    pub tasks: Vec<TaskConfig>,
    pub init_center: Vec<f64>,
    pub init_half_width: f64,
    /// Empty list skips the radius sweep.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default = "default_rollouts_per_radius")]
    pub rollouts_per_radius: usize,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub theta_slices: Vec<f64>,
    /// Trajectory CSVs written by the rollout subcommand.
    #[serde(default = "default_export_trajectories")]
    pub n_export_trajectories: usize,
    #[serde(default)]
    pub thresholds: ComparisonThresholds,
}

fn default_rollouts_per_radius() -> usize {
    10
}

fn default_export_trajectories() -> usize {
    5
}

/// Full run description; everything a rerun needs besides the binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    /// Margins used by the fixed-margin baseline trainer.
    #[serde(default = "MarginVector::zero")]
    pub fm_margins: MarginVector,
    pub conformal: ConformalConfig,
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

fn bad(field: &str, why: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("{field}: {why}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One seed to rule every stage; used by the --seed override.
    pub fn override_seed(&mut self, seed: u64) {
        self.sampling.seed = seed;
        self.train.rng_seed = seed;
        self.evaluation.seed = seed;
    }

    /// Hex digest of the canonical (compact JSON) form, truncated; doubles
    /// as the run directory name. The output directory is excluded so the
    /// same experiment keeps its identity wherever it is stored.
    pub fn run_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&keyed).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn validate(&self) -> Result<()> {
        let state_dim = self.to_model_dims().0;

        let s = &self.sampling;
        if s.n_trajectories == 0 {
            return Err(bad("sampling.n_trajectories", "must be positive"));
        }
        if s.horizon == 0 {
            return Err(bad("sampling.horizon", "must be positive"));
        }
        if !(s.dt > 0.0) {
            return Err(bad("sampling.dt", format!("must be positive, got {}", s.dt)));
        }
        if s.n_samples == Some(0) {
            return Err(bad("sampling.n_samples", "must be positive when set"));
        }
        if !(s.region.epsilon_ball > 0.0) {
            return Err(bad(
                "sampling.region.epsilon_ball",
                format!("must be positive, got {}", s.region.epsilon_ball),
            ));
        }
        if !(s.region.sigma_band > 0.0) {
            return Err(bad(
                "sampling.region.sigma_band",
                format!("must be positive, got {}", s.region.sigma_band),
            ));
        }
        if !(s.region.buffer_width > 0.0) {
            return Err(bad(
                "sampling.region.buffer_width",
                format!("must be positive, got {}", s.region.buffer_width),
            ));
        }
        if !(s.region.p_norm >= 1.0) {
            return Err(bad(
                "sampling.region.p_norm",
                format!("must be >= 1, got {}", s.region.p_norm),
            ));
        }
        if s.quotas.n_safe == 0 || s.quotas.n_unsafe == 0 || s.quotas.n_buffer == 0 {
            return Err(bad("sampling.quotas", "all region quotas must be positive"));
        }
        if !(s.calib_fraction > 0.0 && s.calib_fraction < 1.0) {
            return Err(bad(
                "sampling.calib_fraction",
                format!("must be in (0,1), got {}", s.calib_fraction),
            ));
        }
        self.validate_expert(state_dim)?;

        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return Err(bad("train.learning_rate", "must be positive"));
        }
        if t.max_epochs_per_stage == 0 {
            return Err(bad("train.max_epochs_per_stage", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        if !(t.kappa_gain > 0.0) {
            return Err(bad("train.kappa_gain", "must be positive"));
        }
        if !(t.loss_tolerance >= 0.0) {
            return Err(bad("train.loss_tolerance", "must be nonnegative"));
        }
        if !(t.momentum >= 0.0 && t.momentum < 1.0) {
            return Err(bad("train.momentum", format!("must be in [0,1), got {}", t.momentum)));
        }
        if !self.fm_margins.is_finite() {
            return Err(bad("fm_margins", "must be finite"));
        }

        self.conformal.validate().map_err(|e| bad("conformal", e))?;
        self.validate_evaluation(state_dim)?;
        Ok(())
    }

    fn validate_expert(&self, state_dim: usize) -> Result<()> {
        let e = &self.sampling.expert;
        if e.tasks.is_empty() {
            return Err(bad("sampling.expert.tasks", "need at least one task"));
        }
        for (i, task) in e.tasks.iter().enumerate() {
            validate_task(task, &self.system, &format!("sampling.expert.tasks[{i}]"))?;
        }
        if !(e.kappa_gain > 0.0) {
            return Err(bad("sampling.expert.kappa_gain", "must be positive"));
        }
        if e.init_center.len() != state_dim {
            return Err(bad(
                "sampling.expert.init_center",
                format!("expected {state_dim} entries, got {}", e.init_center.len()),
            ));
        }
        if !(e.init_half_width > 0.0) {
            return Err(bad("sampling.expert.init_half_width", "must be positive"));
        }
        Ok(())
    }

    fn validate_evaluation(&self, state_dim: usize) -> Result<()> {
        let v = &self.evaluation;
        if v.n_rollouts == 0 {
            return Err(bad("evaluation.n_rollouts", "must be positive"));
        }
        if v.rollout.horizon_steps == 0 {
            return Err(bad("evaluation.rollout.horizon_steps", "must be positive"));
        }
        if !(v.rollout.dt > 0.0) {
            return Err(bad("evaluation.rollout.dt", "must be positive"));
        }
        if !(v.rollout.kappa_gain > 0.0) {
            return Err(bad("evaluation.rollout.kappa_gain", "must be positive"));
        }
        if v.tasks.is_empty() {
            return Err(bad("evaluation.tasks", "need at least one task"));
        }
        for (i, task) in v.tasks.iter().enumerate() {
            validate_task(task, &self.system, &format!("evaluation.tasks[{i}]"))?;
        }
        if v.init_center.len() != state_dim {
            return Err(bad(
                "evaluation.init_center",
                format!("expected {state_dim} entries, got {}", v.init_center.len()),
            ));
        }
        if !(v.init_half_width > 0.0) {
            return Err(bad("evaluation.init_half_width", "must be positive"));
        }
        if !v.radii.is_empty() {
            if v.radii.windows(2).any(|w| w[0] >= w[1]) || v.radii[0] <= 0.0 {
                return Err(bad("evaluation.radii", "must be positive and strictly increasing"));
            }
            if v.rollouts_per_radius == 0 {
                return Err(bad("evaluation.rollouts_per_radius", "must be positive"));
            }
        }
        if let Some(grid) = &v.grid {
            if grid.resolution < 2 {
                return Err(bad("evaluation.grid.resolution", "must be at least 2"));
            }
            if !(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min) {
                return Err(bad("evaluation.grid", "axis ranges must be nonempty"));
            }
            if state_dim == 3 && v.theta_slices.is_empty() {
                return Err(bad(
                    "evaluation.theta_slices",
                    "3-D surface export needs at least one heading slice",
                ));
            }
        }
        Ok(())
    }

    fn to_model_dims(&self) -> (usize, usize) {
        match self.system {
            SystemConfig::PointMass { .. } => (2, 2),
            SystemConfig::Unicycle { .. } => (3, 2),
        }
    }
}

fn validate_task(task: &TaskConfig, system: &SystemConfig, field: &str) -> Result<()> {
    match (task, system) {
        (TaskConfig::TrackCircle { radius }, SystemConfig::PointMass { .. }) => {
            if !(*radius > 0.0) {
                return Err(bad(field, "circle radius must be positive"));
            }
        }
        (TaskConfig::GoToGoal { goal }, SystemConfig::Unicycle { .. }) => {
            if goal.len() != 3 {
                return Err(bad(field, format!("goal pose needs 3 entries, got {}", goal.len())));
            }
        }
        (TaskConfig::TrackCircle { .. }, SystemConfig::Unicycle { .. }) => {
            return Err(bad(field, "track_circle is a point-mass task"));
        }
        (TaskConfig::GoToGoal { .. }, SystemConfig::PointMass { .. }) => {
            return Err(bad(field, "go_to_goal is a unicycle task"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> RunConfig {
        RunConfig {
            system: SystemConfig::PointMass { delta: 1.0 },
            sampling: SamplingConfig {
                seed: 1,
                n_trajectories: 4,
                horizon: 50,
                dt: 0.05,
                n_samples: None,
                region: RegionSpec::default(),
                quotas: RegionQuotas { n_safe: 40, n_unsafe: 40, n_buffer: 40 },
                calib_fraction: 0.5,
                expert: ExpertConfig {
                    tasks: vec![TaskConfig::TrackCircle { radius: 0.5 }],
                    kappa_gain: 1.0,
                    init_center: vec![0.0, 0.0],
                    init_half_width: 0.4,
                },
            },
            train: TrainConfig::default(),
            fm_margins: MarginVector::zero(),
            conformal: ConformalConfig::default(),
            evaluation: EvaluationConfig {
                seed: 2,
                n_rollouts: 10,
                rollout: RolloutConfig::default(),
                tasks: vec![TaskConfig::TrackCircle { radius: 0.5 }],
                init_center: vec![0.0, 0.0],
                init_half_width: 0.4,
                radii: vec![],
                rollouts_per_radius: 10,
                grid: None,
                theta_slices: vec![],
                n_export_trajectories: 2,
                thresholds: ComparisonThresholds::default(),
            },
            output_dir: PathBuf::from("runs"),
        }
    }

    #[test]
    fn valid_config_round_trips_with_stable_id() {
        let cfg = base_config();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.run_id(), back.run_id());
        assert_eq!(cfg.run_id().len(), 12);
    }

    #[test]
    fn seed_override_changes_the_run_id() {
        let mut cfg = base_config();
        let original = cfg.run_id();
        cfg.override_seed(99);
        assert_eq!(cfg.sampling.seed, 99);
        assert_eq!(cfg.train.rng_seed, 99);
        assert_eq!(cfg.evaluation.seed, 99);
        assert_ne!(cfg.run_id(), original);
    }

    #[test]
    fn nonpositive_sigma_is_rejected_by_name() {
        let mut cfg = base_config();
        cfg.sampling.region.sigma_band = 0.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("sampling.region.sigma_band"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut doc = serde_json::to_value(base_config()).unwrap();
        doc["sampling"]["typo_field"] = serde_json::json!(1);
        let err = serde_json::from_value::<RunConfig>(doc).unwrap_err().to_string();
        assert!(err.contains("typo_field"), "{err}");
    }

    #[test]
    fn task_system_mismatch_is_rejected() {
        let mut cfg = base_config();
        cfg.evaluation.tasks = vec![TaskConfig::GoToGoal { goal: vec![5.0, 0.0, 3.14] }];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("evaluation.tasks[0]"), "{err}");
    }
}
