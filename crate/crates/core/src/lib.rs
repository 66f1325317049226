//! Neural control barrier functions learned from expert demonstrations,
//! with split-conformal margin calibration and closed-form QP filtering.
//!
//! Pipeline: generate expert trajectories ([`sampling`]), sample labeled
//! regions around them, train a barrier candidate ([`training`]) with
//! hinge losses ([`certification`]), calibrate hinge margins on held-out
//! data, then deploy the net inside the safety filter ([`safe_control`])
//! and measure outcomes ([`evaluation`]).

pub mod certification;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod mlp;
pub mod sampling;
pub mod safe_control;
pub mod training;

pub use certification::{
    calibrate, conformal_quantile, reg_incomplete_beta, total_loss, validity_check,
    CalibrationReport, ConformalConfig, LossWeights, MarginVector,
};
pub use dynamics::{rk4_step, PointMassParams, SystemModel, UnicycleParams};
pub use error::{Error, Result};
pub use evaluation::{
    compare_report, export_surface, radius_sweep, safety_rate, ComparisonThresholds, GridSpec,
    NetEvaluation, RadiusSweepResult, RolloutConfig, SafetyRateResult, SweepConfig, SweepResult,
};
pub use mlp::{Activation, BarrierNet, Optimizer, ParamGrads};
pub use safe_control::{
    qp_filter, reference_controller, rollout, AnalyticBarrier, Barrier, FilterOutput, Task,
    Trajectory,
};
pub use sampling::{
    estimate_lipschitz, generate_expert_trajectories, membership_d, membership_n, radial_sample,
    split, ExpertPolicy, ExpertRecord, LabeledDataset, RegionQuotas, RegionSpec,
};
pub use training::{
    run_cped, run_fm_baseline, train_stage, OptimizerChoice, TrainConfig, TrainingReport,
};
