//! Quantitative protocols: batched safety rates, the radius-generalization
//! sweep, barrier surface export, and the two-net comparison report.
//!
//! Safety is always judged against the analytic safe set, never against the
//! learned barrier's own sign.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::safe_control::{rollout, Barrier, Task};

/// Shared rollout parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    pub kappa_gain: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { horizon_steps: 1000, dt: 0.01, kappa_gain: 1.0 }
    }
}

/// Outcome of a batch of monitored rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyRateResult {
    pub n_rollouts: usize,
    pub n_safe: usize,
    pub rate_percent: f64,
    /// Rollouts cut short by filter infeasibility; counted unsafe.
    pub n_infeasible: usize,
    /// Rollouts whose closed loop left the representable range (runaway
    /// filter output far from data); counted unsafe.
    pub n_diverged: usize,
    /// Per-rollout safety flags, in sampling order.
    pub outcomes: Vec<bool>,
    /// Smallest filter constraint slack seen anywhere in the batch.
    pub min_slack: f64,
}

/// Run `n_rollouts` filtered rollouts from sampled tasks and count the ones
/// that never leave the safe set. Each rollout draws its task from an
/// independent seeded stream, so outcomes do not depend on batch order.
pub fn safety_rate<B: Barrier + ?Sized>(
    model: &SystemModel,
    barrier: &B,
    task_sampler: &dyn Fn(&mut ChaCha8Rng) -> (Task, DVector<f64>),
    n_rollouts: usize,
    cfg: &RolloutConfig,
    rng_seed: u64,
) -> Result<SafetyRateResult> {
    if n_rollouts == 0 {
        return Err(Error::InvalidInput("n_rollouts must be positive".into()));
    }
    let mut outcomes = Vec::with_capacity(n_rollouts);
    let mut n_infeasible = 0usize;
    let mut n_diverged = 0usize;
    let mut min_slack = f64::INFINITY;
    for i in 0..n_rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(i as u64);
        let (task, x0) = task_sampler(&mut rng);
        match rollout(
            model,
            barrier,
            &task,
            &x0,
            cfg.horizon_steps,
            cfg.dt,
            cfg.kappa_gain,
            &|x| model.is_safe(x),
        ) {
            Ok(traj) => {
                if traj.infeasible_at.is_some() {
                    n_infeasible += 1;
                }
                min_slack = min_slack.min(traj.min_slack);
                outcomes.push(!traj.violated && traj.infeasible_at.is_none());
            }
            Err(Error::IntegrationDiverged) => {
                n_diverged += 1;
                outcomes.push(false);
            }
            Err(e) => return Err(e),
        }
    }
    let n_safe = outcomes.iter().filter(|&&s| s).count();
    Ok(SafetyRateResult {
        n_rollouts,
        n_safe,
        rate_percent: 100.0 * n_safe as f64 / n_rollouts as f64,
        n_infeasible,
        n_diverged,
        outcomes,
        min_slack,
    })
}

/// Sweep parameters for the point-mass generalization experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Circle radii, strictly increasing.
    pub radii: Vec<f64>,
    pub rollouts_per_radius: usize,
    pub rollout: RolloutConfig,
    /// Initial states are uniform over this centered box half-width.
    pub init_half_width: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let radii = (0..16).map(|i| 0.1 + 0.2 * i as f64).collect();
        Self {
            radii,
            rollouts_per_radius: 10,
            rollout: RolloutConfig::default(),
            init_half_width: 0.5,
        }
    }
}

/// Per-net sweep outcome across the radius grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusSweepResult {
    pub radii: Vec<f64>,
    /// Violations per radius (violated or infeasible rollouts).
    pub violations: Vec<usize>,
    pub rollouts_per_radius: usize,
    /// Largest radius of the zero-violation prefix; None when even the
    /// smallest radius had violations.
    pub max_safe_radius: Option<f64>,
    pub min_slack: f64,
}

/// Prefix rule: the reported generalization radius is the last radius of the
/// initial zero-violation run, which keeps the summary monotone even when
/// raw outcomes are not.
pub fn prefix_safe_radius(radii: &[f64], violations: &[usize]) -> Option<f64> {
    let mut best = None;
    for (r, &v) in radii.iter().zip(violations) {
        if v == 0 {
            best = Some(*r);
        } else {
            break;
        }
    }
    best
}

/// Track circles of growing radius under one barrier and record violations.
pub fn radius_sweep<B: Barrier + ?Sized>(
    model: &SystemModel,
    barrier: &B,
    cfg: &SweepConfig,
    rng_seed: u64,
) -> Result<RadiusSweepResult> {
    if cfg.radii.is_empty() {
        return Err(Error::InvalidInput("radii must be nonempty".into()));
    }
    if cfg.radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("radii must be strictly increasing".into()));
    }
    if cfg.rollouts_per_radius == 0 {
        return Err(Error::InvalidInput("rollouts_per_radius must be positive".into()));
    }
    let mut violations = Vec::with_capacity(cfg.radii.len());
    let mut min_slack = f64::INFINITY;
    for (ri, &radius) in cfg.radii.iter().enumerate() {
        let task = Task::track_circle(radius);
        let mut bad = 0usize;
        for k in 0..cfg.rollouts_per_radius {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream((ri * cfg.rollouts_per_radius + k) as u64);
            let w = cfg.init_half_width;
            let x0 = DVector::from_fn(model.state_dim, |_, _| {
                use rand::Rng;
                rng.gen_range(-w..w)
            });
            match rollout(
                model,
                barrier,
                &task,
                &x0,
                cfg.rollout.horizon_steps,
                cfg.rollout.dt,
                cfg.rollout.kappa_gain,
                &|x| model.is_safe(x),
            ) {
                Ok(traj) => {
                    min_slack = min_slack.min(traj.min_slack);
                    if traj.violated || traj.infeasible_at.is_some() {
                        bad += 1;
                    }
                }
                Err(Error::IntegrationDiverged) => bad += 1,
                Err(e) => return Err(e),
            }
        }
        violations.push(bad);
    }
    let max_safe_radius = prefix_safe_radius(&cfg.radii, &violations);
    Ok(RadiusSweepResult {
        radii: cfg.radii.clone(),
        violations,
        rollouts_per_radius: cfg.rollouts_per_radius,
        max_safe_radius,
        min_slack,
    })
}

/// Multi-size aggregation of sweep rows (one per dataset size).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub sample_sizes: Vec<usize>,
    pub radii: Vec<f64>,
    pub rows: Vec<RadiusSweepResult>,
}

impl SweepResult {
    pub fn new(sample_sizes: Vec<usize>, rows: Vec<RadiusSweepResult>) -> Result<Self> {
        if sample_sizes.len() != rows.len() || rows.is_empty() {
            return Err(Error::InvalidInput(
                "one sweep row required per sample size".into(),
            ));
        }
        let radii = rows[0].radii.clone();
        if rows.iter().any(|r| r.radii != radii) {
            return Err(Error::InvalidInput("sweep rows must share the radius grid".into()));
        }
        Ok(Self { sample_sizes, radii, rows })
    }
}

/// Regular evaluation grid over the first two state coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

/// Evaluate the barrier on the grid and write surface.csv plus a JSON
/// sidecar with the grid metadata. For 3-D states the grid is repeated at
/// each fixed heading in `theta_slices`; 2-D states ignore the slices.
pub fn export_surface<B: Barrier + ?Sized>(
    barrier: &B,
    state_dim: usize,
    grid: &GridSpec,
    theta_slices: &[f64],
    csv_path: &Path,
    meta_path: &Path,
) -> Result<usize> {
    if grid.resolution < 2 {
        return Err(Error::InvalidInput("grid resolution must be at least 2".into()));
    }
    if !(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min) {
        return Err(Error::InvalidInput("grid ranges must be nonempty".into()));
    }
    let slices: Vec<f64> = match state_dim {
        2 => vec![f64::NAN],
        3 => {
            if theta_slices.is_empty() {
                return Err(Error::InvalidInput("3-D surface export needs theta slices".into()));
            }
            theta_slices.to_vec()
        }
        d => {
            return Err(Error::InvalidInput(format!("surface export supports 2-D or 3-D, got {d}")))
        }
    };
    let n = grid.resolution;
    let step_x = (grid.x_max - grid.x_min) / (n - 1) as f64;
    let step_y = (grid.y_max - grid.y_min) / (n - 1) as f64;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    if state_dim == 2 {
        wtr.write_record(["x0", "x1", "h"])?;
    } else {
        wtr.write_record(["x0", "x1", "theta", "h"])?;
    }
    let mut rows = 0usize;
    for &theta in &slices {
        for j in 0..n {
            for i in 0..n {
                let x = grid.x_min + step_x * i as f64;
                let y = grid.y_min + step_y * j as f64;
                let state = if state_dim == 2 {
                    DVector::from_vec(vec![x, y])
                } else {
                    DVector::from_vec(vec![x, y, theta])
                };
                let h = barrier.value(&state)?;
                if state_dim == 2 {
                    wtr.write_record([format!("{x}"), format!("{y}"), format!("{h}")])?;
                } else {
                    wtr.write_record([
                        format!("{x}"),
                        format!("{y}"),
                        format!("{theta}"),
                        format!("{h}"),
                    ])?;
                }
                rows += 1;
            }
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(csv_path, bytes)?;

    #[derive(Serialize)]
    struct SurfaceMeta<'a> {
        grid: &'a GridSpec,
        state_dim: usize,
        theta_slices: Vec<f64>,
        n_rows: usize,
    }
    let meta = SurfaceMeta {
        grid,
        state_dim,
        theta_slices: if state_dim == 3 { slices } else { Vec::new() },
        n_rows: rows,
    };
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(rows)
}

/// Pass/fail thresholds for the two-net comparison.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonThresholds {
    /// Calibrated net must beat the baseline rate by this many points.
    pub rate_gap_pp: f64,
    /// And clear this absolute safety rate.
    pub min_calibrated_rate: f64,
    /// Sweep: calibrated generalization radius floor.
    pub min_calibrated_radius: f64,
}

impl Default for ComparisonThresholds {
    fn default() -> Self {
        Self { rate_gap_pp: 3.0, min_calibrated_rate: 95.0, min_calibrated_radius: 1.5 }
    }
}

/// Evaluation results for one trained net, tagged with the config digest so
/// mismatched experiments cannot be compared silently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetEvaluation {
    pub label: String,
    pub config_digest: String,
    pub seed: u64,
    pub safety: Option<SafetyRateResult>,
    pub sweep: Option<RadiusSweepResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_digest: String,
    pub baseline_label: String,
    pub calibrated_label: String,
    pub baseline_rate: Option<f64>,
    pub calibrated_rate: Option<f64>,
    pub rate_gap_pp: Option<f64>,
    pub baseline_radius: Option<f64>,
    pub calibrated_radius: Option<f64>,
    pub thresholds: ComparisonThresholds,
    pub rate_pass: Option<bool>,
    pub radius_pass: Option<bool>,
}

/// Build the side-by-side comparison and write Markdown + JSON artifacts.
pub fn compare_report(
    baseline: &NetEvaluation,
    calibrated: &NetEvaluation,
    thresholds: &ComparisonThresholds,
    md_path: &Path,
    json_path: &Path,
) -> Result<ComparisonReport> {
    if baseline.config_digest != calibrated.config_digest {
        return Err(Error::InvalidComparison(format!(
            "config digests differ: {} vs {}",
            baseline.config_digest, calibrated.config_digest
        )));
    }
    let baseline_rate = baseline.safety.as_ref().map(|s| s.rate_percent);
    let calibrated_rate = calibrated.safety.as_ref().map(|s| s.rate_percent);
    let rate_gap_pp = match (baseline_rate, calibrated_rate) {
        (Some(b), Some(c)) => Some(c - b),
        _ => None,
    };
    let baseline_radius =
        baseline.sweep.as_ref().map(|s| s.max_safe_radius.unwrap_or(0.0));
    let calibrated_radius =
        calibrated.sweep.as_ref().map(|s| s.max_safe_radius.unwrap_or(0.0));
    let rate_pass = match (rate_gap_pp, calibrated_rate) {
        (Some(gap), Some(c)) => {
            Some(gap >= thresholds.rate_gap_pp && c >= thresholds.min_calibrated_rate)
        }
        _ => None,
    };
    let radius_pass = match (baseline_radius, calibrated_radius) {
        (Some(b), Some(c)) => Some(c >= b && c >= thresholds.min_calibrated_radius),
        _ => None,
    };
    let report = ComparisonReport {
        config_digest: baseline.config_digest.clone(),
        baseline_label: baseline.label.clone(),
        calibrated_label: calibrated.label.clone(),
        baseline_rate,
        calibrated_rate,
        rate_gap_pp,
        baseline_radius,
        calibrated_radius,
        thresholds: *thresholds,
        rate_pass,
        radius_pass,
    };

    let mut md = String::new();
    md.push_str("# Barrier comparison\n\n");
    md.push_str(&format!("Config digest: `{}`\n\n", report.config_digest));
    md.push_str(&format!(
        "| metric | {} | {} |\n|---|---|---|\n",
        report.baseline_label, report.calibrated_label
    ));
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    md.push_str(&format!(
        "| safety rate (%) | {} | {} |\n",
        fmt(report.baseline_rate),
        fmt(report.calibrated_rate)
    ));
    md.push_str(&format!(
        "| max safe radius | {} | {} |\n",
        fmt(report.baseline_radius),
        fmt(report.calibrated_radius)
    ));
    if let Some(gap) = report.rate_gap_pp {
        md.push_str(&format!("\nRate gap: {gap:.2} pp"));
        md.push_str(&format!(
            " (threshold {:.1} pp, calibrated floor {:.1}%): {}\n",
            thresholds.rate_gap_pp,
            thresholds.min_calibrated_rate,
            if report.rate_pass == Some(true) { "PASS" } else { "FAIL" }
        ));
    }
    if report.radius_pass.is_some() {
        md.push_str(&format!(
            "Radius check (calibrated ≥ baseline and ≥ {:.1}): {}\n",
            thresholds.min_calibrated_radius,
            if report.radius_pass == Some(true) { "PASS" } else { "FAIL" }
        ));
    }
    fs::write(md_path, md)?;
    fs::write(json_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
