//! Subcommand implementations. Every command loads the same config document,
//! resolves the run directory from the config digest, and reads or writes
//! artifacts there; reruns with identical configs are byte-identical except
//! for fields named `timestamp_unix`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ncbf_core::certification::{calibrate, CalibrationReport, MarginVector};
use ncbf_core::evaluation::{
    compare_report, export_surface, radius_sweep, safety_rate, ComparisonReport, NetEvaluation,
    SweepConfig,
};
use ncbf_core::mlp::BarrierNet;
use ncbf_core::safe_control::{rollout, Task};
use ncbf_core::sampling::{
    generate_expert_trajectories, radial_sample, split, ExpertPolicy, ExpertRecord,
    LabeledDataset,
};
use ncbf_core::training::{run_cped, run_fm_baseline};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NONCONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ncbf", version, about = "Conformal neural control barrier pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations and the labeled dataset
    Generate(CommonArgs),
    /// Train a barrier network and write its checkpoint
    Train(ModeArgs),
    /// Calibrate an existing checkpoint on the held-out split
    Calibrate(ModeArgs),
    /// Export filtered closed-loop trajectories as CSV
    Rollout(ModeArgs),
    /// Measure safety rates and radius sweeps, write the run report
    Evaluate(EvaluateArgs),
    /// Export the learned barrier surface on the configured grid
    ExportSurface(ModeArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration JSON
    #[arg(long)]
    pub config: PathBuf,
    /// Override every stage seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Which training mode's checkpoint the command targets
    #[arg(long, value_enum, default_value_t = Mode::Cped)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoints to evaluate, baseline first; defaults to the run
    /// directory's fm and cped checkpoints
    #[arg(value_name = "CHECKPOINT")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fm,
    Cped,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Fm => "fm",
            Mode::Cped => "cped",
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, dir) = effective_config(&args)?;
            cmd_generate(&cfg, &dir)
        }
        Command::Train(args) => {
            let (cfg, dir) = effective_config(&args.common)?;
            cmd_train(&cfg, &dir, args.mode)
        }
        Command::Calibrate(args) => {
            let (cfg, dir) = effective_config(&args.common)?;
            cmd_calibrate(&cfg, &dir, args.mode)
        }
        Command::Rollout(args) => {
            let (cfg, dir) = effective_config(&args.common)?;
            cmd_rollout(&cfg, &dir, args.mode)
        }
        Command::Evaluate(args) => {
            let (cfg, dir) = effective_config(&args.common)?;
            cmd_evaluate(&cfg, &dir, &args.checkpoints)
        }
        Command::ExportSurface(args) => {
            let (cfg, dir) = effective_config(&args.common)?;
            cmd_export_surface(&cfg, &dir, args.mode)
        }
    }
}

/// Load the config, apply CLI overrides, resolve the run directory.
pub fn effective_config(args: &CommonArgs) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let dir = cfg.run_dir();
    Ok((cfg, dir))
}

fn timestamp_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn checkpoint_path(dir: &Path, mode: Mode) -> PathBuf {
    dir.join(format!("checkpoint.{}.json", mode.label()))
}

fn load_checkpoint(dir: &Path, mode: Mode) -> anyhow::Result<BarrierNet> {
    let path = checkpoint_path(dir, mode);
    if !path.exists() {
        bail!(
            "{} not found; run `ncbf train --mode {}` with this config first",
            path.display(),
            mode.label()
        );
    }
    BarrierNet::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> anyhow::Result<LabeledDataset> {
    let path = dir.join("dataset.csv");
    if !path.exists() {
        bail!("{} not found; run `ncbf generate` with this config first", path.display());
    }
    LabeledDataset::read_csv(&path, cfg.sampling.seed)
        .with_context(|| format!("reading {}", path.display()))
}

/// Draw an evaluation task and initial state. Task index first, then the
/// state coordinates, so outcomes are reproducible from the stream alone.
fn sample_eval_case(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> (Task, DVector<f64>) {
    let v = &cfg.evaluation;
    let task = v.tasks[rng.gen_range(0..v.tasks.len())].to_task();
    let w = v.init_half_width;
    let x0 =
        DVector::from_fn(v.init_center.len(), |i, _| v.init_center[i] + rng.gen_range(-w..w));
    (task, x0)
}

#[derive(Debug, Serialize)]
struct SplitManifest {
    split_seed: u64,
    calib_fraction: f64,
    expert_records: usize,
    expert_steps_skipped: usize,
    dataset_counts: RegionCounts,
    train_counts: RegionCounts,
    calib_counts: RegionCounts,
}

#[derive(Debug, Serialize)]
struct RegionCounts {
    safe: usize,
    unsafe_region: usize,
    expert: usize,
    buffer: usize,
}

impl From<(usize, usize, usize, usize)> for RegionCounts {
    fn from((safe, unsafe_region, expert, buffer): (usize, usize, usize, usize)) -> Self {
        Self { safe, unsafe_region, expert, buffer }
    }
}

pub fn cmd_generate(cfg: &RunConfig, dir: &Path) -> anyhow::Result<i32> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;

    let model = cfg.system.to_model();
    let barrier = cfg.system.analytic_barrier();
    let s = &cfg.sampling;
    let e = &s.expert;

    let mut records: Vec<ExpertRecord> = Vec::new();
    let mut skipped = 0usize;
    let n_tasks = e.tasks.len();
    for (ti, task_cfg) in e.tasks.iter().enumerate() {
        let n_traj = s.n_trajectories / n_tasks
            + usize::from(ti < s.n_trajectories % n_tasks);
        if n_traj == 0 {
            continue;
        }
        let task = task_cfg.to_task();
        let center = &e.init_center;
        let w = e.init_half_width;
        let expert =
            ExpertPolicy::filtered(&model, &barrier, &task, e.kappa_gain, |rng: &mut ChaCha8Rng| {
                DVector::from_fn(center.len(), |i, _| center[i] + rng.gen_range(-w..w))
            });
        let generation = generate_expert_trajectories(
            &model,
            &expert,
            n_traj,
            s.horizon,
            s.dt,
            s.seed.wrapping_add(ti as u64),
        )?;
        records.extend(generation.records);
        skipped += generation.skipped;
    }
    if let Some(n) = s.n_samples {
        if records.len() < n {
            bail!(
                "expert run produced {} records but sampling.n_samples asks for {n}; \
                 raise n_trajectories or horizon",
                records.len()
            );
        }
        records.truncate(n);
    }

    let dataset = radial_sample(&model, s.quotas, &s.region, &records, s.seed)?;
    let (train_ds, calib_ds) = split(&dataset, s.calib_fraction)?;

    dataset.write_csv(&dir.join("dataset.csv"), model.state_dim, model.control_dim)?;
    let manifest = SplitManifest {
        split_seed: s.seed,
        calib_fraction: s.calib_fraction,
        expert_records: records.len(),
        expert_steps_skipped: skipped,
        dataset_counts: dataset.counts().into(),
        train_counts: train_ds.counts().into(),
        calib_counts: calib_ds.counts().into(),
    };
    write_json(&dir.join("split.json"), &manifest)?;

    let (n_s, n_u, n_e, n_b) = dataset.counts();
    println!(
        "generate: run {} wrote {} points (safe {n_s}, unsafe {n_u}, expert {n_e}, buffer {n_b})",
        cfg.run_id(),
        n_s + n_u + n_e + n_b,
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct TrainingDoc {
    mode: &'static str,
    stage_losses: Vec<Vec<f64>>,
    final_margins: MarginVector,
    /// None for the fixed-margin baseline, which has no convergence notion.
    converged: Option<bool>,
    rounds_used: Option<usize>,
    timestamp_unix: u64,
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path, mode: Mode) -> anyhow::Result<i32> {
    let dataset = load_dataset(cfg, dir)?;
    let (train_ds, calib_ds) = split(&dataset, cfg.sampling.calib_fraction)?;
    let model = cfg.system.to_model();

    match mode {
        Mode::Fm => {
            let (net, curve) = run_fm_baseline(&train_ds, &model, &cfg.fm_margins, &cfg.train)?;
            net.save(&checkpoint_path(dir, mode))?;
            let doc = TrainingDoc {
                mode: mode.label(),
                stage_losses: vec![curve],
                final_margins: cfg.fm_margins,
                converged: None,
                rounds_used: None,
                timestamp_unix: timestamp_unix(),
            };
            write_json(&dir.join("training.fm.json"), &doc)?;
            println!("train: fm checkpoint written to {}", checkpoint_path(dir, mode).display());
            Ok(EXIT_OK)
        }
        Mode::Cped => {
            let (net, report) = run_cped(&train_ds, &calib_ds, &model, &cfg.train, &cfg.conformal)?;
            net.save(&checkpoint_path(dir, mode))?;
            let doc = TrainingDoc {
                mode: mode.label(),
                stage_losses: report.stage_losses,
                final_margins: report.final_margins,
                converged: Some(report.converged),
                rounds_used: Some(report.rounds_used),
                timestamp_unix: timestamp_unix(),
            };
            write_json(&dir.join("training.cped.json"), &doc)?;
            write_json(&dir.join("calibration.json"), &report.calibration_rounds)?;
            println!(
                "train: cped checkpoint written, {} calibration round(s), converged={}",
                report.rounds_used, report.converged
            );
            if report.converged {
                Ok(EXIT_OK)
            } else {
                eprintln!(
                    "train: margins still violated after {} rounds; exiting 2",
                    report.rounds_used
                );
                Ok(EXIT_NONCONVERGED)
            }
        }
    }
}

pub fn cmd_calibrate(cfg: &RunConfig, dir: &Path, mode: Mode) -> anyhow::Result<i32> {
    let net = load_checkpoint(dir, mode)?;
    let dataset = load_dataset(cfg, dir)?;
    let (_, calib_ds) = split(&dataset, cfg.sampling.calib_fraction)?;
    let model = cfg.system.to_model();
    let report: CalibrationReport =
        calibrate(&net, &calib_ds, &model, cfg.train.kappa_gain, &cfg.conformal)?;
    write_json(&dir.join("calibration.json"), &vec![&report])?;
    let [qs, qu, qd] = report.q_hats();
    println!(
        "calibrate: q_hats safe {qs:.6} unsafe {qu:.6} derivative {qd:.6}, valid={}",
        report.valid
    );
    if report.all_q_hats_nonpositive() {
        Ok(EXIT_OK)
    } else {
        eprintln!("calibrate: positive quantiles remain; exiting 2");
        Ok(EXIT_NONCONVERGED)
    }
}

pub fn cmd_rollout(cfg: &RunConfig, dir: &Path, mode: Mode) -> anyhow::Result<i32> {
    let net = load_checkpoint(dir, mode)?;
    let model = cfg.system.to_model();
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    let v = &cfg.evaluation;
    let mut n_safe = 0usize;
    for i in 0..v.n_export_trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
        rng.set_stream(i as u64);
        let (task, x0) = sample_eval_case(cfg, &mut rng);
        let traj = rollout(
            &model,
            &net,
            &task,
            &x0,
            v.rollout.horizon_steps,
            v.rollout.dt,
            v.rollout.kappa_gain,
            &|x| model.is_safe(x),
        )?;
        if !traj.violated && traj.infeasible_at.is_none() {
            n_safe += 1;
        }
        traj.write_csv(&traj_dir.join(format!("rollout_{i:03}.csv")))?;
    }
    println!(
        "rollout: wrote {} trajectories ({n_safe} safe) to {}",
        v.n_export_trajectories,
        traj_dir.display()
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct RunReport {
    run_id: String,
    system: &'static str,
    timestamp_unix: u64,
    seeds: SeedSummary,
    nets: Vec<NetEvaluation>,
    comparison: Option<ComparisonReport>,
    /// Smallest filter constraint slack observed anywhere in this run.
    min_slack: f64,
    /// Which net surface.csv belongs to, when a grid is configured.
    surface_net: Option<String>,
    artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    sampling: u64,
    train: u64,
    evaluation: u64,
}

fn checkpoint_label(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("net");
    name.strip_prefix("checkpoint.")
        .and_then(|rest| rest.strip_suffix(".json"))
        .unwrap_or_else(|| name.strip_suffix(".json").unwrap_or(name))
        .to_string()
}

fn list_artifacts(dir: &Path) -> anyhow::Result<Vec<String>> {
    fn walk(root: &Path, current: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
        for entry in fs::read_dir(current)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let rel = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if rel != "report.json" {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn cmd_evaluate(cfg: &RunConfig, dir: &Path, checkpoints: &[PathBuf]) -> anyhow::Result<i32> {
    let model = cfg.system.to_model();
    let v = &cfg.evaluation;

    let mut targets: Vec<(String, PathBuf)> = Vec::new();
    if checkpoints.is_empty() {
        for mode in [Mode::Fm, Mode::Cped] {
            let path = checkpoint_path(dir, mode);
            if path.exists() {
                targets.push((mode.label().to_string(), path));
            }
        }
        if targets.is_empty() {
            bail!("no checkpoints in {}; run `ncbf train` with this config first", dir.display());
        }
    } else {
        if checkpoints.len() > 2 {
            bail!("evaluate takes at most two checkpoints (baseline, calibrated)");
        }
        for path in checkpoints {
            if !path.exists() {
                bail!("checkpoint {} does not exist", path.display());
            }
            targets.push((checkpoint_label(path), path.clone()));
        }
    }

    let run_id = cfg.run_id();
    let mut nets = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut surface_net = None;
    for (idx, (label, path)) in targets.iter().enumerate() {
        let net = BarrierNet::load(path).with_context(|| format!("loading {}", path.display()))?;
        let sampler = |rng: &mut ChaCha8Rng| sample_eval_case(cfg, rng);
        let safety = safety_rate(&model, &net, &sampler, v.n_rollouts, &v.rollout, v.seed)?;
        min_slack = min_slack.min(safety.min_slack);

        let sweep = if matches!(cfg.system, crate::config::SystemConfig::PointMass { .. })
            && !v.radii.is_empty()
        {
            let sweep_cfg = SweepConfig {
                radii: v.radii.clone(),
                rollouts_per_radius: v.rollouts_per_radius,
                rollout: v.rollout,
                init_half_width: v.init_half_width,
            };
            let result = radius_sweep(&model, &net, &sweep_cfg, v.seed)?;
            min_slack = min_slack.min(result.min_slack);
            Some(result)
        } else {
            None
        };

        if let Some(grid) = &v.grid {
            // Last checkpoint wins the surface slot: the calibrated net when
            // both are evaluated.
            if idx + 1 == targets.len() {
                export_surface(
                    &net,
                    model.state_dim,
                    grid,
                    &v.theta_slices,
                    &dir.join("surface.csv"),
                    &dir.join("surface.meta.json"),
                )?;
                surface_net = Some(label.clone());
            }
        }

        println!(
            "evaluate: {label} safety {:.1}% ({}/{} rollouts){}",
            safety.rate_percent,
            safety.n_safe,
            safety.n_rollouts,
            sweep
                .as_ref()
                .map(|s| match s.max_safe_radius {
                    Some(r) => format!(", safe up to r = {r}"),
                    None => ", unsafe at all radii".to_string(),
                })
                .unwrap_or_default()
        );

        nets.push(NetEvaluation {
            label: label.clone(),
            config_digest: run_id.clone(),
            seed: v.seed,
            safety: Some(safety),
            sweep,
        });
    }

    let md_path = dir.join("report.md");
    let json_path = dir.join("report.json");
    let comparison = if nets.len() == 2 {
        Some(compare_report(&nets[0], &nets[1], &v.thresholds, &md_path, &json_path)?)
    } else {
        let net = &nets[0];
        let mut md = String::new();
        md.push_str("# Barrier evaluation\n\n");
        md.push_str(&format!("Config digest: `{run_id}`\n\n"));
        if let Some(s) = &net.safety {
            md.push_str(&format!(
                "- safety rate: {:.2}% ({}/{} rollouts, {} infeasible)\n",
                s.rate_percent, s.n_safe, s.n_rollouts, s.n_infeasible
            ));
        }
        if let Some(sweep) = &net.sweep {
            match sweep.max_safe_radius {
                Some(r) => md.push_str(&format!("- safe up to r = {r}\n")),
                None => md.push_str("- unsafe at all swept radii\n"),
            }
        }
        fs::write(&md_path, md)?;
        None
    };

    let report = RunReport {
        run_id,
        system: cfg.system.kind(),
        timestamp_unix: timestamp_unix(),
        seeds: SeedSummary {
            sampling: cfg.sampling.seed,
            train: cfg.train.rng_seed,
            evaluation: v.seed,
        },
        nets,
        comparison,
        min_slack,
        surface_net,
        artifacts: list_artifacts(dir)?,
    };
    write_json(&json_path, &report)?;
    println!("evaluate: report written to {}", json_path.display());
    Ok(EXIT_OK)
}

pub fn cmd_export_surface(cfg: &RunConfig, dir: &Path, mode: Mode) -> anyhow::Result<i32> {
    let net = load_checkpoint(dir, mode)?;
    let model = cfg.system.to_model();
    let Some(grid) = &cfg.evaluation.grid else {
        bail!("evaluation.grid is not set in the config; nothing to export");
    };
    let rows = export_surface(
        &net,
        model.state_dim,
        grid,
        &cfg.evaluation.theta_slices,
        &dir.join("surface.csv"),
        &dir.join("surface.meta.json"),
    )?;
    println!("export-surface: {rows} rows written to {}", dir.join("surface.csv").display());
    Ok(EXIT_OK)
}
