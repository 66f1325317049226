//! Expert trajectory generation, region construction, boundary-focused
//! sampling, Lipschitz estimation, and train/calibration splitting.
//!
//! The expert-covered set D is the interior of a union of p-norm balls of
//! radius epsilon around recorded expert states; the unsafe band N is the
//! outer layer of width sigma. Membership reduces to nearest-expert distance:
//! d < eps for D, eps <= d <= eps+sigma for N. Brute-force nearest neighbor
//! throughout; desk-scale datasets don't justify an index.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::mlp::BarrierNet;
use crate::safe_control::{qp_filter, Barrier, Task};

/// One expert demonstration sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRecord {
    pub state: DVector<f64>,
    pub control: DVector<f64>,
}

/// Geometry of the sampled regions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    /// Ball radius around expert states defining D.
    pub epsilon_ball: f64,
    /// Width of the unsafe band N outside D.
    pub sigma_band: f64,
    /// Width of the buffer band straddling the D boundary.
    pub buffer_width: f64,
    /// Norm used for all distances; >= 1.
    pub p_norm: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self { epsilon_ball: 0.3, sigma_band: 0.2, buffer_width: 0.1, p_norm: 2.0 }
    }
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_ball > 0.0 && self.sigma_band > 0.0 && self.buffer_width > 0.0) {
            return Err(Error::InvalidInput("region widths must be positive".into()));
        }
        if !(self.p_norm >= 1.0) {
            return Err(Error::InvalidInput(format!("p_norm must be >= 1, got {}", self.p_norm)));
        }
        Ok(())
    }
}

/// Sample quotas for the rejection-sampled regions. Expert points pass
/// through from the recorded demonstrations and have no quota here.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionQuotas {
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_buffer: usize,
}

/// Labeled training data, one list per region.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub safe_points: Vec<DVector<f64>>,
    pub unsafe_points: Vec<DVector<f64>>,
    pub expert_points: Vec<ExpertRecord>,
    pub buffer_points: Vec<ExpertRecord>,
    pub split_seed: u64,
}

/// p-norm distance between two equal-length vectors.
pub fn dist_p(a: &DVector<f64>, b: &DVector<f64>, p: f64) -> f64 {
    if p == 2.0 {
        return (a - b).norm();
    }
    (a - b).iter().map(|d| d.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Distance from x to the nearest expert state.
pub fn nearest_expert_distance(x: &DVector<f64>, expert_states: &[DVector<f64>], p: f64) -> f64 {
    expert_states.iter().map(|e| dist_p(x, e, p)).fold(f64::INFINITY, f64::min)
}

/// x in D = int(union of eps-balls): strict inequality.
pub fn membership_d(x: &DVector<f64>, expert_states: &[DVector<f64>], spec: &RegionSpec) -> bool {
    nearest_expert_distance(x, expert_states, spec.p_norm) < spec.epsilon_ball
}

/// x in N: outside D, within sigma of its boundary (outer band).
pub fn membership_n(x: &DVector<f64>, expert_states: &[DVector<f64>], spec: &RegionSpec) -> bool {
    let d = nearest_expert_distance(x, expert_states, spec.p_norm);
    d >= spec.epsilon_ball && d <= spec.epsilon_ball + spec.sigma_band
}

/// An expert demonstrator: a control policy plus an initial-state sampler.
pub struct ExpertPolicy<'a> {
    pub control: Box<dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>> + 'a>,
    pub sample_init: Box<dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + 'a>,
}

impl<'a> ExpertPolicy<'a> {
    /// A reference controller wrapped in the CBF-QP filter; the standard
    /// scripted expert for both benchmarks.
    pub fn filtered<B: Barrier>(
        model: &'a SystemModel,
        barrier: &'a B,
        task: &'a Task,
        kappa_gain: f64,
        sample_init: impl Fn(&mut ChaCha8Rng) -> DVector<f64> + 'a,
    ) -> Self {
        Self {
            control: Box::new(move |x, t| {
                let u_ref = task.reference(x, t);
                Ok(qp_filter(barrier, model, x, &u_ref, kappa_gain)?.control)
            }),
            sample_init: Box::new(sample_init),
        }
    }
}

/// Demonstration run output: flattened records plus the number of steps
/// skipped because the policy was infeasible.
#[derive(Debug)]
pub struct ExpertGeneration {
    pub records: Vec<ExpertRecord>,
    pub skipped: usize,
}

/// Roll the expert out `n_traj` times for `horizon` steps; keep (x, u) pairs
/// whose state lies strictly inside the geometric safe set. A policy error
/// ends that trajectory and is counted, not fatal.
pub fn generate_expert_trajectories(
    model: &SystemModel,
    expert: &ExpertPolicy,
    n_traj: usize,
    horizon: usize,
    dt: f64,
    rng_seed: u64,
) -> Result<ExpertGeneration> {
    if n_traj == 0 || horizon == 0 {
        return Err(Error::InvalidInput("n_traj and horizon must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..n_traj {
        let mut x = (expert.sample_init)(&mut rng);
        'steps: for step in 0..horizon {
            let t = step as f64 * dt;
            let u = match (expert.control)(&x, t) {
                Ok(u) => u,
                Err(_) => {
                    skipped += 1;
                    break 'steps;
                }
            };
            if model.is_safe(&x) {
                records.push(ExpertRecord { state: x.clone(), control: u.clone() });
            }
            x = match crate::dynamics::rk4_step(model, &x, &u, dt) {
                Ok(next) => next,
                Err(_) => {
                    skipped += 1;
                    break 'steps;
                }
            };
        }
    }
    Ok(ExpertGeneration { records, skipped })
}

/// Radial statistics of the expert states' planar part, used to focus
/// proposals near the D/N transition.
struct RadialStats {
    r_lo: f64,
    r_hi: f64,
}

fn radial_stats(expert_states: &[DVector<f64>]) -> RadialStats {
    let mut r_lo = f64::INFINITY;
    let mut r_hi: f64 = 0.0;
    for s in expert_states {
        let r = (s[0] * s[0] + s[1] * s[1]).sqrt();
        r_lo = r_lo.min(r);
        r_hi = r_hi.max(r);
    }
    RadialStats { r_lo, r_hi }
}

/// Propose a candidate state in polar (2-D) or cylindrical (3-D with free
/// heading) coordinates; 70% of draws focus on the annulus containing the
/// D/N transition, the rest cover a broad disk.
fn propose(
    rng: &mut ChaCha8Rng,
    state_dim: usize,
    stats: &RadialStats,
    spec: &RegionSpec,
) -> DVector<f64> {
    let reach = spec.epsilon_ball + spec.sigma_band + spec.buffer_width;
    let rho = if rng.gen_bool(0.7) {
        let lo = (stats.r_lo - reach).max(0.0);
        let hi = stats.r_hi + reach;
        rng.gen_range(lo..hi)
    } else {
        rng.gen_range(0.0..stats.r_hi + reach + 1.0)
    };
    let phi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let mut v = vec![rho * phi.cos(), rho * phi.sin()];
    for _ in 2..state_dim {
        v.push(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
    }
    DVector::from_vec(v)
}

fn fill_region(
    rng: &mut ChaCha8Rng,
    quota: usize,
    region: &str,
    state_dim: usize,
    stats: &RadialStats,
    spec: &RegionSpec,
    mut accept: impl FnMut(&DVector<f64>) -> bool,
) -> Result<Vec<DVector<f64>>> {
    let max_attempts = 1000 * quota + 10_000;
    let mut out = Vec::with_capacity(quota);
    for attempt in 0..max_attempts {
        if out.len() == quota {
            return Ok(out);
        }
        let cand = propose(rng, state_dim, stats, spec);
        if accept(&cand) {
            out.push(cand);
        }
        if attempt + 1 == max_attempts {
            break;
        }
    }
    if out.len() == quota {
        return Ok(out);
    }
    Err(Error::SamplingExhausted {
        region: region.to_string(),
        accepted: out.len(),
        needed: quota,
        attempts: max_attempts,
    })
}

/// Rejection-sample the safe, unsafe, and buffer regions around the expert
/// data. Safe points must lie in D and in the geometric safe set; unsafe
/// points in the band N; buffer points in a band of width `buffer_width`
/// straddling the D boundary, paired with controls that steer back toward
/// the nearest expert state.
pub fn radial_sample(
    model: &SystemModel,
    quotas: RegionQuotas,
    spec: &RegionSpec,
    expert_records: &[ExpertRecord],
    rng_seed: u64,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if quotas.n_safe == 0 || quotas.n_unsafe == 0 || quotas.n_buffer == 0 {
        return Err(Error::InvalidInput("region quotas must be positive".into()));
    }
    if expert_records.is_empty() {
        return Err(Error::InvalidInput("expert records must be nonempty".into()));
    }
    let expert_states: Vec<DVector<f64>> =
        expert_records.iter().map(|r| r.state.clone()).collect();
    let stats = radial_stats(&expert_states);
    let dim = model.state_dim;

    let mut rng_safe = ChaCha8Rng::seed_from_u64(rng_seed);
    rng_safe.set_stream(0);
    let safe_points = fill_region(&mut rng_safe, quotas.n_safe, "safe", dim, &stats, spec, |x| {
        membership_d(x, &expert_states, spec) && model.is_safe(x)
    })?;

    let mut rng_unsafe = ChaCha8Rng::seed_from_u64(rng_seed);
    rng_unsafe.set_stream(1);
    let unsafe_points =
        fill_region(&mut rng_unsafe, quotas.n_unsafe, "unsafe", dim, &stats, spec, |x| {
            membership_n(x, &expert_states, spec)
        })?;

    let mut rng_buffer = ChaCha8Rng::seed_from_u64(rng_seed);
    rng_buffer.set_stream(2);
    let half_w = spec.buffer_width / 2.0;
    let band_lo = (spec.epsilon_ball - half_w).max(0.0);
    let band_hi = spec.epsilon_ball + half_w;
    let buffer_states =
        fill_region(&mut rng_buffer, quotas.n_buffer, "buffer", dim, &stats, spec, |x| {
            let d = nearest_expert_distance(x, &expert_states, spec.p_norm);
            (band_lo..=band_hi).contains(&d)
        })?;
    let buffer_points = buffer_states
        .into_iter()
        .map(|x| {
            let nearest = expert_states
                .iter()
                .min_by(|a, b| {
                    dist_p(&x, a, spec.p_norm).total_cmp(&dist_p(&x, b, spec.p_norm))
                })
                .expect("expert states nonempty");
            let control = model
                .steer_toward(&x, nearest)
                .unwrap_or_else(|| DVector::zeros(model.control_dim));
            ExpertRecord { state: x, control }
        })
        .collect();

    Ok(LabeledDataset {
        safe_points,
        unsafe_points,
        expert_points: expert_records.to_vec(),
        buffer_points,
        split_seed: rng_seed,
    })
}

/// Retain only safe points at distance >= min_distance from every unsafe
/// point; the optional refinement used once margins are positive.
pub fn refine_safe_points(
    safe_points: &[DVector<f64>],
    unsafe_points: &[DVector<f64>],
    min_distance: f64,
    p: f64,
) -> Vec<DVector<f64>> {
    safe_points
        .iter()
        .filter(|x| {
            unsafe_points.iter().all(|u| dist_p(x, u, p) >= min_distance)
        })
        .cloned()
        .collect()
}

/// Largest nearest-neighbor gap within a point set; the net-condition proxy
/// reported after training.
pub fn max_nearest_neighbor_gap(points: &[DVector<f64>], p: f64) -> f64 {
    if points.len() < 2 {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (i, x) in points.iter().enumerate() {
        let mut nearest = f64::INFINITY;
        for (j, y) in points.iter().enumerate() {
            if i != j {
                nearest = nearest.min(dist_p(x, y, p));
            }
        }
        worst = worst.max(nearest);
    }
    worst
}

/// Max finite-difference slope |h(x)-h(x')|/||x-x'||_p over random probes,
/// times a 1.5 safety factor. Probes are nested: growing `probes_per_point`
/// only appends to each point's probe sequence.
pub fn estimate_lipschitz(
    net: &BarrierNet,
    region_points: &[DVector<f64>],
    probe_radius: f64,
    probes_per_point: usize,
    p: f64,
    rng_seed: u64,
) -> Result<f64> {
    if region_points.is_empty() {
        return Err(Error::InvalidInput("no points to probe".into()));
    }
    if !(probe_radius > 0.0) {
        return Err(Error::InvalidInput("probe_radius must be positive".into()));
    }
    let mut max_ratio: f64 = 0.0;
    for (i, x) in region_points.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(i as u64);
        let hx = net.forward(x)?;
        for _ in 0..probes_per_point {
            let dir = DVector::from_fn(x.len(), |_, _| rng.gen_range(-1.0..1.0));
            let n = dir.norm();
            if n < 1e-12 {
                continue;
            }
            let probe = x + &dir * (probe_radius / n);
            let hp = net.forward(&probe)?;
            let dist = dist_p(x, &probe, p);
            if dist > 0.0 {
                max_ratio = max_ratio.max((hp - hx).abs() / dist);
            }
        }
    }
    Ok(1.5 * max_ratio)
}

fn split_indices(n: usize, calib_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n_calib = ((n as f64 * calib_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates; first n_calib entries become the calibration set.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut calib: Vec<usize> = idx[..n_calib].to_vec();
    let mut train: Vec<usize> = idx[n_calib..].to_vec();
    calib.sort_unstable();
    train.sort_unstable();
    (train, calib)
}

/// Disjoint per-region train/calibration partition, deterministic in the
/// dataset's split_seed.
pub fn split(
    dataset: &LabeledDataset,
    calib_fraction: f64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "calib_fraction must be in (0,1), got {calib_fraction}"
        )));
    }
    for (name, n) in [
        ("safe", dataset.safe_points.len()),
        ("unsafe", dataset.unsafe_points.len()),
        ("expert", dataset.expert_points.len()),
        ("buffer", dataset.buffer_points.len()),
    ] {
        if n < 2 {
            return Err(Error::InvalidSplit(format!("region {name} has {n} points, need >= 2")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.split_seed);
    let mut train = LabeledDataset {
        safe_points: Vec::new(),
        unsafe_points: Vec::new(),
        expert_points: Vec::new(),
        buffer_points: Vec::new(),
        split_seed: dataset.split_seed,
    };
    let mut calib = train.clone();

    rng.set_stream(0);
    let (ti, ci) = split_indices(dataset.safe_points.len(), calib_fraction, &mut rng);
    train.safe_points = ti.iter().map(|&i| dataset.safe_points[i].clone()).collect();
    calib.safe_points = ci.iter().map(|&i| dataset.safe_points[i].clone()).collect();

    rng.set_stream(1);
    let (ti, ci) = split_indices(dataset.unsafe_points.len(), calib_fraction, &mut rng);
    train.unsafe_points = ti.iter().map(|&i| dataset.unsafe_points[i].clone()).collect();
    calib.unsafe_points = ci.iter().map(|&i| dataset.unsafe_points[i].clone()).collect();

    rng.set_stream(2);
    let (ti, ci) = split_indices(dataset.expert_points.len(), calib_fraction, &mut rng);
    train.expert_points = ti.iter().map(|&i| dataset.expert_points[i].clone()).collect();
    calib.expert_points = ci.iter().map(|&i| dataset.expert_points[i].clone()).collect();

    rng.set_stream(3);
    let (ti, ci) = split_indices(dataset.buffer_points.len(), calib_fraction, &mut rng);
    train.buffer_points = ti.iter().map(|&i| dataset.buffer_points[i].clone()).collect();
    calib.buffer_points = ci.iter().map(|&i| dataset.buffer_points[i].clone()).collect();

    Ok((train, calib))
}

impl LabeledDataset {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.safe_points.len(),
            self.unsafe_points.len(),
            self.expert_points.len(),
            self.buffer_points.len(),
        )
    }

    pub fn total(&self) -> usize {
        let (a, b, c, d) = self.counts();
        a + b + c + d
    }

    /// CSV layout: region, state components, control components (empty for
    /// safe/unsafe rows); rows ordered safe, unsafe, expert, buffer.
    pub fn write_csv(&self, path: &Path, state_dim: usize, control_dim: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["region".to_string()];
        for i in 0..state_dim {
            header.push(format!("x{i}"));
        }
        for i in 0..control_dim {
            header.push(format!("u{i}"));
        }
        wtr.write_record(&header)?;
        let empty_controls = vec![String::new(); control_dim];
        for x in &self.safe_points {
            let mut row = vec!["safe".to_string()];
            row.extend(x.iter().map(|v| format!("{v}")));
            row.extend(empty_controls.clone());
            wtr.write_record(&row)?;
        }
        for x in &self.unsafe_points {
            let mut row = vec!["unsafe".to_string()];
            row.extend(x.iter().map(|v| format!("{v}")));
            row.extend(empty_controls.clone());
            wtr.write_record(&row)?;
        }
        for (name, list) in [("expert", &self.expert_points), ("buffer", &self.buffer_points)] {
            for r in list {
                let mut row = vec![name.to_string()];
                row.extend(r.state.iter().map(|v| format!("{v}")));
                row.extend(r.control.iter().map(|v| format!("{v}")));
                wtr.write_record(&row)?;
            }
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_csv(path: &Path, split_seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let state_dim = headers.iter().filter(|h| h.starts_with('x')).count();
        let control_dim = headers.iter().filter(|h| h.starts_with('u')).count();
        let mut out = LabeledDataset {
            safe_points: Vec::new(),
            unsafe_points: Vec::new(),
            expert_points: Vec::new(),
            buffer_points: Vec::new(),
            split_seed,
        };
        for record in rdr.records() {
            let record = record?;
            let region = &record[0];
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Serialization(format!("bad float {s:?}: {e}")))
            };
            let mut state = Vec::with_capacity(state_dim);
            for i in 0..state_dim {
                state.push(parse(&record[1 + i])?);
            }
            let state = DVector::from_vec(state);
            match region {
                "safe" => out.safe_points.push(state),
                "unsafe" => out.unsafe_points.push(state),
                "expert" | "buffer" => {
                    let mut control = Vec::with_capacity(control_dim);
                    for i in 0..control_dim {
                        control.push(parse(&record[1 + state_dim + i])?);
                    }
                    let rec = ExpertRecord { state, control: DVector::from_vec(control) };
                    if region == "expert" {
                        out.expert_points.push(rec);
                    } else {
                        out.buffer_points.push(rec);
                    }
                }
                other => {
                    return Err(Error::Serialization(format!("unknown region {other:?}")));
                }
            }
        }
        Ok(out)
    }
}
