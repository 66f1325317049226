//! Two-stage training loop: fit with zero margins, calibrate on held-out
//! data, raise margins where quantiles are positive, refit, repeat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certification::{
    calibrate, loss_and_grad_subset, total_loss, CalibrationReport, ConformalConfig,
    LossWeights, MarginVector,
};
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::mlp::{Activation, BarrierNet, Optimizer};
use crate::sampling::{ExpertRecord, LabeledDataset};

/// Descent algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// Everything the trainer needs; serializable so runs can be reproduced
/// from their config artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs_per_stage: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub loss_tolerance: f64,
    pub max_calibration_rounds: usize,
    pub kappa_gain: f64,
    pub rng_seed: u64,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_epochs_per_stage: 500,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            loss_tolerance: 1e-4,
            max_calibration_rounds: 5,
            kappa_gain: 1.0,
            rng_seed: 0,
            hidden_layers: vec![32, 32],
            activation: Activation::Tanh,
            optimizer: OptimizerChoice::Sgd,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if self.max_epochs_per_stage == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "max_epochs_per_stage and batch_size must be positive".into(),
            ));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::InvalidInput("loss_tolerance must be nonnegative".into()));
        }
        if !(self.kappa_gain > 0.0) {
            return Err(Error::InvalidInput("kappa_gain must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must be in [0,1)".into()));
        }
        Ok(())
    }

    fn build_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerChoice::Sgd => Optimizer::sgd(self.learning_rate, self.momentum),
            OptimizerChoice::Adam => Optimizer::adam(self.learning_rate),
        }
    }
}

/// Output of the full calibrated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    /// One loss curve per training stage; entry 0 is the pre-update loss.
    pub stage_losses: Vec<Vec<f64>>,
    pub calibration_rounds: Vec<CalibrationReport>,
    pub final_margins: MarginVector,
    /// True when calibration ended with all quantiles nonpositive (or was
    /// disabled with max_calibration_rounds = 0).
    pub converged: bool,
    pub rounds_used: usize,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Minibatch descent on the hinge loss with fixed margins. Runs until the
/// full-data loss drops to `loss_tolerance` or the epoch cap. The curve
/// starts with the initial loss, then one entry per epoch. `stage_index`
/// decouples the shuffle streams of successive stages.
pub fn train_stage(
    net: &mut BarrierNet,
    data: &LabeledDataset,
    model: &SystemModel,
    margins: &MarginVector,
    cfg: &TrainConfig,
    stage_index: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !margins.is_finite() {
        return Err(Error::InvalidInput("margins must be finite".into()));
    }
    let derivative: Vec<&ExpertRecord> =
        data.expert_points.iter().chain(&data.buffer_points).collect();

    let mut curve = Vec::new();
    let (loss0, _) =
        total_loss(net, model, cfg.kappa_gain, margins, &cfg.loss_weights, data)?;
    if !loss0.is_finite() {
        return Err(Error::TrainingDiverged(format!("initial loss {loss0}")));
    }
    curve.push(loss0);
    if loss0 <= cfg.loss_tolerance {
        return Ok(curve);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1000 + stage_index);
    let mut opt = cfg.build_optimizer();

    let ns = data.safe_points.len();
    let nu = data.unsafe_points.len();
    let nd = derivative.len();
    let n_steps = div_ceil(ns, cfg.batch_size)
        .max(div_ceil(nu, cfg.batch_size))
        .max(div_ceil(nd, cfg.batch_size))
        .max(1);
    let bs = div_ceil(ns, n_steps);
    let bu = div_ceil(nu, n_steps);
    let bd = div_ceil(nd, n_steps);

    for _epoch in 0..cfg.max_epochs_per_stage {
        let is = shuffled_indices(ns, &mut rng);
        let iu = shuffled_indices(nu, &mut rng);
        let id = shuffled_indices(nd, &mut rng);
        for step in 0..n_steps {
            let take = |idx: &[usize], b: usize| -> (usize, usize) {
                let lo = (step * b).min(idx.len());
                let hi = ((step + 1) * b).min(idx.len());
                (lo, hi)
            };
            let (s_lo, s_hi) = take(&is, bs);
            let (u_lo, u_hi) = take(&iu, bu);
            let (d_lo, d_hi) = take(&id, bd);
            let safe_batch: Vec<nalgebra::DVector<f64>> =
                is[s_lo..s_hi].iter().map(|&i| data.safe_points[i].clone()).collect();
            let unsafe_batch: Vec<nalgebra::DVector<f64>> =
                iu[u_lo..u_hi].iter().map(|&i| data.unsafe_points[i].clone()).collect();
            let deriv_batch: Vec<&ExpertRecord> =
                id[d_lo..d_hi].iter().map(|&i| derivative[i]).collect();
            let (batch_loss, grads) = loss_and_grad_subset(
                net,
                model,
                cfg.kappa_gain,
                margins,
                &cfg.loss_weights,
                &safe_batch,
                &unsafe_batch,
                &deriv_batch,
            )?;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!("batch loss {batch_loss}")));
            }
            if batch_loss > 0.0 {
                opt.step(net, &grads)?;
            }
        }
        let (loss, _) =
            total_loss(net, model, cfg.kappa_gain, margins, &cfg.loss_weights, data)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("epoch loss {loss}")));
        }
        curve.push(loss);
        if loss <= cfg.loss_tolerance {
            break;
        }
    }
    Ok(curve)
}

/// Full calibrated training. Stage 1 runs with zero margins; each round
/// calibrates on the held-out set, stops once all quantiles are nonpositive,
/// otherwise raises margins to max(previous, q_hat) and refits with a fresh
/// optimizer. Non-convergence after the round cap is a reported status.
pub fn run_cped(
    train_data: &LabeledDataset,
    calib_data: &LabeledDataset,
    model: &SystemModel,
    train_cfg: &TrainConfig,
    conformal_cfg: &ConformalConfig,
) -> Result<(BarrierNet, TrainingReport)> {
    let mut net = BarrierNet::new(
        model.state_dim,
        &train_cfg.hidden_layers,
        train_cfg.activation,
        train_cfg.rng_seed,
    )?;
    let mut margins = MarginVector::zero();
    let mut stage_losses = Vec::new();
    let curve = train_stage(&mut net, train_data, model, &margins, train_cfg, 0)?;
    stage_losses.push(curve);

    let mut calibration_rounds = Vec::new();
    let mut converged = train_cfg.max_calibration_rounds == 0;
    for round in 1..=train_cfg.max_calibration_rounds {
        let report = calibrate(&net, calib_data, model, train_cfg.kappa_gain, conformal_cfg)?;
        let done = report.all_q_hats_nonpositive();
        let proposed = report.proposed_margins;
        calibration_rounds.push(report);
        if done {
            converged = true;
            break;
        }
        // Only positive quantiles raise their margin; the sequence is
        // nondecreasing across rounds.
        margins.gamma_s = margins.gamma_s.max(proposed.gamma_s);
        margins.gamma_u = margins.gamma_u.max(proposed.gamma_u);
        margins.gamma_d = margins.gamma_d.max(proposed.gamma_d);
        let curve =
            train_stage(&mut net, train_data, model, &margins, train_cfg, round as u64)?;
        stage_losses.push(curve);
    }
    let rounds_used = calibration_rounds.len();
    let report = TrainingReport {
        stage_losses,
        calibration_rounds,
        final_margins: margins,
        converged,
        rounds_used,
    };
    Ok((net, report))
}

/// Fixed-margin baseline: one training stage, no calibration. With zero
/// margins this is exactly stage 1 of [`run_cped`] under the same seed.
pub fn run_fm_baseline(
    train_data: &LabeledDataset,
    model: &SystemModel,
    fixed_margins: &MarginVector,
    train_cfg: &TrainConfig,
) -> Result<(BarrierNet, Vec<f64>)> {
    let mut net = BarrierNet::new(
        model.state_dim,
        &train_cfg.hidden_layers,
        train_cfg.activation,
        train_cfg.rng_seed,
    )?;
    let curve =
        train_stage(&mut net, train_data, model, fixed_margins, train_cfg, 0)?;
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// 1-D single integrator: x_dot = u, safe region x >= 0.
    fn integrator_1d() -> SystemModel {
        SystemModel::from_parts(
            "integrator_1d",
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::from_row_slice(1, 1, &[1.0]),
            |x| x[0] >= 0.0,
        )
    }

    /// Separable toy data: safe on [0.2, 1], unsafe on [-1, -0.2], expert
    /// pairs pushing upward near the boundary.
    fn toy_1d_dataset(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledDataset {
            safe_points: (0..n).map(|_| dv(&[rng.gen_range(0.2..1.0)])).collect(),
            unsafe_points: (0..n).map(|_| dv(&[rng.gen_range(-1.0..-0.2)])).collect(),
            expert_points: (0..n)
                .map(|_| ExpertRecord {
                    state: dv(&[rng.gen_range(0.1..1.0)]),
                    control: dv(&[0.5]),
                })
                .collect(),
            buffer_points: (0..n.max(2))
                .map(|_| ExpertRecord {
                    state: dv(&[rng.gen_range(0.0..0.2)]),
                    control: dv(&[0.5]),
                })
                .collect(),
            split_seed: seed,
        }
    }

    fn toy_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs_per_stage: 500,
            batch_size: 16,
            loss_tolerance: 1e-3,
            hidden_layers: vec![8],
            rng_seed: seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn satisfied_start_returns_immediately() {
        // h = x separates the toy data and satisfies the derivative
        // condition, so the initial loss is already zero.
        let mut net = BarrierNet::from_parts(
            vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            vec![dv(&[0.0])],
            Activation::Tanh,
        )
        .unwrap();
        let model = integrator_1d();
        let data = toy_1d_dataset(20, 1);
        let curve = train_stage(
            &mut net,
            &data,
            &model,
            &MarginVector::zero(),
            &toy_cfg(1),
            0,
        )
        .unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0], 0.0);
    }

    #[test]
    fn separable_toy_reaches_tolerance() {
        let model = integrator_1d();
        let data = toy_1d_dataset(40, 2);
        let cfg = toy_cfg(2);
        let mut net =
            BarrierNet::new(1, &cfg.hidden_layers, cfg.activation, cfg.rng_seed).unwrap();
        let curve =
            train_stage(&mut net, &data, &model, &MarginVector::zero(), &cfg, 0)
                .unwrap();
        let final_loss = *curve.last().unwrap();
        assert!(final_loss <= 1e-3, "final loss {final_loss} above tolerance");
        assert!(curve.len() <= 501);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let model = integrator_1d();
        let data = toy_1d_dataset(30, 3);
        let cfg = toy_cfg(3);
        let run = || {
            let mut net =
                BarrierNet::new(1, &cfg.hidden_layers, cfg.activation, cfg.rng_seed).unwrap();
            train_stage(&mut net, &data, &model, &MarginVector::zero(), &cfg, 0)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cped_converges_on_generous_toy() {
        let model = integrator_1d();
        let train = toy_1d_dataset(60, 4);
        let calib = toy_1d_dataset(60, 104);
        let cfg = toy_cfg(4);
        let conformal = ConformalConfig { alpha: 0.3, ..ConformalConfig::default() };
        let (_, report) = run_cped(&train, &calib, &model, &cfg, &conformal).unwrap();
        assert!(report.converged);
        assert!(report.rounds_used <= 2);
        // Margins never decrease across rounds.
        let mut prev = MarginVector::zero();
        for r in &report.calibration_rounds {
            let next = MarginVector {
                gamma_s: prev.gamma_s.max(r.proposed_margins.gamma_s),
                gamma_u: prev.gamma_u.max(r.proposed_margins.gamma_u),
                gamma_d: prev.gamma_d.max(r.proposed_margins.gamma_d),
            };
            assert!(next.gamma_s >= prev.gamma_s);
            assert!(next.gamma_u >= prev.gamma_u);
            assert!(next.gamma_d >= prev.gamma_d);
            prev = next;
        }
    }

    #[test]
    fn zero_rounds_equals_fm_baseline() {
        let model = integrator_1d();
        let train = toy_1d_dataset(30, 5);
        let calib = toy_1d_dataset(30, 105);
        let cfg = TrainConfig { max_calibration_rounds: 0, ..toy_cfg(5) };
        let (net_cped, report) = run_cped(&train, &calib, &model, &cfg, &ConformalConfig::default())
            .unwrap();
        assert!(report.converged);
        assert_eq!(report.rounds_used, 0);
        let (net_fm, _) =
            run_fm_baseline(&train, &model, &MarginVector::zero(), &cfg).unwrap();
        assert_eq!(net_cped.weights, net_fm.weights);
        assert_eq!(net_cped.biases, net_fm.biases);
    }

    #[test]
    fn shifted_calibration_raises_margins() {
        let model = integrator_1d();
        let train = toy_1d_dataset(40, 6);
        // Adversarial hold-out: "safe" calibration points sit where training
        // taught the net to be negative, so q1 quantiles are positive.
        let mut calib = toy_1d_dataset(40, 106);
        for p in &mut calib.safe_points {
            p[0] = -p[0];
        }
        let cfg = TrainConfig { max_calibration_rounds: 2, ..toy_cfg(6) };
        let conformal = ConformalConfig { alpha: 0.3, ..ConformalConfig::default() };
        let (_, report) = run_cped(&train, &calib, &model, &cfg, &conformal).unwrap();
        assert!(report.calibration_rounds[0].safe.q_hat > 0.0);
        assert!(report.final_margins.gamma_s > 0.0);
    }

    #[test]
    fn larger_fixed_margins_cannot_lower_the_loss() {
        let model = integrator_1d();
        let data = toy_1d_dataset(30, 7);
        let cfg = TrainConfig { max_epochs_per_stage: 50, ..toy_cfg(7) };
        let (_, curve_zero) =
            run_fm_baseline(&data, &model, &MarginVector::zero(), &cfg).unwrap();
        let big = MarginVector { gamma_s: 1.0, gamma_u: 1.0, gamma_d: 1.0 };
        let (_, curve_big) = run_fm_baseline(&data, &model, &big, &cfg).unwrap();
        assert!(curve_big.last().unwrap() >= curve_zero.last().unwrap());
    }
}
