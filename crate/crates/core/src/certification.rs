//! Constraint scores, hinge losses, split-conformal quantiles, and the
//! incomplete-beta validity check.
//!
//! Scores are oriented so that negative means the constraint holds with
//! slack: q1 = -h on safe points, q2 = +h on unsafe points, and
//! q3 = -<grad h, f+gu> - kappa*h on expert/buffer pairs. Calibration takes
//! the l-th largest score with l = floor((N+1) alpha / m) and proposes
//! margins clamped at zero.

use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::mlp::{BarrierNet, ParamGrads};
use crate::sampling::{ExpertRecord, LabeledDataset};

/// Hinge margins per constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    pub gamma_s: f64,
    pub gamma_u: f64,
    pub gamma_d: f64,
}

impl MarginVector {
    pub fn zero() -> Self {
        Self { gamma_s: 0.0, gamma_u: 0.0, gamma_d: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma_s.is_finite() && self.gamma_u.is_finite() && self.gamma_d.is_finite()
    }
}

/// Weights (lambda_s, lambda_u, lambda_d) on the three loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 1.0, lambda_u: 1.0, lambda_d: 1.0 }
    }
}

/// Split-conformal parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalConfig {
    /// Miscoverage budget alpha, split across m constraint sets.
    pub alpha: f64,
    /// Number of constraint sets sharing the budget; 3 here.
    pub m: usize,
    /// Violation level epsilon of the probabilistic guarantee.
    pub violation_level: f64,
    /// Confidence level beta: the guarantee holds with probability >= 1-beta.
    pub confidence_beta: f64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { alpha: 0.15, m: 3, violation_level: 0.05, confidence_beta: 0.05 }
    }
}

impl ConformalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("violation_level", self.violation_level),
            ("confidence_beta", self.confidence_beta),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must be in (0,1), got {v}")));
            }
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("m must be positive".into()));
        }
        Ok(())
    }
}

/// Safe-region score: negative where h is positive.
pub fn score_q1(net: &BarrierNet, x: &DVector<f64>) -> Result<f64> {
    Ok(-net.forward(x)?)
}

/// Unsafe-region score: negative where h is negative.
pub fn score_q2(net: &BarrierNet, x: &DVector<f64>) -> Result<f64> {
    net.forward(x)
}

/// Derivative-condition score at a recorded (state, control) pair.
pub fn score_q3(
    net: &BarrierNet,
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    kappa_gain: f64,
) -> Result<f64> {
    let xdot = model.dynamics(x, u);
    let (h, s) = net.forward_with_tangent(x, &xdot)?;
    Ok(-s - kappa_gain * h)
}

/// All three score lists for a dataset; the derivative list covers expert
/// and buffer records together.
pub fn region_scores(
    net: &BarrierNet,
    model: &SystemModel,
    kappa_gain: f64,
    data: &LabeledDataset,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut s1 = Vec::with_capacity(data.safe_points.len());
    for x in &data.safe_points {
        s1.push(score_q1(net, x)?);
    }
    let mut s2 = Vec::with_capacity(data.unsafe_points.len());
    for x in &data.unsafe_points {
        s2.push(score_q2(net, x)?);
    }
    let mut s3 = Vec::with_capacity(data.expert_points.len() + data.buffer_points.len());
    for r in data.expert_points.iter().chain(&data.buffer_points) {
        s3.push(score_q3(net, model, &r.state, &r.control, kappa_gain)?);
    }
    Ok((s1, s2, s3))
}

/// Hinge loss and exact parameter gradient over explicit region slices.
/// Each term is a mean over its slice; empty slices contribute zero, letting
/// minibatch callers chunk regions independently. Hinges are active only for
/// strictly positive arguments (subgradient 0 at the kink).
pub fn loss_and_grad_subset(
    net: &BarrierNet,
    model: &SystemModel,
    kappa_gain: f64,
    margins: &MarginVector,
    weights: &LossWeights,
    safe: &[DVector<f64>],
    unsafe_pts: &[DVector<f64>],
    derivative: &[&ExpertRecord],
) -> Result<(f64, ParamGrads)> {
    let mut grads = ParamGrads::zeros_like(net);
    let mut total = 0.0;

    if !safe.is_empty() {
        let inv_n = 1.0 / safe.len() as f64;
        let mut l1 = 0.0;
        for x in safe {
            let h = net.forward(x)?;
            let arg = -h + margins.gamma_s;
            if arg > 0.0 {
                l1 += arg;
                net.accumulate_value_grad(x, -weights.lambda_s * inv_n, &mut grads)?;
            }
        }
        total += weights.lambda_s * l1 * inv_n;
    }

    if !unsafe_pts.is_empty() {
        let inv_n = 1.0 / unsafe_pts.len() as f64;
        let mut l2 = 0.0;
        for x in unsafe_pts {
            let h = net.forward(x)?;
            let arg = h + margins.gamma_u;
            if arg > 0.0 {
                l2 += arg;
                net.accumulate_value_grad(x, weights.lambda_u * inv_n, &mut grads)?;
            }
        }
        total += weights.lambda_u * l2 * inv_n;
    }

    if !derivative.is_empty() {
        let inv_n = 1.0 / derivative.len() as f64;
        let mut l3 = 0.0;
        for r in derivative {
            let xdot = model.dynamics(&r.state, &r.control);
            let (h, s) = net.forward_with_tangent(&r.state, &xdot)?;
            let arg = -s - kappa_gain * h + margins.gamma_d;
            if arg > 0.0 {
                l3 += arg;
                net.accumulate_mixed_grad(
                    &r.state,
                    &xdot,
                    -kappa_gain * weights.lambda_d * inv_n,
                    -weights.lambda_d * inv_n,
                    &mut grads,
                )?;
            }
        }
        total += weights.lambda_d * l3 * inv_n;
    }

    Ok((total, grads))
}

/// Weighted hinge loss over a full dataset. Errors on empty regions; the
/// derivative term pools expert and buffer records into one mean.
pub fn total_loss(
    net: &BarrierNet,
    model: &SystemModel,
    kappa_gain: f64,
    margins: &MarginVector,
    weights: &LossWeights,
    data: &LabeledDataset,
) -> Result<(f64, ParamGrads)> {
    if data.safe_points.is_empty() || data.unsafe_points.is_empty() {
        return Err(Error::InvalidInput("safe and unsafe regions must be nonempty".into()));
    }
    if data.expert_points.is_empty() && data.buffer_points.is_empty() {
        return Err(Error::InvalidInput("derivative region must be nonempty".into()));
    }
    let derivative: Vec<&ExpertRecord> =
        data.expert_points.iter().chain(&data.buffer_points).collect();
    loss_and_grad_subset(
        net,
        model,
        kappa_gain,
        margins,
        weights,
        &data.safe_points,
        &data.unsafe_points,
        &derivative,
    )
}

/// l = floor((N+1) alpha / m), guarded against representation error just
/// below integers.
pub fn quantile_index(n: usize, alpha: f64, m: usize) -> Result<usize> {
    let raw = (n as f64 + 1.0) * alpha / m as f64;
    let l = (raw + 1e-9).floor() as usize;
    if l < 1 || l > n {
        return Err(Error::InsufficientCalibration { n, alpha, m, l });
    }
    Ok(l)
}

/// The l-th largest score (1-indexed) and l itself.
pub fn conformal_quantile(scores: &[f64], alpha: f64, m: usize) -> Result<(f64, usize)> {
    let l = quantile_index(scores.len(), alpha, m)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((sorted[l - 1], l))
}

/// Regularized incomplete beta function I_x(a,b) by modified Lentz continued
/// fraction, abs error <= 1e-10 over the tested domain.
pub fn reg_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !x.is_finite() {
        return Err(Error::InvalidInput(format!("x must be in [0,1], got {x}")));
    }
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::InvalidInput(format!("a, b must be positive, got a={a}, b={b}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    // The continued fraction converges fast only for x below the mean-ish
    // threshold; use the reflection I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - reg_incomplete_beta(1.0 - x, b, a)?);
    }
    let ln_prefix = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let cf = beta_continued_fraction(x, a, b)?;
    Ok((ln_prefix.exp() * cf / a).clamp(0.0, 1.0))
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 3e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::InvalidInput(format!(
        "incomplete beta continued fraction did not converge for x={x}, a={a}, b={b}"
    )))
}

/// Theorem-style validity check: beta_value = I_{1-eps}(N-l+1, l), valid iff
/// beta_value <= confidence_beta.
pub fn validity_check(
    n_calib: usize,
    alpha: f64,
    m: usize,
    violation_level: f64,
    confidence_beta: f64,
) -> Result<(bool, f64, usize)> {
    let l = quantile_index(n_calib, alpha, m)?;
    let beta_value =
        reg_incomplete_beta(1.0 - violation_level, (n_calib - l + 1) as f64, l as f64)?;
    Ok((beta_value <= confidence_beta, beta_value, l))
}

/// Per-region calibration outcome.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionCalibration {
    pub n_calib: usize,
    pub l_index: usize,
    pub q_hat: f64,
    pub beta_value: f64,
    pub valid: bool,
}

/// Full calibration result for one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub safe: RegionCalibration,
    #[serde(rename = "unsafe")]
    pub unsafe_region: RegionCalibration,
    pub derivative: RegionCalibration,
    pub alpha: f64,
    pub m: usize,
    pub violation_level: f64,
    pub confidence_beta: f64,
    /// All three regions pass the validity check.
    pub valid: bool,
    /// max(0, q_hat) per region; applied by the training loop only when the
    /// corresponding q_hat is positive.
    pub proposed_margins: MarginVector,
    pub timestamp_unix: u64,
}

impl CalibrationReport {
    pub fn q_hats(&self) -> [f64; 3] {
        [self.safe.q_hat, self.unsafe_region.q_hat, self.derivative.q_hat]
    }

    pub fn all_q_hats_nonpositive(&self) -> bool {
        self.q_hats().iter().all(|&q| q <= 0.0)
    }
}

fn calibrate_region(scores: &[f64], cfg: &ConformalConfig) -> Result<RegionCalibration> {
    let (q_hat, l) = conformal_quantile(scores, cfg.alpha, cfg.m)?;
    let (valid, beta_value, _) = validity_check(
        scores.len(),
        cfg.alpha,
        cfg.m,
        cfg.violation_level,
        cfg.confidence_beta,
    )?;
    Ok(RegionCalibration { n_calib: scores.len(), l_index: l, q_hat, beta_value, valid })
}

/// Score the held-out data and take per-region conformal quantiles. The
/// validity check runs per region with that region's own N.
pub fn calibrate(
    net: &BarrierNet,
    calib_data: &LabeledDataset,
    model: &SystemModel,
    kappa_gain: f64,
    config: &ConformalConfig,
) -> Result<CalibrationReport> {
    config.validate()?;
    let (s1, s2, s3) = region_scores(net, model, kappa_gain, calib_data)?;
    let safe = calibrate_region(&s1, config)?;
    let unsafe_region = calibrate_region(&s2, config)?;
    let derivative = calibrate_region(&s3, config)?;
    let valid = safe.valid && unsafe_region.valid && derivative.valid;
    let proposed_margins = MarginVector {
        gamma_s: safe.q_hat.max(0.0),
        gamma_u: unsafe_region.q_hat.max(0.0),
        gamma_d: derivative.q_hat.max(0.0),
    };
    let timestamp_unix =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(CalibrationReport {
        safe,
        unsafe_region,
        derivative,
        alpha: config.alpha,
        m: config.m,
        violation_level: config.violation_level,
        confidence_beta: config.confidence_beta,
        valid,
        proposed_margins,
        timestamp_unix,
    })
}
