//! Benchmark control-affine systems and a fixed-step RK4 integrator.
//!
//! Both benchmarks follow `x_dot = f(x) + g(x) u`. The point mass is a
//! two-state system with a polynomial input gain; the unicycle is the
//! standard kinematic model. Each carries an analytic safety function whose
//! nonnegative region defines the geometric safe set used to judge rollouts.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Parameters of the nonlinear point-mass benchmark.
#[derive(Debug, Clone, Copy)]
pub struct PointMassParams {
    /// Input-gain offset; must be positive so the actuation never vanishes.
    pub delta: f64,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

/// Parameters of the unicycle benchmark's expert barrier.
#[derive(Debug, Clone, Copy)]
pub struct UnicycleParams {
    /// Turning radius used in the expert barrier.
    pub radius: f64,
    /// Required clearance distance.
    pub safe_distance: f64,
}

impl Default for UnicycleParams {
    fn default() -> Self {
        // safe_distance^2 = 2*radius^2 + 1 leaves a unit-radius unsafe disk
        // around the heading-dependent obstacle center.
        Self {
            radius: 1.0,
            safe_distance: 3.0_f64.sqrt(),
        }
    }
}

type VecFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type PredFn = Box<dyn Fn(&DVector<f64>) -> bool + Send + Sync>;
type SteerFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A control-affine system `x_dot = f(x) + g(x) u` together with the
/// geometric safe-set predicate used to judge trajectories.
pub struct SystemModel {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    drift: VecFn,
    actuation: MatFn,
    safe_predicate: PredFn,
    /// Optional helper mapping (state, target state) to a control that
    /// steers toward the target; used to construct buffer-band data.
    steer: Option<SteerFn>,
}

impl SystemModel {
    /// Build a model from raw closures. Intended for tests and custom systems.
    pub fn from_parts(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        actuation: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        safe_predicate: impl Fn(&DVector<f64>) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            control_dim,
            drift: Box::new(drift),
            actuation: Box::new(actuation),
            safe_predicate: Box::new(safe_predicate),
            steer: None,
        }
    }

    /// The nonlinear point mass on the safe quadrant `x1 <= 1, x2 <= 1`.
    pub fn point_mass(params: PointMassParams) -> Self {
        let delta = params.delta;
        let mut model = Self::from_parts(
            "point_mass",
            2,
            2,
            |x| DVector::from_vec(vec![-x[0], -x[1]]),
            move |x| {
                DMatrix::from_row_slice(2, 2, &[x[0] * x[0] + delta, 0.0, 0.0, x[1] * x[1] + delta])
            },
            |x| h_spec_point_mass(x) > 0.0,
        );
        // g is diagonal and invertible, so any desired velocity is reachable:
        // pick u with f(x) + g(x) u pointing at the target.
        model.steer = Some(Box::new(move |x, target| {
            let mut dir = target - x;
            let n = dir.norm();
            if n > 1e-12 {
                dir /= n;
            }
            DVector::from_vec(vec![
                (dir[0] + x[0]) / (x[0] * x[0] + delta),
                (dir[1] + x[1]) / (x[1] * x[1] + delta),
            ])
        }));
        model
    }

    /// Kinematic unicycle; safe where the expert barrier is nonnegative.
    pub fn unicycle(params: UnicycleParams) -> Self {
        let mut model = Self::from_parts(
            "unicycle",
            3,
            2,
            |_x| DVector::zeros(3),
            |x| {
                DMatrix::from_row_slice(3, 2, &[x[2].cos(), 0.0, x[2].sin(), 0.0, 0.0, 1.0])
            },
            move |x| h_expert_unicycle(x, params) >= 0.0,
        );
        model.steer = Some(Box::new(|x, target| {
            let dx = target[0] - x[0];
            let dy = target[1] - x[1];
            let dist = (dx * dx + dy * dy).sqrt();
            let bearing = dy.atan2(dx);
            let err = wrap_angle(bearing - x[2]);
            DVector::from_vec(vec![(1.5 * dist * err.cos()).clamp(-2.0, 2.0), 2.0 * err])
        }));
        model
    }

    /// Drift term f(x).
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    /// Actuation matrix g(x), shape state_dim x control_dim.
    pub fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.actuation)(x)
    }

    /// Full dynamics f(x) + g(x) u.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.actuation(x) * u
    }

    /// Membership in the geometric safe set.
    pub fn is_safe(&self, x: &DVector<f64>) -> bool {
        (self.safe_predicate)(x)
    }

    /// Control steering the state toward `target`, when the system defines one.
    pub fn steer_toward(&self, x: &DVector<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
        self.steer.as_ref().map(|s| s(x, target))
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite {name}: {v:?}")));
    }
    Ok(())
}

/// Point-mass dynamics: `x1_dot = -x1 + (x1^2 + delta) u1` and likewise for x2.
pub fn eval_point_mass(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: PointMassParams,
) -> Result<DVector<f64>> {
    check_finite("state", x.as_slice())?;
    check_finite("control", u.as_slice())?;
    Ok(DVector::from_vec(vec![
        -x[0] + (x[0] * x[0] + params.delta) * u[0],
        -x[1] + (x[1] * x[1] + params.delta) * u[1],
    ]))
}

/// Unicycle kinematics for state (x, y, heading) and control (speed, turn rate).
pub fn eval_unicycle(x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_finite("state", x.as_slice())?;
    check_finite("control", u.as_slice())?;
    Ok(DVector::from_vec(vec![
        u[0] * x[2].cos(),
        u[0] * x[2].sin(),
        u[1],
    ]))
}

/// Analytic safety function of the point mass: min(1 - x1, 1 - x2).
/// Positive strictly inside the safe quadrant, zero on its boundary.
pub fn h_spec_point_mass(x: &DVector<f64>) -> f64 {
    (1.0 - x[0]).min(1.0 - x[1])
}

/// Subgradient of the point-mass safety function (active min branch).
pub fn h_spec_point_mass_grad(x: &DVector<f64>) -> DVector<f64> {
    if 1.0 - x[0] <= 1.0 - x[1] {
        DVector::from_vec(vec![-1.0, 0.0])
    } else {
        DVector::from_vec(vec![0.0, -1.0])
    }
}

/// The unicycle expert barrier
/// `(x - R sin th)^2 + (y + R cos th)^2 + 2 R^2 - D_s^2`.
pub fn h_expert_unicycle(x: &DVector<f64>, params: UnicycleParams) -> f64 {
    let r = params.radius;
    let a = x[0] - r * x[2].sin();
    let b = x[1] + r * x[2].cos();
    a * a + b * b + 2.0 * r * r - params.safe_distance * params.safe_distance
}

/// Gradient of [`h_expert_unicycle`] with respect to (x, y, heading).
pub fn h_expert_unicycle_grad(x: &DVector<f64>, params: UnicycleParams) -> DVector<f64> {
    let r = params.radius;
    let a = x[0] - r * x[2].sin();
    let b = x[1] + r * x[2].cos();
    DVector::from_vec(vec![
        2.0 * a,
        2.0 * b,
        2.0 * a * (-r * x[2].cos()) + 2.0 * b * (-r * x[2].sin()),
    ])
}

/// One classical fourth-order Runge-Kutta step of `x_dot = f(x) + g(x) u`
/// with the control held constant over the step.
pub fn rk4_step(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let k1 = model.dynamics(x, u);
    let k2 = model.dynamics(&(x + &k1 * (dt / 2.0)), u);
    let k3 = model.dynamics(&(x + &k2 * (dt / 2.0)), u);
    let k4 = model.dynamics(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|c| !c.is_finite()) {
        return Err(Error::IntegrationDiverged);
    }
    Ok(next)
}
