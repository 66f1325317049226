//! CBF-QP safety filter, reference controllers, and monitored rollouts.
//!
//! With a single affine constraint and unconstrained inputs the filter QP
//! `min ||u - u_ref||^2 s.t. <a, u> >= b` is the Euclidean projection onto a
//! half-space, so no solver is involved.

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::dynamics::{
    h_expert_unicycle, h_expert_unicycle_grad, h_spec_point_mass, h_spec_point_mass_grad,
    rk4_step, wrap_angle, SystemModel, UnicycleParams,
};
use crate::error::{Error, Result};
use crate::mlp::BarrierNet;

/// Anything usable as a barrier candidate h(x).
pub trait Barrier {
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.value(x)?, self.gradient(x)?))
    }
}

impl Barrier for BarrierNet {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        self.forward(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.grad_input(x)
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.value_and_grad(x)
    }
}

/// Closed-form barriers for the two benchmarks.
#[derive(Debug, Clone, Copy)]
pub enum AnalyticBarrier {
    PointMassSpec,
    UnicycleExpert(UnicycleParams),
}

impl Barrier for AnalyticBarrier {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(match self {
            AnalyticBarrier::PointMassSpec => h_spec_point_mass(x),
            AnalyticBarrier::UnicycleExpert(p) => h_expert_unicycle(x, *p),
        })
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(match self {
            AnalyticBarrier::PointMassSpec => h_spec_point_mass_grad(x),
            AnalyticBarrier::UnicycleExpert(p) => h_expert_unicycle_grad(x, *p),
        })
    }
}

/// Result of one filter evaluation.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub control: DVector<f64>,
    /// True when the projection moved the reference control.
    pub active: bool,
    /// `<a, u> - b` at the returned control; nonnegative up to 1e-9.
    pub slack: f64,
}

/// Project `u_ref` onto `{u : <a, u> >= b}` with
/// `a = g(x)^T grad h`, `b = -<grad h, f(x)> - kappa_gain * h`.
pub fn qp_filter<B: Barrier + ?Sized>(
    barrier: &B,
    model: &SystemModel,
    x: &DVector<f64>,
    u_ref: &DVector<f64>,
    kappa_gain: f64,
) -> Result<FilterOutput> {
    let (h, grad) = barrier.value_and_gradient(x)?;
    let f = model.drift(x);
    let g = model.actuation(x);
    let a = g.transpose() * &grad;
    let b = -grad.dot(&f) - kappa_gain * h;
    let slack_ref = a.dot(u_ref) - b;
    if slack_ref >= 0.0 {
        return Ok(FilterOutput { control: u_ref.clone(), active: false, slack: slack_ref });
    }
    let n2 = a.norm_squared();
    // Below this the Lie derivative is numerically zero and the constraint
    // cannot be restored by any control.
    if n2 < 1e-18 {
        return Err(Error::QpInfeasible { state: x.as_slice().to_vec(), slack: slack_ref });
    }
    let control = u_ref + &a * ((b - a.dot(u_ref)) / n2);
    let slack = a.dot(&control) - b;
    Ok(FilterOutput { control, active: true, slack })
}

/// Performance policies for the two benchmarks.
#[derive(Debug, Clone)]
pub enum Task {
    /// Point mass: track the circle of the given radius traversed at rate
    /// `omega`, proportional position feedback plus velocity feedforward.
    TrackCircle { radius: f64, omega: f64, k_p: f64, k_ff: f64 },
    /// Unicycle: steer toward a goal pose, aligning to the goal heading once
    /// the position error is small.
    GoToGoal { goal: DVector<f64>, k_v: f64, k_omega: f64, v_max: f64 },
}

impl Task {
    pub fn track_circle(radius: f64) -> Self {
        Task::TrackCircle { radius, omega: 0.5, k_p: 2.0, k_ff: 1.0 }
    }

    pub fn go_to_goal(goal: DVector<f64>) -> Self {
        Task::GoToGoal { goal, k_v: 0.8, k_omega: 2.0, v_max: 2.0 }
    }

    pub fn reference(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        match self {
            Task::TrackCircle { radius, omega, k_p, k_ff } => {
                let p_ref = DVector::from_vec(vec![
                    radius * (omega * t).cos(),
                    radius * (omega * t).sin(),
                ]);
                let v_ref = DVector::from_vec(vec![
                    -radius * omega * (omega * t).sin(),
                    radius * omega * (omega * t).cos(),
                ]);
                (p_ref - x) * *k_p + v_ref * *k_ff
            }
            Task::GoToGoal { goal, k_v, k_omega, v_max } => {
                let dx = goal[0] - x[0];
                let dy = goal[1] - x[1];
                let dist = (dx * dx + dy * dy).sqrt();
                if dist < 1e-3 {
                    let err = wrap_angle(goal[2] - x[2]);
                    return DVector::from_vec(vec![0.0, k_omega * err]);
                }
                let bearing = dy.atan2(dx);
                let err = wrap_angle(bearing - x[2]);
                let v = (k_v * dist * err.cos()).clamp(-v_max, *v_max);
                DVector::from_vec(vec![v, k_omega * err])
            }
        }
    }
}

/// The named reference-policy entry point; dimension-checked.
pub fn reference_controller(
    model: &SystemModel,
    task: &Task,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    if x.len() != model.state_dim {
        return Err(Error::ShapeMismatch { expected: model.state_dim, got: x.len() });
    }
    let u = task.reference(x, t);
    if u.len() != model.control_dim {
        return Err(Error::ShapeMismatch { expected: model.control_dim, got: u.len() });
    }
    Ok(u)
}

/// A monitored closed-loop trajectory. Controls, flags, and slacks are one
/// shorter than states; violation is judged against the geometric safe set
/// and recording continues past the first violation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub filter_active: Vec<bool>,
    pub h_values: Vec<f64>,
    pub violated: bool,
    pub first_violation_time: Option<f64>,
    /// Time at which the filter became infeasible, truncating the rollout.
    pub infeasible_at: Option<f64>,
    /// Smallest constraint slack seen across applied controls.
    pub min_slack: f64,
}

/// Roll the filtered closed loop forward for `horizon_steps` RK4 steps.
pub fn rollout<B: Barrier + ?Sized>(
    model: &SystemModel,
    barrier: &B,
    task: &Task,
    x0: &DVector<f64>,
    horizon_steps: usize,
    dt: f64,
    kappa_gain: f64,
    safe_predicate: &dyn Fn(&DVector<f64>) -> bool,
) -> Result<Trajectory> {
    if horizon_steps == 0 {
        return Err(Error::InvalidInput("horizon_steps must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.clone()],
        controls: Vec::new(),
        filter_active: Vec::new(),
        h_values: vec![barrier.value(x0)?],
        violated: false,
        first_violation_time: None,
        infeasible_at: None,
        min_slack: f64::INFINITY,
    };
    let mut x = x0.clone();
    if !safe_predicate(&x) {
        traj.violated = true;
        traj.first_violation_time = Some(0.0);
    }
    for step in 0..horizon_steps {
        let t = step as f64 * dt;
        let u_ref = reference_controller(model, task, &x, t)?;
        let out = match qp_filter(barrier, model, &x, &u_ref, kappa_gain) {
            Ok(out) => out,
            Err(Error::QpInfeasible { .. }) => {
                traj.infeasible_at = Some(t);
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        x = rk4_step(model, &x, &out.control, dt)?;
        traj.min_slack = traj.min_slack.min(out.slack);
        traj.controls.push(out.control);
        traj.filter_active.push(out.active);
        traj.times.push((step + 1) as f64 * dt);
        traj.h_values.push(barrier.value(&x)?);
        traj.states.push(x.clone());
        if !traj.violated && !safe_predicate(&x) {
            traj.violated = true;
            traj.first_violation_time = Some((step + 1) as f64 * dt);
        }
    }
    Ok(traj)
}

impl Trajectory {
    /// Write as CSV: t, state..., control..., filter_active, h_value. The
    /// final row has no applied control and leaves those cells empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let state_dim = self.states[0].len();
        let control_dim = self.controls.first().map_or(0, |c| c.len());
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        for i in 0..state_dim {
            header.push(format!("x{i}"));
        }
        for i in 0..control_dim {
            header.push(format!("u{i}"));
        }
        header.push("filter_active".into());
        header.push("h_value".into());
        wtr.write_record(&header)?;
        for (i, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![format!("{t}")];
            row.extend(s.iter().map(|v| format!("{v}")));
            if i < self.controls.len() {
                row.extend(self.controls[i].iter().map(|v| format!("{v}")));
                row.push(format!("{}", self.filter_active[i]));
            } else {
                row.extend(std::iter::repeat(String::new()).take(control_dim + 1));
            }
            row.push(format!("{}", self.h_values[i]));
            wtr.write_record(&row)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PointMassParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// Linear test barrier h(x) = <w, x> + off.
    struct LinearBarrier {
        w: DVector<f64>,
        off: f64,
    }

    impl Barrier for LinearBarrier {
        fn value(&self, x: &DVector<f64>) -> Result<f64> {
            Ok(self.w.dot(x) + self.off)
        }

        fn gradient(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(self.w.clone())
        }
    }

    #[test]
    fn inactive_constraint_passes_reference_through_bit_exactly() {
        let model = SystemModel::point_mass(PointMassParams::default());
        // Deep inside the safe set with h large: constraint slack is positive.
        let barrier = LinearBarrier { w: dv(&[-1.0, 0.0]), off: 1.0 };
        let x = dv(&[0.0, 0.0]);
        let u_ref = dv(&[0.123456789, -0.987654321]);
        let out = qp_filter(&barrier, &model, &x, &u_ref, 1.0).unwrap();
        assert!(!out.active);
        assert_eq!(out.control[0].to_bits(), u_ref[0].to_bits());
        assert_eq!(out.control[1].to_bits(), u_ref[1].to_bits());
    }

    /// 1-D half space u >= 2 from a hand-built system; brute-force grid
    /// minimization over feasible controls confirms the projection.
    #[test]
    fn one_dimensional_projection_matches_grid_search() {
        use nalgebra::DMatrix;
        // x_dot = u (f = 0, g = 1), h picked so a = 1, b = 2 at x:
        // grad h = (1), h = -2, kappa_gain = 1 -> b = -0 - (-2) = 2.
        let model = SystemModel::from_parts(
            "integrator",
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::from_row_slice(1, 1, &[1.0]),
            |_| true,
        );
        let barrier = LinearBarrier { w: dv(&[1.0]), off: -2.0 };
        let x = dv(&[0.0]);
        let u_ref = dv(&[0.0]);
        let out = qp_filter(&barrier, &model, &x, &u_ref, 1.0).unwrap();
        assert!(out.active);
        assert_abs_diff_eq!(out.control[0], 2.0, epsilon = 1e-12);
        let best = (0..=4000)
            .map(|i| 2.0 + i as f64 * 1e-3)
            .map(|u| (u - u_ref[0]).powi(2))
            .fold(f64::INFINITY, f64::min);
        assert!((out.control[0] - u_ref[0]).powi(2) <= best + 1e-12);
    }

    #[test]
    fn filter_is_invariant_to_positive_barrier_scaling() {
        let model = SystemModel::point_mass(PointMassParams::default());
        let x = dv(&[1.4, 0.2]);
        let u_ref = dv(&[0.8, 0.0]);
        let b1 = LinearBarrier { w: dv(&[-1.0, 0.0]), off: 1.0 };
        // Scaling h by 10 scales a and b by 10 (kappa linear in h).
        let b10 = LinearBarrier { w: dv(&[-10.0, 0.0]), off: 10.0 };
        let o1 = qp_filter(&b1, &model, &x, &u_ref, 1.0).unwrap();
        let o10 = qp_filter(&b10, &model, &x, &u_ref, 1.0).unwrap();
        assert!(o1.active && o10.active);
        assert_abs_diff_eq!(o1.control[0], o10.control[0], epsilon = 1e-12);
        assert_abs_diff_eq!(o1.control[1], o10.control[1], epsilon = 1e-12);
    }

    #[test]
    fn zero_gradient_with_violated_constraint_is_infeasible() {
        let model = SystemModel::point_mass(PointMassParams::default());
        // Constant h = -1: gradient 0, b = 1 > 0 = <a, u_ref>.
        let barrier = LinearBarrier { w: dv(&[0.0, 0.0]), off: -1.0 };
        let err = qp_filter(&barrier, &model, &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]), 1.0);
        match err {
            Err(Error::QpInfeasible { state, slack }) => {
                assert_eq!(state, vec![0.0, 0.0]);
                assert_abs_diff_eq!(slack, -1.0, epsilon = 1e-12);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn point_mass_reference_is_zero_on_stationary_reference() {
        let model = SystemModel::point_mass(PointMassParams::default());
        let task = Task::TrackCircle { radius: 0.5, omega: 0.0, k_p: 2.0, k_ff: 1.0 };
        let u = reference_controller(&model, &task, &dv(&[0.5, 0.0]), 0.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_reference_is_zero_at_goal() {
        let model = SystemModel::unicycle(UnicycleParams::default());
        let goal = dv(&[5.0, 0.0, std::f64::consts::PI]);
        let task = Task::go_to_goal(goal.clone());
        let u = reference_controller(&model, &task, &goal, 0.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unicycle_reference_drives_forward_toward_ahead_goal() {
        let model = SystemModel::unicycle(UnicycleParams::default());
        let task = Task::GoToGoal {
            goal: dv(&[5.0, 0.0, std::f64::consts::PI]),
            k_v: 1.0,
            k_omega: 1.0,
            v_max: 2.0,
        };
        let u = reference_controller(&model, &task, &dv(&[0.0, 0.0, 0.0]), 0.0).unwrap();
        assert!(u[0] > 0.0);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rollout_in_deep_safe_region_never_activates() {
        let model = SystemModel::point_mass(PointMassParams::default());
        // Gentle barrier: large h, small gradient; constraint has huge slack.
        let barrier = LinearBarrier { w: dv(&[-0.01, -0.01]), off: 10.0 };
        let task = Task::TrackCircle { radius: 0.2, omega: 0.5, k_p: 1.0, k_ff: 1.0 };
        let traj = rollout(
            &model,
            &barrier,
            &task,
            &dv(&[0.0, 0.0]),
            50,
            0.01,
            1.0,
            &|x| model.is_safe(x),
        )
        .unwrap();
        assert!(!traj.violated);
        assert!(traj.first_violation_time.is_none());
        assert!(traj.filter_active.iter().all(|&a| !a));
        assert_eq!(traj.states.len(), 51);
        assert_eq!(traj.controls.len(), 50);
        assert_eq!(traj.times.len(), 51);
        assert_eq!(traj.h_values.len(), 51);
        assert!(traj.min_slack > 0.0);
    }

    #[test]
    fn rollout_starting_outside_flags_time_zero() {
        let model = SystemModel::point_mass(PointMassParams::default());
        let barrier = AnalyticBarrier::PointMassSpec;
        let task = Task::track_circle(0.2);
        let traj = rollout(
            &model,
            &barrier,
            &task,
            &dv(&[2.0, 0.0]),
            5,
            0.01,
            1.0,
            &|x| model.is_safe(x),
        )
        .unwrap();
        assert!(traj.violated);
        assert_eq!(traj.first_violation_time, Some(0.0));
        assert_eq!(traj.states.len(), 6);
    }

    #[test]
    fn rollout_truncates_on_infeasibility() {
        let model = SystemModel::point_mass(PointMassParams::default());
        let barrier = LinearBarrier { w: dv(&[0.0, 0.0]), off: -1.0 };
        let task = Task::track_circle(0.2);
        let traj = rollout(
            &model,
            &barrier,
            &task,
            &dv(&[0.0, 0.0]),
            10,
            0.01,
            1.0,
            &|x| model.is_safe(x),
        )
        .unwrap();
        assert_eq!(traj.infeasible_at, Some(0.0));
        assert_eq!(traj.states.len(), 1);
        assert!(traj.controls.is_empty());
    }

    #[test]
    fn trajectory_csv_round_trip_shape() {
        let model = SystemModel::point_mass(PointMassParams::default());
        let barrier = AnalyticBarrier::PointMassSpec;
        let task = Task::track_circle(0.3);
        let traj = rollout(
            &model,
            &barrier,
            &task,
            &dv(&[0.0, 0.0]),
            10,
            0.01,
            1.0,
            &|x| model.is_safe(x),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let headers = rdr.headers().unwrap().clone();
        assert_eq!(
            headers.iter().collect::<Vec<_>>(),
            vec!["t", "x0", "x1", "u0", "u1", "filter_active", "h_value"]
        );
        assert_eq!(rdr.records().count(), 11);
    }

    proptest! {
        /// Whenever the filter returns, the constraint holds to tolerance.
        #[test]
        fn filter_output_satisfies_constraint(
            w0 in -2.0..2.0f64, w1 in -2.0..2.0f64, off in -1.0..1.0f64,
            x0 in -1.5..1.5f64, x1 in -1.5..1.5f64,
            u0 in -3.0..3.0f64, u1 in -3.0..3.0f64,
        ) {
            let model = SystemModel::point_mass(PointMassParams::default());
            let barrier = LinearBarrier { w: dv(&[w0, w1]), off };
            let x = dv(&[x0, x1]);
            let u_ref = dv(&[u0, u1]);
            if let Ok(out) = qp_filter(&barrier, &model, &x, &u_ref, 1.0) {
                let grad = barrier.gradient(&x).unwrap();
                let a = model.actuation(&x).transpose() * &grad;
                let b = -grad.dot(&model.drift(&x)) - barrier.value(&x).unwrap();
                prop_assert!(a.dot(&out.control) - b >= -1e-9);
            }
        }

        /// Projection optimality against random feasible alternatives.
        #[test]
        fn projection_is_no_farther_than_random_feasible_points(
            w0 in 0.2..2.0f64, w1 in -2.0..2.0f64, off in -3.0..0.0f64,
            u0 in -3.0..3.0f64, u1 in -3.0..3.0f64,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let model = SystemModel::point_mass(PointMassParams::default());
            let barrier = LinearBarrier { w: dv(&[w0, w1]), off };
            let x = dv(&[0.4, -0.3]);
            let u_ref = dv(&[u0, u1]);
            let out = qp_filter(&barrier, &model, &x, &u_ref, 1.0).unwrap();
            let grad = barrier.gradient(&x).unwrap();
            let a = model.actuation(&x).transpose() * &grad;
            let b = -grad.dot(&model.drift(&x)) - barrier.value(&x).unwrap();
            let dist = (&out.control - &u_ref).norm();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut checked = 0;
            while checked < 1000 {
                let cand = dv(&[rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)]);
                if a.dot(&cand) >= b {
                    prop_assert!(dist <= (&cand - &u_ref).norm() + 1e-9);
                    checked += 1;
                }
            }
        }
    }
}
