//! Impact-consistent extended ante- and post-impact task references.
//!
//! Both references are quintic polynomials in time. Extending a reference
//! past (ante) or before (post) the nominal impact time is plain polynomial
//! continuation, so every extended reference is C² everywhere. After the
//! post-impact motion reaches its rest pose it holds that pose.

use std::io::Write;

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::contact::{contact_geometry, impact_map, ActiveSet};
use crate::error::{Error, Result};
use crate::mechanics::{dir, forward_kinematics, perp, task_jacobians, Pose};
use crate::numfmt::sci12;
use crate::params::{ModelParams, State};

/// IK Jacobians with a larger condition number count as singular.
pub const MAX_IK_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSample {
    pub value: f64,
    pub rate: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSample {
    pub p: Vector2<f64>,
    pub v: Vector2<f64>,
    pub a: Vector2<f64>,
}

/// `c0 + c1 s + … + c5 s⁵` with `s = t − t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quintic {
    t0: f64,
    c: [f64; 6],
}

impl Quintic {
    pub fn constant(value: f64) -> Self {
        Quintic { t0: 0.0, c: [value, 0.0, 0.0, 0.0, 0.0, 0.0] }
    }

    /// Quintic matching position, velocity and acceleration at `t0` and `t1`.
    pub fn boundary(t0: f64, t1: f64, start: [f64; 3], end: [f64; 3]) -> Self {
        let t = t1 - t0;
        let [p0, v0, a0] = start;
        let [p1, v1, a1] = end;
        let h = p1 - (p0 + v0 * t + 0.5 * a0 * t * t);
        let dv = v1 - (v0 + a0 * t);
        let da = a1 - a0;
        let (t2, t3) = (t * t, t * t * t);
        Quintic {
            t0,
            c: [
                p0,
                v0,
                0.5 * a0,
                (10.0 * h - 4.0 * dv * t + 0.5 * da * t2) / t3,
                (-15.0 * h + 7.0 * dv * t - da * t2) / (t3 * t),
                (6.0 * h - 3.0 * dv * t + 0.5 * da * t2) / (t3 * t2),
            ],
        }
    }

    pub fn eval(&self, t: f64) -> ScalarSample {
        let s = t - self.t0;
        let c = &self.c;
        ScalarSample {
            value: c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * (c[4] + s * c[5])))),
            rate: c[1] + s * (2.0 * c[2] + s * (3.0 * c[3] + s * (4.0 * c[4] + s * 5.0 * c[5]))),
            accel: 2.0 * c[2] + s * (6.0 * c[3] + s * (12.0 * c[4] + s * 20.0 * c[5])),
        }
    }
}

fn planar(x: &Quintic, y: &Quintic, t: f64) -> TaskSample {
    let (sx, sy) = (x.eval(t), y.eval(t));
    TaskSample {
        p: Vector2::new(sx.value, sy.value),
        v: Vector2::new(sx.rate, sy.rate),
        a: Vector2::new(sx.accel, sy.accel),
    }
}

/// Assumed-known plank angle and rate at the nominal impact.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlankState {
    pub angle: f64,
    pub rate: f64,
}

/// Scenario inputs for [`build_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Face midpoint at t = 0, m.
    pub start_position: [f64; 2],
    pub start_orientation: f64,
    /// Distance along the plank from the hinge to the face midpoint at impact.
    pub contact_distance: f64,
    /// Approach speed along the inward plank normal at impact, m/s.
    pub approach_speed: f64,
    pub t_imp: f64,
    pub t_end: f64,
    pub plank_angle: f64,
    pub plank_rate: f64,
    /// Time from the nominal impact until the post-impact rest pose.
    pub post_duration: f64,
    /// Rest position relative to the impact position, m.
    pub rest_offset: [f64; 2],
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            start_position: [0.33, 0.58],
            start_orientation: 0.4,
            contact_distance: 0.3,
            approach_speed: 0.5,
            t_imp: 1.0,
            t_end: 2.0,
            plank_angle: 0.0,
            plank_rate: 0.0,
            post_duration: 0.5,
            rest_offset: [0.0, -0.02],
        }
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = self.start_position.iter().chain(self.rest_offset.iter()).all(|v| v.is_finite())
            && [self.start_orientation, self.contact_distance, self.approach_speed, self.plank_angle, self.plank_rate]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("scenario values must be finite".into()));
        }
        if !(self.t_imp > 0.0 && self.t_imp < self.t_end) {
            return Err(Error::InvalidConfig("t_imp must lie in (0, t_end)".into()));
        }
        if !(self.post_duration > 0.0) {
            return Err(Error::InvalidConfig("post_duration must be positive".into()));
        }
        if !(self.approach_speed >= 0.0) {
            return Err(Error::InvalidConfig("approach_speed must be non-negative".into()));
        }
        Ok(())
    }

    pub fn start_pose(&self) -> Pose {
        Pose { p: Vector2::from(self.start_position), theta: self.start_orientation }
    }

    pub fn plank_nominal(&self) -> PlankState {
        PlankState { angle: self.plank_angle, rate: self.plank_rate }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBundle {
    pub t_imp: f64,
    pub t_end: f64,
    ante_x: Quintic,
    ante_y: Quintic,
    ante_theta: Quintic,
    post_x: Quintic,
    post_y: Quintic,
    post_end: f64,
    pub q_minus: Vector4<f64>,
    pub qdot_minus: Vector4<f64>,
    pub qdot_plus: Vector4<f64>,
    pub plank_nominal: PlankState,
    pub start_pose: Pose,
    pub impact_pose: Pose,
    pub rest_position: Vector2<f64>,
}

impl ReferenceBundle {
    /// Extended ante-impact position reference.
    pub fn ante_position(&self, t: f64) -> TaskSample {
        planar(&self.ante_x, &self.ante_y, t)
    }

    /// Extended ante-impact orientation reference.
    pub fn ante_orientation(&self, t: f64) -> ScalarSample {
        self.ante_theta.eval(t)
    }

    /// Extended post-impact position reference.
    pub fn post_position(&self, t: f64) -> TaskSample {
        if t >= self.post_end {
            TaskSample { p: self.rest_position, v: Vector2::zeros(), a: Vector2::zeros() }
        } else {
            planar(&self.post_x, &self.post_y, t)
        }
    }

    /// Reference CSV: one row per `dt` from 0 to `t_end`, `%.12e` values.
    pub fn write_csv<W: Write>(&self, w: &mut W, dt: f64) -> Result<()> {
        writeln!(
            w,
            "t,ante_px,ante_py,ante_theta,ante_vx,ante_vy,ante_thetadot,ante_ax,ante_ay,ante_thetaddot,post_px,post_py,post_vx,post_vy,post_ax,post_ay"
        )?;
        let steps = (self.t_end / dt).round() as usize;
        for k in 0..=steps {
            let t = k as f64 * dt;
            let a = self.ante_position(t);
            let o = self.ante_orientation(t);
            let p = self.post_position(t);
            let row = [
                t, a.p.x, a.p.y, o.value, a.v.x, a.v.y, o.rate, a.a.x, a.a.y, o.accel, p.p.x, p.p.y, p.v.x, p.v.y, p.a.x, p.a.y,
            ];
            let line: Vec<String> = row.iter().map(|v| sci12(*v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Face pose resting flush on the plank surface `distance` along the plank
/// from the hinge.
pub fn flush_face_pose(params: &ModelParams, distance: f64, plank_angle: f64) -> Pose {
    let p = params.hinge() + distance * dir(plank_angle) + 0.5 * params.plank_thickness * perp(plank_angle);
    Pose { p, theta: plank_angle }
}

/// Closed-form planar 3R inverse kinematics for the face pose, elbow-up branch
/// (`q2 ≤ 0`) or elbow-down (`q2 ≥ 0`).
pub fn inverse_kinematics(params: &ModelParams, pose: &Pose, elbow_up: bool) -> Result<Vector3<f64>> {
    let [l1, l2, l3] = params.link_lengths;
    let wrist = pose.p - l3 * dir(pose.theta);
    let c2 = (wrist.norm_squared() - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(c2.abs() <= 1.0) {
        return Err(Error::Unreachable);
    }
    let q2 = if elbow_up { -c2.acos() } else { c2.acos() };
    let q1 = wrist.y.atan2(wrist.x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q = Vector3::new(q1, q2, pose.theta - q1 - q2);
    let condition = stacked_condition(params, &q);
    if !(condition <= MAX_IK_CONDITION) {
        return Err(Error::NearSingular { condition });
    }
    Ok(q)
}

fn stacked_condition(params: &ModelParams, q_rob: &Vector3<f64>) -> f64 {
    let q = Vector4::new(q_rob[0], q_rob[1], q_rob[2], 0.0);
    let j = task_jacobians(params, &q, &Vector4::zeros()).stacked_rob();
    let sv = j.singular_values();
    let lo = sv.min();
    if lo > 0.0 {
        sv.max() / lo
    } else {
        f64::INFINITY
    }
}

pub fn nominal_impact_configuration(params: &ModelParams, target: &Pose, plank: &PlankState) -> Result<Vector4<f64>> {
    let q_rob = inverse_kinematics(params, target, true)?;
    Ok(Vector4::new(q_rob[0], q_rob[1], q_rob[2], plank.angle))
}

/// Robot joint rates realizing the task velocity `(ṗ, θ̇)`.
pub fn inverse_velocity(params: &ModelParams, q: &Vector4<f64>, p_rate: &Vector2<f64>, theta_rate: f64) -> Result<Vector3<f64>> {
    let j: Matrix3<f64> = task_jacobians(params, q, &Vector4::zeros()).stacked_rob();
    let lu = j.lu();
    if !lu.is_invertible() {
        return Err(Error::SingularTaskJacobian);
    }
    lu.solve(&Vector3::new(p_rate.x, p_rate.y, theta_rate)).ok_or(Error::SingularTaskJacobian)
}

/// Nominal ante-impact velocity by inverse velocity kinematics and the
/// matching post-impact velocity through the simultaneous impact map.
pub fn nominal_post_velocity(
    params: &ModelParams,
    q_minus: &Vector4<f64>,
    p_rate: &Vector2<f64>,
    theta_rate: f64,
    plank_rate: f64,
) -> Result<(Vector4<f64>, Vector4<f64>)> {
    let rob = inverse_velocity(params, q_minus, p_rate, theta_rate)?;
    let qdot_minus = Vector4::new(rob[0], rob[1], rob[2], plank_rate);
    let post = impact_map(params, &State::new(*q_minus, qdot_minus), ActiveSet::BOTH)?;
    Ok((qdot_minus, post.qdot_post))
}

pub fn build_reference(params: &ModelParams, spec: &ReferenceSpec) -> Result<ReferenceBundle> {
    spec.validate()?;
    let plank = spec.plank_nominal();
    let impact_pose = flush_face_pose(params, spec.contact_distance, plank.angle);
    let q_minus = nominal_impact_configuration(params, &impact_pose, &plank)?;
    // Approach along the inward plank normal while turning with the plank.
    let approach = -spec.approach_speed * perp(plank.angle);
    let (qdot_minus, qdot_plus) = nominal_post_velocity(params, &q_minus, &approach, plank.rate, plank.rate)?;

    let geom = contact_geometry(params, &State::new(q_minus, qdot_minus));
    if geom.gaps.amax() > 1e-10 {
        return Err(Error::InvalidConfig(format!("impact configuration leaves gaps {:?}", geom.gaps)));
    }

    let start = spec.start_pose();
    let t_imp = spec.t_imp;
    let ante_x = Quintic::boundary(0.0, t_imp, [start.p.x, 0.0, 0.0], [impact_pose.p.x, approach.x, 0.0]);
    let ante_y = Quintic::boundary(0.0, t_imp, [start.p.y, 0.0, 0.0], [impact_pose.p.y, approach.y, 0.0]);
    let ante_theta = Quintic::boundary(0.0, t_imp, [start.theta, 0.0, 0.0], [impact_pose.theta, plank.rate, 0.0]);

    let post_velocity = task_jacobians(params, &q_minus, &qdot_plus).jp * qdot_plus;
    let rest = impact_pose.p + Vector2::from(spec.rest_offset);
    let post_end = t_imp + spec.post_duration;
    let post_x = Quintic::boundary(t_imp, post_end, [impact_pose.p.x, post_velocity.x, 0.0], [rest.x, 0.0, 0.0]);
    let post_y = Quintic::boundary(t_imp, post_end, [impact_pose.p.y, post_velocity.y, 0.0], [rest.y, 0.0, 0.0]);

    Ok(ReferenceBundle {
        t_imp,
        t_end: spec.t_end,
        ante_x,
        ante_y,
        ante_theta,
        post_x,
        post_y,
        post_end,
        q_minus,
        qdot_minus,
        qdot_plus,
        plank_nominal: plank,
        start_pose: start,
        impact_pose,
        rest_position: rest,
    })
}

/// Elbow-up arm configuration at `start`, with the plank at `plank_angle`.
pub fn initial_configuration(params: &ModelParams, start: &Pose, plank_angle: f64) -> Result<Vector4<f64>> {
    let q = inverse_kinematics(params, start, true)?;
    Ok(Vector4::new(q[0], q[1], q[2], plank_angle))
}

/// Round-trip helper used by the tests and the CLI's reference export.
pub fn pose_of(params: &ModelParams, q: &Vector4<f64>) -> Pose {
    forward_kinematics(params, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bundle() -> (ModelParams, ReferenceBundle) {
        let p = ModelParams::default();
        let b = build_reference(&p, &ReferenceSpec::default()).unwrap();
        (p, b)
    }

    #[test]
    fn quintic_meets_boundary_conditions() {
        let q = Quintic::boundary(0.5, 1.5, [1.0, -0.2, 0.3], [2.0, 0.7, -1.0]);
        let a = q.eval(0.5);
        let b = q.eval(1.5);
        assert_relative_eq!(a.value, 1.0, epsilon = 1e-14);
        assert_relative_eq!(a.rate, -0.2, epsilon = 1e-14);
        assert_relative_eq!(a.accel, 0.3, epsilon = 1e-14);
        assert_relative_eq!(b.value, 2.0, epsilon = 1e-13);
        assert_relative_eq!(b.rate, 0.7, epsilon = 1e-13);
        assert_relative_eq!(b.accel, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn impact_configuration_is_flush_and_elbow_up() {
        let (p, b) = bundle();
        let g = contact_geometry(&p, &State::at_rest(b.q_minus));
        assert!(g.gaps.amax() <= 1e-10);
        assert!(b.q_minus[1] <= 0.0);
        let pose = forward_kinematics(&p, &b.q_minus);
        assert!((pose.p - b.impact_pose.p).amax() <= 1e-12);
        assert!((pose.theta - b.impact_pose.theta).abs() <= 1e-12);
    }

    #[test]
    fn elbow_branches_differ_in_sign() {
        let p = ModelParams::default();
        let pose = flush_face_pose(&p, 0.3, 0.0);
        let up = inverse_kinematics(&p, &pose, true).unwrap();
        let down = inverse_kinematics(&p, &pose, false).unwrap();
        assert!(up[1] < 0.0 && down[1] > 0.0);
        for q in [up, down] {
            let got = forward_kinematics(&p, &Vector4::new(q[0], q[1], q[2], 0.0));
            assert!((got.p - pose.p).amax() <= 1e-12);
        }
    }

    #[test]
    fn unreachable_and_singular_targets() {
        let p = ModelParams::default();
        let far = Pose { p: Vector2::new(2.0, 0.0), theta: 0.0 };
        assert_eq!(inverse_kinematics(&p, &far, true), Err(Error::Unreachable));
        let folded = Pose { p: Vector2::new(0.15, 0.0), theta: 0.0 };
        assert!(matches!(inverse_kinematics(&p, &folded, true), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn zero_task_velocity_gives_zero_joint_velocities() {
        let (p, b) = bundle();
        let (minus, plus) = nominal_post_velocity(&p, &b.q_minus, &Vector2::zeros(), 0.0, 0.0).unwrap();
        assert_eq!(minus, Vector4::zeros());
        assert!(plus.amax() == 0.0);
    }

    #[test]
    fn nominal_velocities_are_impact_consistent() {
        let (p, b) = bundle();
        let tk = task_jacobians(&p, &b.q_minus, &b.qdot_minus);
        let approach = -0.5 * perp(0.0);
        assert!((tk.jp * b.qdot_minus - approach).amax() <= 1e-10);
        assert!(((tk.jtheta * b.qdot_minus)[0]).abs() <= 1e-10);
        let g = contact_geometry(&p, &State::new(b.q_minus, b.qdot_minus));
        assert!(g.rates(&b.qdot_minus).iter().all(|r| *r < 0.0));
        assert!(g.rates(&b.qdot_plus).amax() <= 1e-10);
    }

    #[test]
    fn references_join_at_the_nominal_impact() {
        let (p, b) = bundle();
        let ante = b.ante_position(b.t_imp);
        let post = b.post_position(b.t_imp);
        assert!((ante.p - post.p).amax() <= 1e-12);
        assert!((ante.p - b.impact_pose.p).amax() <= 1e-12);
        assert!((ante.v - Vector2::new(0.0, -0.5)).amax() <= 1e-12);
        let post_rate = task_jacobians(&p, &b.q_minus, &b.qdot_plus).jp * b.qdot_plus;
        assert!((post.v - post_rate).amax() <= 1e-12);
        // Velocity jump between the overlapping references.
        assert!((ante.v - post.v).norm() > 0.1);
    }

    #[test]
    fn post_reference_holds_rest_pose() {
        let (_, b) = bundle();
        let end = b.post_position(b.t_end);
        assert_eq!(end.p, b.rest_position);
        let just_before = b.post_position(b.t_imp + 0.5 - 1e-9);
        assert!((just_before.p - b.rest_position).amax() < 1e-9);
        assert!(just_before.v.amax() < 1e-6);
    }

    #[test]
    fn rejects_bad_impact_time() {
        let p = ModelParams::default();
        let spec = ReferenceSpec { t_imp: 3.0, ..Default::default() };
        assert!(matches!(build_reference(&p, &spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn csv_export_has_expected_shape() {
        let (_, b) = bundle();
        let mut out = Vec::new();
        b.write_csv(&mut out, 0.01).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 202);
        assert_eq!(lines[1].split(',').count(), 16);
    }

    proptest! {
        #[test]
        fn ik_round_trip(distance in 0.2..0.4f64, angle in -0.2..0.2f64) {
            let p = ModelParams::default();
            let pose = flush_face_pose(&p, distance, angle);
            let q = nominal_impact_configuration(&p, &pose, &PlankState { angle, rate: 0.0 }).unwrap();
            let got = forward_kinematics(&p, &q);
            prop_assert!((got.p - pose.p).amax() <= 1e-12);
            prop_assert!((got.theta - pose.theta).abs() <= 1e-12);
            let g = contact_geometry(&p, &State::at_rest(q));
            prop_assert!(g.gaps.amax() <= 1e-10);
        }

        #[test]
        fn extended_references_are_smooth(t in 0.05..1.95f64) {
            // C² continuity: value and derivatives agree with central differences.
            let (_, b) = bundle();
            let h = 1e-6;
            let fd_v = (b.post_position(t + h).p - b.post_position(t - h).p) / (2.0 * h);
            prop_assert!((fd_v - b.post_position(t).v).amax() < 1e-6);
            let fd_a = (b.ante_position(t + h).v - b.ante_position(t - h).v) / (2.0 * h);
            prop_assert!((fd_a - b.ante_position(t).a).amax() < 1e-5);
        }
    }
}
