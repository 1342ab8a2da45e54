//! Kinematics and smooth dynamics of the three-link arm and the hinged plank.
//!
//! The arm is written in absolute link angles `φ = T·q_rob` (T lower
//! triangular of ones), where the Lagrangian of a planar chain has the closed
//! form
//!
//! ```text
//! T = ½ Σ_jk A_jk cos(φ_j − φ_k) φ̇_j φ̇_k + ½ Σ_j I_gj φ̇_j²
//! A_jk = Σ_i m_i l_ij l_ik,   l_ij = L_j (j < i), L_i/2 (j = i), 0 (j > i)
//! ```
//!
//! Links are uniform, so each centre of mass sits at the link midpoint. The
//! plank only carries its hinge inertia and the torsional spring-damper; it is
//! coupled to the arm exclusively through contact forces.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector2, Vector3, Vector4};

use crate::params::{ModelParams, State};

pub type Matrix2x4 = SMatrix<f64, 2, 4>;
pub type Matrix1x4 = SMatrix<f64, 1, 4>;
pub type Matrix4x3 = SMatrix<f64, 4, 3>;

/// End-effector pose: midpoint of the contact face and its absolute angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub p: Vector2<f64>,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskKinematics {
    pub p: Vector2<f64>,
    pub theta: f64,
    pub jp: Matrix2x4,
    pub jtheta: Matrix1x4,
    pub jp_dot: Matrix2x4,
    pub jtheta_dot: Matrix1x4,
}

impl TaskKinematics {
    pub fn pose(&self) -> Pose {
        Pose { p: self.p, theta: self.theta }
    }

    /// Stacked robot block `[J_p,rob; J_θ,rob]`.
    pub fn stacked_rob(&self) -> Matrix3<f64> {
        let mut j = Matrix3::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&self.jp.fixed_view::<2, 3>(0, 0));
        j.fixed_view_mut::<1, 3>(2, 0).copy_from(&self.jtheta.fixed_view::<1, 3>(0, 0));
        j
    }
}

#[inline]
pub(crate) fn dir(angle: f64) -> Vector2<f64> {
    Vector2::new(angle.cos(), angle.sin())
}

#[inline]
pub(crate) fn perp(angle: f64) -> Vector2<f64> {
    Vector2::new(-angle.sin(), angle.cos())
}

fn absolute_angles(q: &Vector4<f64>) -> [f64; 3] {
    [q[0], q[0] + q[1], q[0] + q[1] + q[2]]
}

fn absolute_rates(qdot: &Vector4<f64>) -> [f64; 3] {
    [qdot[0], qdot[0] + qdot[1], qdot[0] + qdot[1] + qdot[2]]
}

/// `l_ij`: lever of link j's angle on the centre of mass of link i.
fn lever(params: &ModelParams, i: usize, j: usize) -> f64 {
    use std::cmp::Ordering::*;
    match j.cmp(&i) {
        Less => params.link_lengths[j],
        Equal => params.com_fractions[i] * params.link_lengths[i],
        Greater => 0.0,
    }
}

fn coupling(params: &ModelParams) -> Matrix3<f64> {
    Matrix3::from_fn(|j, k| (0..3).map(|i| params.link_masses[i] * lever(params, i, j) * lever(params, i, k)).sum())
}

fn angle_map() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0)
}

/// `S = [I₃ 0]ᵀ`
pub fn actuation_matrix() -> Matrix4x3 {
    let mut s = Matrix4x3::zeros();
    s.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    s
}

pub fn forward_kinematics(params: &ModelParams, q: &Vector4<f64>) -> Pose {
    let phi = absolute_angles(q);
    let p = (0..3).fold(Vector2::zeros(), |acc, j| acc + params.link_lengths[j] * dir(phi[j]));
    Pose { p, theta: phi[2] }
}

/// Base-frame joint positions `[base, joint 2, joint 3, face midpoint]`.
pub fn joint_positions(params: &ModelParams, q: &Vector4<f64>) -> [Vector2<f64>; 4] {
    let phi = absolute_angles(q);
    let mut pts = [Vector2::zeros(); 4];
    for j in 0..3 {
        pts[j + 1] = pts[j] + params.link_lengths[j] * dir(phi[j]);
    }
    pts
}

pub fn task_jacobians(params: &ModelParams, q: &Vector4<f64>, qdot: &Vector4<f64>) -> TaskKinematics {
    let phi = absolute_angles(q);
    let phid = absolute_rates(qdot);
    let pose = forward_kinematics(params, q);
    // Columns of ∂p/∂φ and their time derivatives; J = (∂p/∂φ)·T.
    let mut jp = Matrix2x4::zeros();
    let mut jp_dot = Matrix2x4::zeros();
    for j in 0..3 {
        let col = params.link_lengths[j] * perp(phi[j]);
        let col_dot = -params.link_lengths[j] * phid[j] * dir(phi[j]);
        // q_k moves φ_j for every j ≥ k.
        for k in 0..=j {
            let mut c = jp.column_mut(k);
            c += col;
            let mut c = jp_dot.column_mut(k);
            c += col_dot;
        }
    }
    TaskKinematics {
        p: pose.p,
        theta: pose.theta,
        jp,
        jtheta: Matrix1x4::new(1.0, 1.0, 1.0, 0.0),
        jp_dot,
        jtheta_dot: Matrix1x4::zeros(),
    }
}

/// Inertia in absolute angles, `D_jk = A_jk cos(φ_j − φ_k) + δ_jk I_gj`.
fn absolute_inertia(params: &ModelParams, phi: &[f64; 3]) -> Matrix3<f64> {
    let a = coupling(params);
    Matrix3::from_fn(|j, k| {
        let diag = if j == k { params.link_inertias[j] } else { 0.0 };
        a[(j, k)] * (phi[j] - phi[k]).cos() + diag
    })
}

pub fn mass_matrix(params: &ModelParams, q: &Vector4<f64>) -> Matrix4<f64> {
    let phi = absolute_angles(q);
    let t = angle_map();
    let m_rob = t.transpose() * absolute_inertia(params, &phi) * t;
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&m_rob);
    m[(3, 3)] = params.plank_inertia;
    m
}

/// Gravity, centrifugal/Coriolis and hinge spring-damper terms `h(q, q̇)`.
pub fn bias_vector(params: &ModelParams, state: &State) -> Vector4<f64> {
    let phi = absolute_angles(&state.q);
    let phid = absolute_rates(&state.qdot);
    let a = coupling(params);
    let mut h_phi = Vector3::zeros();
    for j in 0..3 {
        let centrifugal: f64 = (0..3).map(|k| a[(j, k)] * (phi[j] - phi[k]).sin() * phid[k] * phid[k]).sum();
        let static_moment: f64 = (0..3).map(|i| params.link_masses[i] * lever(params, i, j)).sum();
        h_phi[j] = centrifugal + params.gravity * static_moment * phi[j].cos();
    }
    let h_rob = angle_map().transpose() * h_phi;
    Vector4::new(
        h_rob[0],
        h_rob[1],
        h_rob[2],
        params.hinge_stiffness * state.q[3] + params.hinge_damping * state.qdot[3],
    )
}

/// Kinetic energy `½ q̇ᵀ M q̇`.
pub fn kinetic_energy(params: &ModelParams, state: &State) -> f64 {
    0.5 * state.qdot.dot(&(mass_matrix(params, &state.q) * state.qdot))
}

/// Link gravity potential plus the hinge spring.
pub fn potential_energy(params: &ModelParams, q: &Vector4<f64>) -> f64 {
    let phi = absolute_angles(q);
    let gravity: f64 = (0..3)
        .map(|i| {
            let y: f64 = (0..3).map(|j| lever(params, i, j) * phi[j].sin()).sum();
            params.link_masses[i] * params.gravity * y
        })
        .sum();
    gravity + 0.5 * params.hinge_stiffness * q[3] * q[3]
}

pub fn total_energy(params: &ModelParams, state: &State) -> f64 {
    kinetic_energy(params, state) + potential_energy(params, &state.q)
}

/// Free-motion acceleration `M⁻¹ (S τ − h)`.
pub fn free_acceleration(params: &ModelParams, state: &State, tau: &Vector3<f64>) -> Option<Vector4<f64>> {
    let m = mass_matrix(params, &state.q);
    let rhs = actuation_matrix() * tau - bias_vector(params, state);
    m.cholesky().map(|c| c.solve(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Per-body kinetic energy from centre-of-mass velocities, written
    /// directly from link geometry (no mass matrix).
    fn per_body_kinetic(params: &ModelParams, state: &State) -> f64 {
        let q = state.q;
        let qd = state.qdot;
        let mut energy = 0.5 * params.plank_inertia * qd[3] * qd[3];
        let mut joint_vel = Vector2::zeros();
        let mut angle = 0.0;
        let mut rate = 0.0;
        for i in 0..3 {
            angle += q[i];
            rate += qd[i];
            let arm = params.com_fractions[i] * params.link_lengths[i];
            let com_vel = joint_vel + arm * rate * Vector2::new(-angle.sin(), angle.cos());
            energy += 0.5 * params.link_masses[i] * com_vel.norm_squared() + 0.5 * params.link_inertias[i] * rate * rate;
            joint_vel += params.link_lengths[i] * rate * Vector2::new(-angle.sin(), angle.cos());
        }
        energy
    }

    #[test]
    fn straight_arm_along_x() {
        let p = ModelParams::default();
        let pose = forward_kinematics(&p, &Vector4::zeros());
        assert_relative_eq!(pose.p, Vector2::new(0.75, 0.0), epsilon = 1e-15);
        assert_eq!(pose.theta, 0.0);
        let pose = forward_kinematics(&p, &Vector4::new(FRAC_PI_2, 0.0, 0.0, 0.3));
        assert_relative_eq!(pose.p, Vector2::new(0.0, 0.75), epsilon = 1e-15);
        assert_relative_eq!(pose.theta, FRAC_PI_2);
    }

    #[test]
    fn orientation_jacobian_is_constant_and_dots_vanish_at_rest() {
        let p = ModelParams::default();
        let q = Vector4::new(0.3, -1.1, 0.4, 0.2);
        let tk = task_jacobians(&p, &q, &Vector4::zeros());
        assert_eq!(tk.jtheta, Matrix1x4::new(1.0, 1.0, 1.0, 0.0));
        assert_eq!(tk.jp_dot, Matrix2x4::zeros());
        assert_eq!(tk.jtheta_dot, Matrix1x4::zeros());
        assert_eq!(tk.jp.column(3).norm(), 0.0);
    }

    #[test]
    fn actuation_selects_robot_joints() {
        let s = actuation_matrix();
        let v = Vector4::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(s.transpose() * v, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!((s * Vector3::new(5.0, -6.0, 7.0))[3], 0.0);
        assert_eq!(s.rank(1e-12), 3);
    }

    #[test]
    fn plank_block_is_decoupled() {
        let p = ModelParams::default();
        let m = mass_matrix(&p, &Vector4::new(0.7, -0.4, 1.3, -0.2));
        assert_eq!(m[(3, 3)], 4.5);
        for i in 0..3 {
            assert_eq!(m[(3, i)], 0.0);
            assert_eq!(m[(i, 3)], 0.0);
        }
    }

    #[test]
    fn bias_vanishes_without_gravity_and_motion() {
        let p = ModelParams { gravity: 0.0, ..Default::default() };
        let h = bias_vector(&p, &State::at_rest(Vector4::new(0.4, 0.9, -0.3, 0.0)));
        assert_eq!(h, Vector4::zeros());
    }

    fn arb_state() -> impl Strategy<Value = State> {
        (prop::array::uniform4(-3.0..3.0f64), prop::array::uniform4(-3.0..3.0f64))
            .prop_map(|(q, qd)| State::new(Vector4::from(q), Vector4::from(qd)))
    }

    proptest! {
        #[test]
        fn mass_matrix_symmetric_positive_definite(s in arb_state()) {
            let m = mass_matrix(&ModelParams::default(), &s.q);
            prop_assert!((m - m.transpose()).amax() < 1e-14);
            prop_assert!(m.symmetric_eigenvalues().min() > 0.0);
        }

        #[test]
        fn kinetic_energy_matches_per_body_sum(s in arb_state()) {
            let p = ModelParams::default();
            let a = kinetic_energy(&p, &s);
            let b = per_body_kinetic(&p, &s);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn gravity_is_potential_gradient(s in arb_state()) {
            let p = ModelParams { hinge_stiffness: 0.0, ..Default::default() };
            let h = bias_vector(&p, &State::at_rest(s.q));
            let step = 1e-6;
            for i in 0..4 {
                let mut qp = s.q;
                let mut qm = s.q;
                qp[i] += step;
                qm[i] -= step;
                let grad = (potential_energy(&p, &qp) - potential_energy(&p, &qm)) / (2.0 * step);
                prop_assert!((grad - h[i]).abs() <= 1e-6 * (1.0 + grad.abs()));
            }
        }

        #[test]
        fn position_jacobian_matches_finite_differences(s in arb_state()) {
            let p = ModelParams::default();
            let tk = task_jacobians(&p, &s.q, &s.qdot);
            let step = 1e-6;
            for i in 0..4 {
                let mut qp = s.q;
                let mut qm = s.q;
                qp[i] += step;
                qm[i] -= step;
                let fd = (forward_kinematics(&p, &qp).p - forward_kinematics(&p, &qm).p) / (2.0 * step);
                prop_assert!((fd - tk.jp.column(i)).amax() <= 1e-6 * (1.0 + fd.amax()));
            }
        }

        #[test]
        fn jacobian_rate_matches_finite_differences(s in arb_state()) {
            let p = ModelParams::default();
            let tk = task_jacobians(&p, &s.q, &s.qdot);
            let step = 1e-6;
            let plus = task_jacobians(&p, &(s.q + step * s.qdot), &s.qdot).jp;
            let minus = task_jacobians(&p, &(s.q - step * s.qdot), &s.qdot).jp;
            let fd = (plus - minus) / (2.0 * step);
            prop_assert!((fd - tk.jp_dot).amax() <= 1e-6 * (1.0 + fd.amax()));
        }
    }
}
