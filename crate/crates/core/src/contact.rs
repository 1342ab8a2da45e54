//! Contact geometry between the end-effector face and the plank, the rigid
//! inelastic impact map, and the compliant Hunt-Crossley force law.
//!
//! Contact corner i sits at `p + s_i·(w3/2)·(cos θ, sin θ)` with `s = (−1, +1)`.
//! The plank's top surface passes `w4/2` above the hinge line with outward
//! normal `n4 = (−sin q4, cos q4)`, so `γ_i = n4·(p_ci − hinge) − w4/2`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::mechanics::{dir, mass_matrix, perp, task_jacobians, Matrix2x4};
use crate::params::{ContactRateConvention, ModelParams, State};

pub const CORNER_SIGNS: [f64; 2] = [-1.0, 1.0];

/// Delassus matrices with a larger condition number are rejected.
pub const MAX_DELASSUS_CONDITION: f64 = 1e12;

/// Subset of the two contacts, stored as a bit mask (bit 0 = contact 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ActiveSet(u8);

impl ActiveSet {
    pub const EMPTY: ActiveSet = ActiveSet(0);
    pub const BOTH: ActiveSet = ActiveSet(0b11);

    /// Contact indices are zero-based internally.
    pub fn single(i: usize) -> Self {
        assert!(i < 2, "contact index out of range");
        ActiveSet(1 << i)
    }

    pub fn from_bits(bits: u8) -> Self {
        ActiveSet(bits & 0b11)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn insert(&mut self, i: usize) {
        self.0 |= 1 << i;
    }

    pub fn remove(&mut self, i: usize) {
        self.0 &= !(1 << i);
    }

    pub fn union(self, other: ActiveSet) -> ActiveSet {
        ActiveSet(self.0 | other.0)
    }

    /// Contacts in `self` but not in `other`.
    pub fn difference(self, other: ActiveSet) -> ActiveSet {
        ActiveSet(self.0 & !other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..2).filter(move |&i| self.contains(i))
    }
}

impl fmt::Display for ActiveSet {
    /// One-based indices joined by `|`, or `-` when empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let parts: Vec<String> = self.iter().map(|i| (i + 1).to_string()).collect();
        f.write_str(&parts.join("|"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGeometry {
    pub gaps: Vector2<f64>,
    pub jn: Matrix2x4,
    pub jn_dot: Matrix2x4,
    pub points: [Vector2<f64>; 2],
}

impl ContactGeometry {
    /// Normal gap rates `J_N q̇`.
    pub fn rates(&self, qdot: &Vector4<f64>) -> Vector2<f64> {
        self.jn * qdot
    }
}

pub fn contact_geometry(params: &ModelParams, state: &State) -> ContactGeometry {
    let tk = task_jacobians(params, &state.q, &state.qdot);
    let q4 = state.q[3];
    let q4dot = state.qdot[3];
    let theta = tk.theta;
    let theta_dot = (tk.jtheta * state.qdot)[0];
    let n4 = perp(q4);
    let t4 = dir(q4);
    let hinge = params.hinge();
    let half = 0.5 * params.ee_face_width;

    let mut gaps = Vector2::zeros();
    let mut jn = Matrix2x4::zeros();
    let mut jn_dot = Matrix2x4::zeros();
    let mut points = [Vector2::zeros(); 2];
    for (i, s) in CORNER_SIGNS.iter().enumerate() {
        let pc = tk.p + s * half * dir(theta);
        let rel = pc - hinge;
        points[i] = pc;
        gaps[i] = n4.dot(&rel) - 0.5 * params.plank_thickness;

        // Corner Jacobian on the robot joints and its rate.
        let mut jc = tk.jp.fixed_view::<2, 3>(0, 0).into_owned();
        let mut jc_dot = tk.jp_dot.fixed_view::<2, 3>(0, 0).into_owned();
        let face = s * half * perp(theta);
        let face_dot = -s * half * theta_dot * dir(theta);
        for k in 0..3 {
            let mut c = jc.column_mut(k);
            c += face;
            let mut c = jc_dot.column_mut(k);
            c += face_dot;
        }
        let qdot_rob = state.qdot.fixed_rows::<3>(0);
        let corner_vel = jc * qdot_rob;

        let row_rob = n4.transpose() * jc;
        let row_rob_dot = -q4dot * t4.transpose() * jc + n4.transpose() * jc_dot;
        for k in 0..3 {
            jn[(i, k)] = row_rob[k];
            jn_dot[(i, k)] = row_rob_dot[k];
        }
        jn[(i, 3)] = -t4.dot(&rel);
        jn_dot[(i, 3)] = -q4dot * n4.dot(&rel) - t4.dot(&corner_vel);
    }
    ContactGeometry { gaps, jn, jn_dot, points }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactResult {
    pub qdot_post: Vector4<f64>,
    /// Impulse per contact; zero for contacts outside the active set.
    pub impulse: Vector2<f64>,
    pub energy_loss: f64,
}

pub(crate) fn stacked_rows(jn: &Matrix2x4, active: ActiveSet) -> DMatrix<f64> {
    let rows: Vec<usize> = active.iter().collect();
    DMatrix::from_fn(rows.len(), 4, |r, c| jn[(rows[r], c)])
}

/// Inelastic impact map restricted to the contacts in `active`:
/// `q̇⁺ = (I − M⁻¹Jᵀ(J M⁻¹ Jᵀ)⁻¹J) q̇⁻`.
pub fn impact_map(params: &ModelParams, state: &State, active: ActiveSet) -> Result<ImpactResult> {
    state.check_finite()?;
    if active.is_empty() {
        return Err(Error::SingularImpactGeometry { condition: f64::INFINITY });
    }
    let geom = contact_geometry(params, state);
    let m = mass_matrix(params, &state.q);
    let chol = m.cholesky().ok_or(Error::NonFiniteState)?;
    let j = stacked_rows(&geom.jn, active);
    let minv_jt = DMatrix::from_fn(4, j.nrows(), |r, c| {
        let col = chol.solve(&Vector4::from_iterator(j.row(c).iter().copied()));
        col[r]
    });
    let delassus = &j * &minv_jt;
    let eig = delassus.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_DELASSUS_CONDITION) {
        return Err(Error::SingularImpactGeometry { condition });
    }
    let qdot_minus = DVector::from_column_slice(state.qdot.as_slice());
    let rate = &j * &qdot_minus;
    let lambda = -delassus
        .cholesky()
        .ok_or(Error::SingularImpactGeometry { condition })?
        .solve(&rate);
    let dq = &minv_jt * &lambda;
    let qdot_post = state.qdot + Vector4::from_column_slice(dq.as_slice());
    let mut impulse = Vector2::zeros();
    for (r, i) in active.iter().enumerate() {
        impulse[i] = lambda[r];
    }
    let before = 0.5 * state.qdot.dot(&(m * state.qdot));
    let after = 0.5 * qdot_post.dot(&(m * qdot_post));
    Ok(ImpactResult { qdot_post, impulse, energy_loss: before - after })
}

/// Exponentially extended Hunt-Crossley normal force.
///
/// Uses `|γ|^c` since the gap is non-positive wherever the force acts.
pub fn hunt_crossley_force(params: &ModelParams, gap: f64, gap_rate: f64) -> f64 {
    if gap > 0.0 {
        return 0.0;
    }
    let rate = match params.contact_rate_convention {
        ContactRateConvention::Verbatim => gap_rate,
        ContactRateConvention::Conventional => -gap_rate,
    };
    let k = params.contact_stiffness;
    let d = params.contact_damping;
    let stiffness = if rate >= 0.0 { k + d * rate } else { k * (d / k * rate).exp() };
    (stiffness * gap.abs().powf(params.contact_exponent)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanics::forward_kinematics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Configuration with the face flush on the plank surface, found by
    /// closed-form IK on the wrist point.
    fn flush_state(params: &ModelParams, q4: f64) -> State {
        let hinge = params.hinge();
        let p = hinge + 0.3 * dir(q4) + 0.5 * params.plank_thickness * perp(q4);
        let wrist = p - params.link_lengths[2] * dir(q4);
        let (l1, l2) = (params.link_lengths[0], params.link_lengths[1]);
        let c2 = (wrist.norm_squared() - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        let q2 = -c2.acos();
        let q1 = wrist.y.atan2(wrist.x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        let q = Vector4::new(q1, q2, q4 - q1 - q2, q4);
        State::at_rest(q)
    }

    #[test]
    fn flush_face_closes_both_gaps() {
        let p = ModelParams::default();
        for q4 in [-0.1, 0.0, 0.07] {
            let s = flush_state(&p, q4);
            let g = contact_geometry(&p, &s);
            assert!(g.gaps.amax() < 1e-14, "{:?}", g.gaps);
            assert_relative_eq!(forward_kinematics(&p, &s.q).theta, q4, epsilon = 1e-14);
            assert_eq!(g.jn.rank(1e-9), 2);
        }
    }

    #[test]
    fn lowering_the_plank_opens_both_gaps() {
        let p = ModelParams::default();
        let mut s = flush_state(&p, 0.0);
        s.q[3] -= 0.05;
        let g = contact_geometry(&p, &s);
        assert!(g.gaps[0] > 0.0 && g.gaps[1] > 0.0);
    }

    #[test]
    fn consistent_velocity_is_left_unchanged() {
        let p = ModelParams::default();
        let mut s = flush_state(&p, 0.0);
        // Project an arbitrary velocity onto the kernel of J_N.
        let g = contact_geometry(&p, &s);
        let v = Vector4::new(0.3, -0.7, 0.2, 0.5);
        let jjt = g.jn * g.jn.transpose();
        s.qdot = v - g.jn.transpose() * jjt.try_inverse().unwrap() * (g.jn * v);
        assert!((g.jn * s.qdot).amax() < 1e-12);
        let r = impact_map(&p, &s, ActiveSet::BOTH).unwrap();
        assert!((r.qdot_post - s.qdot).amax() < 1e-12);
        assert!(r.impulse.amax() < 1e-10);
    }

    #[test]
    fn empty_active_set_is_rejected() {
        let p = ModelParams::default();
        let s = flush_state(&p, 0.0);
        assert!(matches!(impact_map(&p, &s, ActiveSet::EMPTY), Err(Error::SingularImpactGeometry { .. })));
    }

    #[test]
    fn verbatim_hunt_crossley_values() {
        let p = ModelParams { contact_rate_convention: ContactRateConvention::Verbatim, ..Default::default() };
        assert_eq!(hunt_crossley_force(&p, 1e-3, -5.0), 0.0);
        assert_relative_eq!(hunt_crossley_force(&p, -1e-6, 0.0), 0.32, max_relative = 1e-12);
        let fast = hunt_crossley_force(&p, -1e-6, -1.0);
        assert!((0.0..1e-300).contains(&fast));
        // Both branches meet at k_env when the rate is zero.
        let left = hunt_crossley_force(&p, -1e-5, -1e-15);
        let right = hunt_crossley_force(&p, -1e-5, 0.0);
        assert_relative_eq!(left, right, max_relative = 1e-9);
    }

    #[test]
    fn conventional_pairing_damps_compression() {
        let p = ModelParams { contact_rate_convention: ContactRateConvention::Conventional, ..Default::default() };
        let k = p.contact_stiffness;
        let d = p.contact_damping;
        let f = hunt_crossley_force(&p, -1e-6, -0.01);
        assert_relative_eq!(f, (k + d * 0.01) * 1e-9, max_relative = 1e-12);
        let f = hunt_crossley_force(&p, -1e-6, 0.01);
        assert_relative_eq!(f, k * (-d / k * 0.01).exp() * 1e-9, max_relative = 1e-12);
    }

    #[test]
    fn active_set_display() {
        assert_eq!(ActiveSet::EMPTY.to_string(), "-");
        assert_eq!(ActiveSet::single(1).to_string(), "2");
        assert_eq!(ActiveSet::BOTH.to_string(), "1|2");
        assert_eq!(ActiveSet::BOTH.len(), 2);
    }

    fn arb_state() -> impl Strategy<Value = State> {
        (prop::array::uniform4(-2.0..2.0f64), prop::array::uniform4(-2.0..2.0f64))
            .prop_map(|(q, qd)| State::new(Vector4::from(q), Vector4::from(qd)))
    }

    proptest! {
        #[test]
        fn normal_jacobian_matches_finite_differences(s in arb_state()) {
            let p = ModelParams::default();
            let g = contact_geometry(&p, &s);
            let h = 1e-6;
            for i in 0..4 {
                let mut sp = s;
                let mut sm = s;
                sp.q[i] += h;
                sm.q[i] -= h;
                let fd = (contact_geometry(&p, &sp).gaps - contact_geometry(&p, &sm).gaps) / (2.0 * h);
                prop_assert!((fd - g.jn.column(i)).amax() <= 1e-6 * (1.0 + fd.amax()));
            }
            let plus = contact_geometry(&p, &State::new(s.q + h * s.qdot, s.qdot)).jn;
            let minus = contact_geometry(&p, &State::new(s.q - h * s.qdot, s.qdot)).jn;
            let fd = (plus - minus) / (2.0 * h);
            prop_assert!((fd - g.jn_dot).amax() <= 1e-6 * (1.0 + fd.amax()));
        }

        #[test]
        fn impact_map_is_an_energy_reducing_projection(s in arb_state(), bits in 1u8..4) {
            let p = ModelParams::default();
            let active = ActiveSet::from_bits(bits);
            if let Ok(r) = impact_map(&p, &s, active) {
                let g = contact_geometry(&p, &s);
                let rates = g.jn * r.qdot_post;
                for i in active.iter() {
                    prop_assert!(rates[i].abs() <= 1e-10 * (1.0 + s.qdot.amax()));
                }
                prop_assert!(r.energy_loss >= -1e-10 * (1.0 + r.energy_loss.abs()));
                let again = impact_map(&p, &State::new(s.q, r.qdot_post), active).unwrap();
                prop_assert!((again.qdot_post - r.qdot_post).amax() <= 1e-10 * (1.0 + r.qdot_post.amax()));
            }
        }

        #[test]
        fn hunt_crossley_never_negative(gap in -1e-3..1e-3f64, rate in -5.0..5.0f64) {
            for conv in [ContactRateConvention::Verbatim, ContactRateConvention::Conventional] {
                let p = ModelParams { contact_rate_convention: conv, ..Default::default() };
                let f = hunt_crossley_force(&p, gap, rate);
                prop_assert!(f >= 0.0 && f.is_finite());
                if gap > 0.0 { prop_assert_eq!(f, 0.0); }
            }
        }
    }
}
