//! Physical, controller and contact constants of the arm/plank system.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which velocity branch of the exponentially extended Hunt-Crossley law is
/// paired with penetration deepening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContactRateConvention {
    /// `k + d·γ̇` for `γ̇ ≥ 0` and `k·exp(d/k·γ̇)` for `γ̇ < 0`, with `γ̇ < 0`
    /// while the penetration deepens. Compression is then nearly force free
    /// and separation stiff, so the law injects energy.
    Verbatim,
    /// Damping added during compression: the rate is negated before the
    /// branch selection, so deepening uses `k + d·|γ̇|` and restitution the
    /// exponential decay.
    #[default]
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// kg
    pub link_masses: [f64; 3],
    /// Centroidal link inertias, kg·m².
    pub link_inertias: [f64; 3],
    /// Plank inertia about the hinge, kg·m².
    pub plank_inertia: f64,
    /// m
    pub link_lengths: [f64; 3],
    /// Centre-of-mass position along each link from its proximal joint, as a
    /// fraction of the link length.
    pub com_fractions: [f64; 3],
    /// Width of the end-effector contact face; corners at ±w3/2.
    pub ee_face_width: f64,
    pub plank_thickness: f64,
    /// Hinge position relative to the robot base, m.
    pub hinge_offset: [f64; 2],
    /// Torsional hinge spring, N·m/rad.
    pub hinge_stiffness: f64,
    /// Torsional hinge damper, N·m·s/rad.
    pub hinge_damping: f64,
    /// Acts along −y of the base frame, m/s².
    pub gravity: f64,
    /// (k_p, k_θ), 1/s.
    pub task_gains: [f64; 2],
    /// (w_p, w_θ, w_λ).
    pub task_weights: [f64; 3],
    pub joint_stiffness: [f64; 3],
    pub joint_damping: [f64; 3],
    pub motor_inertia: [f64; 3],
    pub desired_motor_inertia: [f64; 3],
    pub contact_exponent: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub contact_rate_convention: ContactRateConvention,
}

impl Default for ModelParams {
    fn default() -> Self {
        let motor_inertia = [0.24, 0.24, 0.08];
        ModelParams {
            link_masses: [8.0, 8.0, 4.0],
            link_inertias: [0.03, 0.03, 0.005],
            plank_inertia: 4.5,
            link_lengths: [0.3, 0.3, 0.15],
            com_fractions: [0.5, 0.5, 1.0],
            ee_face_width: 0.15,
            plank_thickness: 0.04,
            hinge_offset: [0.1, 0.35],
            hinge_stiffness: 40.0,
            hinge_damping: 40.0,
            gravity: 9.81,
            task_gains: [20.0, 20.0],
            task_weights: [1.0, 1.0, 1.0],
            joint_stiffness: [30e3, 30e3, 15e3],
            joint_damping: [10.0, 10.0, 5.0],
            motor_inertia,
            desired_motor_inertia: motor_inertia.map(|b| 0.05 * b),
            contact_exponent: 1.5,
            contact_stiffness: 3.2e8,
            contact_damping: 3.2e11,
            contact_rate_convention: ContactRateConvention::Conventional,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, &[f64]); 14] = [
            ("link_masses", &self.link_masses),
            ("link_inertias", &self.link_inertias),
            ("plank_inertia", std::slice::from_ref(&self.plank_inertia)),
            ("link_lengths", &self.link_lengths),
            ("ee_face_width", std::slice::from_ref(&self.ee_face_width)),
            ("plank_thickness", std::slice::from_ref(&self.plank_thickness)),
            ("task_gains", &self.task_gains),
            ("task_weights", &self.task_weights),
            ("joint_stiffness", &self.joint_stiffness),
            ("joint_damping", &self.joint_damping),
            ("motor_inertia", &self.motor_inertia),
            ("desired_motor_inertia", &self.desired_motor_inertia),
            ("contact_exponent", std::slice::from_ref(&self.contact_exponent)),
            ("contact_stiffness", std::slice::from_ref(&self.contact_stiffness)),
        ];
        for (name, values) in positive {
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidParams(format!("{name} must be strictly positive")));
            }
        }
        let nonneg = [
            ("hinge_stiffness", self.hinge_stiffness),
            ("hinge_damping", self.hinge_damping),
            ("contact_damping", self.contact_damping),
            ("gravity", self.gravity),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be finite and non-negative")));
            }
        }
        if self.com_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidParams("com_fractions must lie in [0, 1]".into()));
        }
        if self.hinge_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("hinge_offset must be finite".into()));
        }
        Ok(())
    }

    pub fn hinge(&self) -> Vector2<f64> {
        Vector2::new(self.hinge_offset[0], self.hinge_offset[1])
    }

    pub fn kp(&self) -> f64 {
        self.task_gains[0]
    }

    pub fn ktheta(&self) -> f64 {
        self.task_gains[1]
    }

    pub fn stiffness_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.joint_stiffness))
    }

    pub fn damping_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.joint_damping))
    }

    pub fn motor_inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.motor_inertia))
    }

    pub fn desired_motor_inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.desired_motor_inertia))
    }
}

/// Generalized positions and velocities: three arm joints then the plank hinge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub q: Vector4<f64>,
    pub qdot: Vector4<f64>,
}

impl State {
    pub fn new(q: Vector4<f64>, qdot: Vector4<f64>) -> Self {
        State { q, qdot }
    }

    pub fn at_rest(q: Vector4<f64>) -> Self {
        State { q, qdot: Vector4::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteState)
        }
    }

    pub fn q_rob(&self) -> Vector3<f64> {
        self.q.fixed_rows::<3>(0).into_owned()
    }

    pub fn qdot_rob(&self) -> Vector3<f64> {
        self.qdot.fixed_rows::<3>(0).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let p = ModelParams::default();
        p.validate().unwrap();
        assert_eq!(p.desired_motor_inertia, [0.012, 0.012, 0.004]);
    }

    #[test]
    fn rejects_nonpositive_mass() {
        let p = ModelParams { link_masses: [8.0, 0.0, 4.0], ..Default::default() };
        assert!(matches!(p.validate(), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn partial_toml_overrides_keep_defaults() {
        let p: ModelParams = toml::from_str("gravity = 0.0\ntask_gains = [10.0, 5.0]").unwrap();
        assert_eq!(p.gravity, 0.0);
        assert_eq!(p.kp(), 10.0);
        assert_eq!(p.plank_inertia, 4.5);
    }
}
