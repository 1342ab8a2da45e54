//! Closed-loop simulation of the controllers on two plant models.
//!
//! The rigid model integrates smooth motion and applies the impact map at
//! located gap crossings. The flexible model adds series-elastic joints and a
//! compliant contact law, which needs micro-second steps near contact.

mod flex;
mod log;
mod rigid;

pub use flex::{contact_forces, flex_dynamics, low_level_torque, run_flex, FlexDerivative, FlexState};
pub use log::{EventKind, FlexColumns, ModelKind, Sample, SimEvent, SimLog, EVENT_COLUMNS, FLEX_COLUMNS, RIGID_COLUMNS};
pub use rigid::{constrained_acceleration, detect_event, run_rigid, step_constrained, step_free, DetectedEvent};

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControllerConfig;
use crate::error::{Error, Result};
use crate::params::{ModelParams, State};
use crate::reference::{initial_configuration, ReferenceBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Rigid integrator step, and the flexible step away from contact, s.
    pub step: f64,
    /// Flexible step while any gap is within `contact_margin`, s.
    pub fine_step: f64,
    pub contact_margin: f64,
    /// Gap tolerance of event localization, m.
    pub event_tolerance: f64,
    /// True plank angle at t = 0 minus the nominal angle, rad.
    pub plank_offset: f64,
    /// Half-width of a uniform random perturbation added to the offset.
    pub offset_jitter: f64,
    pub seed: u64,
    pub controller: ControllerConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            step: 1e-4,
            fine_step: 1e-6,
            contact_margin: 1e-3,
            event_tolerance: 1e-9,
            plank_offset: 0.05,
            offset_jitter: 0.0,
            seed: 0,
            controller: ControllerConfig::default(),
        }
    }
}

/// Number of `small` steps in `big`, if it is (nearly) an integer.
fn ratio(big: f64, small: f64) -> Option<u64> {
    let r = big / small;
    let n = r.round();
    ((r - n).abs() <= 1e-6 && n >= 1.0).then_some(n as u64)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        if !(self.step > 0.0 && self.fine_step > 0.0 && self.event_tolerance > 0.0 && self.contact_margin >= 0.0) {
            return Err(Error::InvalidConfig("step sizes and tolerances must be positive".into()));
        }
        if ratio(self.controller.dt, self.step).is_none() || ratio(self.step, self.fine_step).is_none() {
            return Err(Error::InvalidConfig("control period, step and fine_step must be integer multiples".into()));
        }
        if !(self.plank_offset.is_finite() && self.offset_jitter >= 0.0) {
            return Err(Error::InvalidConfig("plank offset must be finite and jitter non-negative".into()));
        }
        Ok(())
    }

    /// Offset actually applied: the configured one plus seeded jitter.
    pub fn effective_offset(&self) -> f64 {
        if self.offset_jitter == 0.0 {
            return self.plank_offset;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.plank_offset + rng.random_range(-self.offset_jitter..=self.offset_jitter)
    }
}

/// Arm at rest on the start of the ante-impact reference; plank at its
/// nominal angle plus `offset`, moving at the nominal rate.
pub fn initial_state(params: &ModelParams, refs: &ReferenceBundle, offset: f64) -> Result<State> {
    let q = initial_configuration(params, &refs.start_pose, refs.plank_nominal.angle + offset)?;
    Ok(State::new(q, Vector4::new(0.0, 0.0, 0.0, refs.plank_nominal.rate)))
}
