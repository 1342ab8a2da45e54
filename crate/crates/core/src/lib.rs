//! Reference-spreading QP control of a planar three-link arm making nominally
//! simultaneous contact with a hinged plank, together with the rigid
//! (impact-map) and flexible-joint (compliant contact) simulators used to
//! compare it against classical tracking controllers.

// `!(x <= bound)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contact;
pub mod control;
pub mod error;
pub mod experiment;
pub mod mechanics;
pub mod metrics;
pub mod numfmt;
pub mod params;
pub mod qp;
pub mod reference;
pub mod sim;

pub use contact::{ActiveSet, ContactGeometry, ImpactResult};
pub use control::{ControlLaw, ControlMode, ControlOutput, ContactObservation, Controller, ControllerConfig, Strategy};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentReport, ExperimentSpec, RunReport};
pub use mechanics::{Pose, TaskKinematics};
pub use metrics::{ComplementarityAudit, DecayFit, LogAudit, RunMetrics};
pub use params::{ContactRateConvention, ModelParams, State};
pub use qp::{QpError, QpProblem, QpSolution, QpSolver};
pub use reference::{PlankState, ReferenceBundle, ReferenceSpec};
pub use sim::{ModelKind, SimConfig, SimLog};
