use thiserror::Error;

use crate::qp::QpError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("state contains non-finite entries")]
    NonFiniteState,
    #[error("contact events accumulate without time advancing at t = {t:.6}")]
    EventAccumulation { t: f64 },
    #[error("constrained dynamics system is singular")]
    SingularConstraintSystem,
    #[error("impact geometry is singular (Delassus condition number {condition:.3e})")]
    SingularImpactGeometry { condition: f64 },
    #[error("target pose is outside the arm workspace")]
    Unreachable,
    #[error("inverse kinematics is near a singularity (condition number {condition:.3e})")]
    NearSingular { condition: f64 },
    #[error("task Jacobian [Jp; Jtheta] is singular")]
    SingularTaskJacobian,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("CSV schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("QP failure at t = {t:.6}: {source}")]
    Qp { t: f64, source: QpError },
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
