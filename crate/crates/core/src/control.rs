//! Task-space QP controllers for the three impact phases, the mode
//! supervisor and the two baseline switching strategies.
//!
//! Each QP has the decision vector `x = (q̈, τ)` or `x = (q̈, τ, λ)` and a cost
//! `Σ w ‖J q̈ + η‖²` where `η` collects the drift term, the reference
//! feedforward and PD feedback, so that a zero residual means the task
//! acceleration equals the critically damped target.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::contact::{contact_geometry, ActiveSet};
use crate::error::{Error, Result};
use crate::mechanics::{actuation_matrix, bias_vector, mass_matrix, task_jacobians, Matrix1x4, Matrix2x4};
use crate::params::{ModelParams, State};
use crate::qp::{QpProblem, QpSolution, QpSolver};
use crate::reference::{inverse_velocity, ReferenceBundle, ScalarSample, TaskSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Ante,
    Intermediate,
    Post,
}

impl ControlMode {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(ControlMode::Ante),
            1 => Some(ControlMode::Intermediate),
            2 => Some(ControlMode::Post),
            _ => None,
        }
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlMode::Ante => "ante",
            ControlMode::Intermediate => "intermediate",
            ControlMode::Post => "post",
        })
    }
}

/// Switching strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Reference spreading with the velocity-blind intermediate mode.
    #[serde(rename = "rs_intermediate")]
    RsIntermediate,
    /// Reference spreading that jumps to the post-impact QP at the first impact.
    #[serde(rename = "rs_no_intermediate")]
    RsNoIntermediate,
    /// Time-based switch at the nominal impact time.
    #[serde(rename = "no_rs")]
    NoRs,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RsIntermediate, Strategy::RsNoIntermediate, Strategy::NoRs];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RsIntermediate => "rs_intermediate",
            Strategy::RsNoIntermediate => "rs_no_intermediate",
            Strategy::NoRs => "no_rs",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub strategy: Strategy,
    /// Control period, s.
    pub dt: f64,
    /// Contact-settling threshold on |γ̇|, m/s.
    pub epsilon: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { strategy: Strategy::RsIntermediate, dt: 1e-3, epsilon: 0.01 }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig("controller dt must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("controller epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Which QP produced an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlLaw {
    Ante,
    Intermediate,
    Post,
    /// Post-impact position tracking without contact constraints.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpDiagnostics {
    /// Full task cost including the constant part.
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub regularization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub tau_star: Vector3<f64>,
    pub qddot_star: Vector4<f64>,
    /// Zero outside the post-impact QP.
    pub lambda_star: Vector2<f64>,
    pub mode: ControlMode,
    pub law: ControlLaw,
    pub diagnostics: QpDiagnostics,
}

/// Per-contact gap and gap rate seen by the supervisor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactObservation {
    pub gaps: Vector2<f64>,
    pub rates: Vector2<f64>,
}

impl ContactObservation {
    pub fn from_state(params: &ModelParams, state: &State) -> Self {
        let g = contact_geometry(params, state);
        ContactObservation { gaps: g.gaps, rates: g.rates(&state.qdot) }
    }

    /// Idealized observation of a rigid simulation: active contacts are
    /// exactly closed and at rest, the rest report their true gap.
    pub fn from_active_set(params: &ModelParams, state: &State, active: ActiveSet) -> Self {
        let mut obs = Self::from_state(params, state);
        for i in active.iter() {
            obs.gaps[i] = 0.0;
            obs.rates[i] = 0.0;
        }
        obs
    }

    pub fn any_closed(&self) -> bool {
        self.gaps.iter().any(|g| *g <= 0.0)
    }

    pub fn full_contact(&self, epsilon: f64) -> bool {
        self.gaps.iter().zip(self.rates.iter()).all(|(g, r)| *g <= 0.0 && r.abs() <= epsilon)
    }
}

/// Contact-driven mode transition. The result never precedes
/// `previous`. Under [`Strategy::NoRs`] contact is ignored and the mode is
/// left unchanged; its time rule lives in [`Controller::observe`].
pub fn supervise(config: &ControllerConfig, previous: ControlMode, obs: &ContactObservation) -> ControlMode {
    let mut mode = previous;
    match config.strategy {
        Strategy::RsIntermediate => {
            if mode == ControlMode::Ante && obs.any_closed() {
                mode = ControlMode::Intermediate;
            }
            if mode == ControlMode::Intermediate && obs.full_contact(config.epsilon) {
                mode = ControlMode::Post;
            }
        }
        Strategy::RsNoIntermediate => {
            if mode == ControlMode::Ante && obs.any_closed() {
                mode = ControlMode::Post;
            }
        }
        Strategy::NoRs => {}
    }
    mode
}

struct Task<'a, const R: usize> {
    jacobian: &'a nalgebra::SMatrix<f64, R, 4>,
    eta: nalgebra::SVector<f64, R>,
    weight: f64,
}

/// `η = J̇ q̇ − ẍ_d − k_v (ẋ_d − ẋ) − k_p² (x_d − x)` for a position task.
fn position_eta(jp_dot_qdot: Vector2<f64>, p: Vector2<f64>, p_rate: Vector2<f64>, r: &TaskSample, kp: f64, velocity_feedback: bool) -> Vector2<f64> {
    let mut eta = jp_dot_qdot - r.a - kp * kp * (r.p - p);
    if velocity_feedback {
        eta -= 2.0 * kp * (r.v - p_rate);
    }
    eta
}

fn orientation_eta(jt_dot_qdot: f64, theta: f64, theta_rate: f64, r: &ScalarSample, k: f64, velocity_feedback: bool) -> f64 {
    let mut eta = jt_dot_qdot - r.accel - k * k * (r.value - theta);
    if velocity_feedback {
        eta -= 2.0 * k * (r.rate - theta_rate);
    }
    eta
}

/// Adds `w ‖J q̈ + η‖²` to `(H, f)` and returns the constant `w ‖η‖²`.
fn add_task<const R: usize>(h: &mut DMatrix<f64>, f: &mut DVector<f64>, task: Task<'_, R>) -> f64 {
    let j = task.jacobian;
    let jtj = j.transpose() * j;
    let jte = j.transpose() * task.eta;
    for r in 0..4 {
        f[r] += 2.0 * task.weight * jte[r];
        for c in 0..4 {
            h[(r, c)] += 2.0 * task.weight * jtj[(r, c)];
        }
    }
    task.weight * task.eta.norm_squared()
}

/// Equality block `M q̈ − S τ = −h` on the first seven columns.
fn dynamics_rows(params: &ModelParams, state: &State, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let m = mass_matrix(params, &state.q);
    let s = actuation_matrix();
    let h = bias_vector(params, state);
    let mut a = DMatrix::zeros(4, n);
    a.view_mut((0, 0), (4, 4)).copy_from(&m);
    a.view_mut((0, 4), (4, 3)).copy_from(&(-s));
    (a, DVector::from_iterator(4, (-h).iter().copied()))
}

fn finish(problem: &QpProblem, sol: QpSolution, constant: f64, mode: ControlMode, law: ControlLaw) -> ControlOutput {
    let x = &sol.x;
    let lambda_star = if x.len() == 9 { Vector2::new(x[7], x[8]) } else { Vector2::zeros() };
    debug_assert_eq!(problem.dim(), x.len());
    ControlOutput {
        tau_star: Vector3::new(x[4], x[5], x[6]),
        qddot_star: Vector4::new(x[0], x[1], x[2], x[3]),
        lambda_star,
        mode,
        law,
        diagnostics: QpDiagnostics {
            cost: (sol.objective + constant).max(0.0),
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            regularization: sol.regularization,
        },
    }
}

fn solve_with(solver: &mut QpSolver, problem: &QpProblem, t: f64) -> Result<QpSolution> {
    solver.solve(problem).map_err(|source| Error::Qp { t, source })
}

/// Position and orientation tracking problem on `(q̈, τ)`, with the drift,
/// feedback and dynamics evaluated at `state`.
fn tracking_problem(
    params: &ModelParams,
    state: &State,
    position: &TaskSample,
    orientation: &ScalarSample,
    velocity_feedback: bool,
) -> (QpProblem, f64) {
    let tk = task_jacobians(params, &state.q, &state.qdot);
    let [wp, wt, _] = params.task_weights;
    let eta_p = position_eta(tk.jp_dot * state.qdot, tk.p, tk.jp * state.qdot, position, params.kp(), velocity_feedback);
    let eta_t = orientation_eta(
        (tk.jtheta_dot * state.qdot)[0],
        tk.theta,
        (tk.jtheta * state.qdot)[0],
        orientation,
        params.ktheta(),
        velocity_feedback,
    );
    let mut h = DMatrix::zeros(7, 7);
    let mut f = DVector::zeros(7);
    let jp: Matrix2x4 = tk.jp;
    let jt: Matrix1x4 = tk.jtheta;
    let mut constant = add_task(&mut h, &mut f, Task { jacobian: &jp, eta: eta_p, weight: wp });
    constant += add_task(&mut h, &mut f, Task { jacobian: &jt, eta: nalgebra::Vector1::new(eta_t), weight: wt });
    let (a_eq, b_eq) = dynamics_rows(params, state, 7);
    (QpProblem::new(h, f).with_equalities(a_eq, b_eq), constant)
}

fn ante_with(solver: &mut QpSolver, params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    state.check_finite()?;
    let (problem, constant) = tracking_problem(params, state, &refs.ante_position(t), &refs.ante_orientation(t), true);
    let sol = solve_with(solver, &problem, t)?;
    Ok(finish(&problem, sol, constant, ControlMode::Ante, ControlLaw::Ante))
}

/// Joint velocities consistent with the ante-impact reference at `q`:
/// robot rates by inverse velocity kinematics, plank rate from the nominal
/// plank motion.
pub fn intermediate_velocity(params: &ModelParams, q: &Vector4<f64>, refs: &ReferenceBundle, t: f64) -> Result<Vector4<f64>> {
    let p = refs.ante_position(t);
    let o = refs.ante_orientation(t);
    let rob = inverse_velocity(params, q, &p.v, o.rate)?;
    Ok(Vector4::new(rob[0], rob[1], rob[2], refs.plank_nominal.rate))
}

fn intermediate_with(solver: &mut QpSolver, params: &ModelParams, q: &Vector4<f64>, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    let qdot = intermediate_velocity(params, q, refs, t)?;
    let state = State::new(*q, qdot);
    state.check_finite()?;
    let (problem, constant) = tracking_problem(params, &state, &refs.ante_position(t), &refs.ante_orientation(t), false);
    let sol = solve_with(solver, &problem, t)?;
    Ok(finish(&problem, sol, constant, ControlMode::Intermediate, ControlLaw::Intermediate))
}

fn post_with(solver: &mut QpSolver, params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    state.check_finite()?;
    let tk = task_jacobians(params, &state.q, &state.qdot);
    let geom = contact_geometry(params, state);
    let [wp, _, wl] = params.task_weights;
    let eta_p = position_eta(tk.jp_dot * state.qdot, tk.p, tk.jp * state.qdot, &refs.post_position(t), params.kp(), true);

    let mut h = DMatrix::zeros(9, 9);
    let mut f = DVector::zeros(9);
    let constant = add_task(&mut h, &mut f, Task { jacobian: &tk.jp, eta: eta_p, weight: wp });
    // Equal force distribution: w_λ (λ1 − λ2)².
    let spread = 2.0 * wl * Matrix2::new(1.0, -1.0, -1.0, 1.0);
    h.view_mut((7, 7), (2, 2)).copy_from(&spread);

    let (dyn_a, dyn_b) = dynamics_rows(params, state, 9);
    let mut a_eq = DMatrix::zeros(6, 9);
    let mut b_eq = DVector::zeros(6);
    a_eq.view_mut((0, 0), (4, 9)).copy_from(&dyn_a);
    a_eq.view_mut((0, 7), (4, 2)).copy_from(&(-geom.jn.transpose()));
    b_eq.rows_mut(0, 4).copy_from(&dyn_b);
    a_eq.view_mut((4, 0), (2, 4)).copy_from(&geom.jn);
    let drift = geom.jn_dot * state.qdot;
    b_eq[4] = -drift[0];
    b_eq[5] = -drift[1];

    let mut a_ineq = DMatrix::zeros(2, 9);
    a_ineq[(0, 7)] = 1.0;
    a_ineq[(1, 8)] = 1.0;
    let problem = QpProblem::new(h, f).with_equalities(a_eq, b_eq).with_inequalities(a_ineq, DVector::zeros(2));
    let sol = solve_with(solver, &problem, t)?;
    Ok(finish(&problem, sol, constant, ControlMode::Post, ControlLaw::Post))
}

fn fallback_with(solver: &mut QpSolver, params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    state.check_finite()?;
    let (problem, constant) = tracking_problem(params, state, &refs.post_position(t), &refs.ante_orientation(t), true);
    let sol = solve_with(solver, &problem, t)?;
    Ok(finish(&problem, sol, constant, ControlMode::Post, ControlLaw::Fallback))
}

/// Ante-impact QP: track the extended ante-impact position and orientation.
pub fn ante_qp(params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    ante_with(&mut QpSolver::new(), params, state, refs, t)
}

/// Intermediate QP. Reads only joint positions; velocities come from the
/// ante-impact reference.
pub fn intermediate_qp(params: &ModelParams, q: &Vector4<f64>, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    intermediate_with(&mut QpSolver::new(), params, q, refs, t)
}

/// Post-impact QP with both contacts held closed and `λ ≥ 0`.
pub fn post_qp(params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    post_with(&mut QpSolver::new(), params, state, refs, t)
}

/// Post-impact position tracking without contact constraints, keeping the
/// ante-impact orientation task.
pub fn fallback_qp(params: &ModelParams, state: &State, refs: &ReferenceBundle, t: f64) -> Result<ControlOutput> {
    fallback_with(&mut QpSolver::new(), params, state, refs, t)
}

/// Mode state machine plus warm-started solvers, one per control law.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    mode: ControlMode,
    /// Set once full contact has been observed in Post mode.
    contact_established: bool,
    solvers: [QpSolver; 4],
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Controller { config, mode: ControlMode::Ante, contact_established: false, solvers: Default::default() })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    /// Advances the mode from a contact observation at time `t`.
    pub fn observe(&mut self, t: f64, obs: &ContactObservation, refs: &ReferenceBundle) -> ControlMode {
        self.mode = match self.config.strategy {
            Strategy::NoRs if t >= refs.t_imp => ControlMode::Post,
            Strategy::NoRs => self.mode,
            _ => supervise(&self.config, self.mode, obs),
        };
        if self.mode == ControlMode::Post && obs.full_contact(self.config.epsilon) {
            self.contact_established = true;
        }
        self.mode
    }

    pub fn contact_established(&self) -> bool {
        self.contact_established
    }

    /// Torque command in the current mode. Post mode uses the contact
    /// constrained QP once both contacts have been seen closed and settled,
    /// and the unconstrained fallback before that.
    pub fn compute(
        &mut self,
        params: &ModelParams,
        state: &State,
        refs: &ReferenceBundle,
        t: f64,
        obs: &ContactObservation,
    ) -> Result<ControlOutput> {
        let [ante, itmd, post, fallback] = &mut self.solvers;
        match self.mode {
            ControlMode::Ante => ante_with(ante, params, state, refs, t),
            ControlMode::Intermediate => intermediate_with(itmd, params, &state.q, refs, t),
            ControlMode::Post if self.contact_established || obs.full_contact(self.config.epsilon) => {
                post_with(post, params, state, refs, t)
            }
            ControlMode::Post => fallback_with(fallback, params, state, refs, t),
        }
    }
}
