//! Event-driven rigid-body simulation.
//!
//! Smooth motion is integrated with fixed-step RK4. A step that ends with a
//! negative gap is bisected on its cubic Hermite interpolant, re-integrated
//! up to the crossing, and the impact map is applied to the closing contacts
//! together with the already active ones. Closed contacts are held by an
//! index-1 constraint solve with explicit re-projection after every step.

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector4};

use crate::contact::{contact_geometry, impact_map, stacked_rows, ActiveSet};
use crate::control::{ContactObservation, Controller};
use crate::error::{Error, Result};
use crate::mechanics::{actuation_matrix, bias_vector, free_acceleration, kinetic_energy, mass_matrix, total_energy};
use crate::params::{ModelParams, State};
use crate::reference::ReferenceBundle;

use super::log::{EventKind, ModelKind, Sample, SimEvent, SimLog};
use super::{initial_state, SimConfig};

/// Contact forces below this are treated as pulling and released, N.
const RELEASE_THRESHOLD: f64 = 1e-9;
/// Approach rates smaller than this on a touching contact are round-off, m/s.
const RESTING_RATE_TOLERANCE: f64 = 1e-9;
/// Consecutive zero-length advances tolerated before giving up.
const MAX_STALLED_ADVANCES: u32 = 16;

fn rk4<F>(state: &State, dt: f64, accel: F) -> Result<State>
where
    F: Fn(&State) -> Result<Vector4<f64>>,
{
    let k1v = accel(state)?;
    let k1x = state.qdot;
    let s2 = State::new(state.q + 0.5 * dt * k1x, state.qdot + 0.5 * dt * k1v);
    let k2v = accel(&s2)?;
    let s3 = State::new(state.q + 0.5 * dt * s2.qdot, state.qdot + 0.5 * dt * k2v);
    let k3v = accel(&s3)?;
    let s4 = State::new(state.q + dt * s3.qdot, state.qdot + dt * k3v);
    let k4v = accel(&s4)?;
    let next = State::new(
        state.q + dt / 6.0 * (k1x + 2.0 * s2.qdot + 2.0 * s3.qdot + s4.qdot),
        state.qdot + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    );
    next.check_finite()?;
    Ok(next)
}

/// One RK4 step of contact-free motion.
pub fn step_free(params: &ModelParams, state: &State, tau: &Vector3<f64>, dt: f64) -> Result<State> {
    state.check_finite()?;
    rk4(state, dt, |s| free_acceleration(params, s, tau).ok_or(Error::NonFiniteState))
}

/// Accelerations and forces holding the contacts in `active` closed:
/// `M q̈ + h = S τ + Jᵀλ`, `J q̈ + J̇ q̇ = 0`. Forces of inactive contacts are 0.
pub fn constrained_acceleration(
    params: &ModelParams,
    state: &State,
    tau: &Vector3<f64>,
    active: ActiveSet,
) -> Result<(Vector4<f64>, Vector2<f64>)> {
    let m = mass_matrix(params, &state.q);
    let chol = m.cholesky().ok_or(Error::NonFiniteState)?;
    let rhs = actuation_matrix() * tau - bias_vector(params, state);
    let free = chol.solve(&rhs);
    if active.is_empty() {
        return Ok((free, Vector2::zeros()));
    }
    let geom = contact_geometry(params, state);
    let j = stacked_rows(&geom.jn, active);
    let minv_jt = DMatrix::from_fn(4, j.nrows(), |r, c| chol.solve(&Vector4::from_iterator(j.row(c).iter().copied()))[r]);
    let delassus = &j * &minv_jt;
    let qdot = DVector::from_column_slice(state.qdot.as_slice());
    let jn_dot = stacked_rows(&geom.jn_dot, active);
    let free_d = DVector::from_column_slice(free.as_slice());
    let b = -(&jn_dot * &qdot) - &j * &free_d;
    let lambda = delassus.cholesky().ok_or(Error::SingularConstraintSystem)?.solve(&b);
    let qddot = free + Vector4::from_column_slice((&minv_jt * &lambda).as_slice());
    let mut forces = Vector2::zeros();
    for (r, i) in active.iter().enumerate() {
        forces[i] = lambda[r];
    }
    if !(qddot.iter().chain(forces.iter()).all(|v| v.is_finite())) {
        return Err(Error::NonFiniteState);
    }
    Ok((qddot, forces))
}

/// Drops pulling contacts one at a time, most negative force first, until
/// every remaining force is non-negative.
pub(crate) fn resolve_active(
    params: &ModelParams,
    state: &State,
    tau: &Vector3<f64>,
    mut active: ActiveSet,
) -> Result<(ActiveSet, Vector2<f64>)> {
    loop {
        let (_, lambda) = constrained_acceleration(params, state, tau, active)?;
        let pulling = active.iter().filter(|&i| lambda[i] < -RELEASE_THRESHOLD).min_by(|&a, &b| lambda[a].total_cmp(&lambda[b]));
        match pulling {
            Some(i) => active.remove(i),
            None => return Ok((active, lambda)),
        }
    }
}

/// Mass-weighted projection of the configuration onto the active gaps being
/// zero, followed by the impact-map projection of the velocity.
pub(crate) fn project(params: &ModelParams, state: &State, active: ActiveSet) -> Result<State> {
    if active.is_empty() {
        return Ok(*state);
    }
    let mut q = state.q;
    for _ in 0..8 {
        let geom = contact_geometry(params, &State::at_rest(q));
        let gaps = DVector::from_iterator(active.len(), active.iter().map(|i| geom.gaps[i]));
        if gaps.amax() <= 1e-15 {
            break;
        }
        let chol = mass_matrix(params, &q).cholesky().ok_or(Error::NonFiniteState)?;
        let j = stacked_rows(&geom.jn, active);
        let minv_jt = DMatrix::from_fn(4, j.nrows(), |r, c| chol.solve(&Vector4::from_iterator(j.row(c).iter().copied()))[r]);
        let w = (&j * &minv_jt).cholesky().ok_or(Error::SingularConstraintSystem)?;
        q -= Vector4::from_column_slice((&minv_jt * w.solve(&gaps)).as_slice());
    }
    let qdot = impact_map(params, &State::new(q, state.qdot), active)?.qdot_post;
    let out = State::new(q, qdot);
    out.check_finite()?;
    Ok(out)
}

/// One RK4 step with the contacts in `active` held closed. Pulling contacts
/// are released first. Returns the new state, the contacts still active and
/// their forces at the start of the step.
pub fn step_constrained(
    params: &ModelParams,
    state: &State,
    tau: &Vector3<f64>,
    active: ActiveSet,
    dt: f64,
) -> Result<(State, ActiveSet, Vector2<f64>)> {
    state.check_finite()?;
    let (active, lambda) = resolve_active(params, state, tau, active)?;
    let next = rk4(state, dt, |s| constrained_acceleration(params, s, tau, active).map(|(a, _)| a))?;
    Ok((project(params, &next, active)?, active, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedEvent {
    /// Contacts whose gap is within tolerance of zero at the crossing.
    pub contacts: ActiveSet,
    /// Time from the start of the step.
    pub offset: f64,
}

fn hermite(before: &State, after: &State, h: f64, s: f64) -> Vector4<f64> {
    let u = s / h;
    let (u2, u3) = (u * u, u * u * u);
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    h00 * before.q + h10 * h * before.qdot + h01 * after.q + h11 * h * after.qdot
}

/// Earliest crossing to a negative gap among `candidates` over a step of
/// length `h`, localized by bisection to within `tolerance` on the gap.
/// Contacts already touching and not approaching at the start are ignored,
/// up to round-off in the approach rate.
pub fn detect_event(
    params: &ModelParams,
    before: &State,
    after: &State,
    h: f64,
    candidates: ActiveSet,
    tolerance: f64,
) -> Option<DetectedEvent> {
    let start = contact_geometry(params, before);
    let rates = start.rates(&before.qdot);
    let mut live = ActiveSet::EMPTY;
    for i in candidates.iter() {
        if !(start.gaps[i] <= tolerance && rates[i] >= -RESTING_RATE_TOLERANCE) {
            live.insert(i);
        }
    }
    if live.is_empty() {
        return None;
    }
    let gaps_at = |q: &Vector4<f64>| contact_geometry(params, &State::at_rest(*q)).gaps;
    let lowest = |g: &Vector2<f64>| live.iter().map(|i| g[i]).fold(f64::INFINITY, f64::min);
    let touching = |g: &Vector2<f64>| {
        let mut set = ActiveSet::EMPTY;
        for i in live.iter().filter(|&i| g[i] <= tolerance) {
            set.insert(i);
        }
        set
    };

    if lowest(&start.gaps) <= tolerance {
        return Some(DetectedEvent { contacts: touching(&start.gaps), offset: 0.0 });
    }
    let end = gaps_at(&after.q);
    if lowest(&end) >= 0.0 {
        return None;
    }
    if lowest(&end) >= -tolerance {
        return Some(DetectedEvent { contacts: touching(&end), offset: h });
    }
    let (mut lo, mut hi) = (0.0, h);
    let mut at_hi = end;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = gaps_at(&hermite(before, after, h, mid));
        let f = lowest(&g);
        if f > tolerance {
            lo = mid;
        } else {
            hi = mid;
            at_hi = g;
            if f >= -tolerance {
                break;
            }
        }
        if hi - lo <= f64::EPSILON * h {
            break;
        }
    }
    Some(DetectedEvent { contacts: touching(&at_hi), offset: hi })
}

/// Work and dissipation bookkeeping for the energy audit.
struct EnergyAudit {
    initial: f64,
    net_work: f64,
    worst: f64,
}

impl EnergyAudit {
    fn power(params: &ModelParams, state: &State, tau: &Vector3<f64>) -> f64 {
        tau.dot(&state.qdot_rob()) - params.hinge_damping * state.qdot[3] * state.qdot[3]
    }

    fn step(&mut self, params: &ModelParams, before: &State, after: &State, tau: &Vector3<f64>, h: f64) {
        self.net_work += 0.5 * h * (Self::power(params, before, tau) + Self::power(params, after, tau));
        self.check(params, after);
    }

    fn check(&mut self, params: &ModelParams, state: &State) {
        let residual = total_energy(params, state) - self.initial - self.net_work;
        self.worst = self.worst.max(residual.abs());
    }
}

struct RigidRun<'a> {
    params: &'a ModelParams,
    config: &'a SimConfig,
    refs: &'a ReferenceBundle,
    state: State,
    active: ActiveSet,
    t: f64,
    tau: Vector3<f64>,
    audit: EnergyAudit,
}

impl RigidRun<'_> {
    fn observation(&self) -> ContactObservation {
        ContactObservation::from_active_set(self.params, &self.state, self.active)
    }

    fn observe(&self, controller: &mut Controller, log: &mut SimLog) {
        let before = controller.mode();
        let mode = controller.observe(self.t, &self.observation(), self.refs);
        if mode != before {
            log.mode_changes.push((self.t, mode));
        }
    }

    fn release(&mut self, still: ActiveSet, log: &mut SimLog) {
        if still != self.active {
            let ke = kinetic_energy(self.params, &self.state);
            let mut opened = ActiveSet::EMPTY;
            for i in self.active.iter().filter(|&i| !still.contains(i)) {
                opened.insert(i);
            }
            log.events.push(SimEvent {
                t: self.t,
                kind: EventKind::Release,
                contacts: opened,
                active_after: still,
                impulse: Vector2::zeros(),
                ke_before: ke,
                ke_after: ke,
            });
            self.active = still;
        }
    }

    /// Integrates `h` seconds, or less when an impact happens first.
    fn advance(&mut self, h: f64, controller: &mut Controller, log: &mut SimLog) -> Result<()> {
        let before = self.state;
        if !self.active.is_empty() {
            let (still, lambda) = resolve_active(self.params, &before, &self.tau, self.active)?;
            log.min_contact_force = log.min_contact_force.min(lambda.min());
            self.release(still, log);
        }
        let integrate = |dt: f64| -> Result<State> {
            if self.active.is_empty() {
                step_free(self.params, &before, &self.tau, dt)
            } else {
                step_constrained(self.params, &before, &self.tau, self.active, dt).map(|(s, _, _)| s)
            }
        };
        let after = integrate(h)?;
        let candidates = ActiveSet::BOTH.difference(self.active);
        let event = detect_event(self.params, &before, &after, h, candidates, self.config.event_tolerance);
        let (reached, dt) = match event {
            Some(e) if e.offset < h => (if e.offset > 0.0 { integrate(e.offset)? } else { before }, e.offset),
            _ => (after, h),
        };
        self.audit.step(self.params, &before, &reached, &self.tau, dt);
        self.state = reached;
        self.t += dt;
        if let Some(e) = event {
            self.impact(e, controller, log)?;
        }
        Ok(())
    }

    fn impact(&mut self, event: DetectedEvent, controller: &mut Controller, log: &mut SimLog) -> Result<()> {
        let tol = self.config.event_tolerance;
        let gaps = contact_geometry(self.params, &self.state).gaps;
        let mut closing = ActiveSet::EMPTY;
        for i in ActiveSet::BOTH.difference(self.active).iter().filter(|&i| gaps[i] <= tol) {
            closing.insert(i);
        }
        if closing.is_empty() {
            closing = event.contacts;
        }
        // Projection onto every closed contact; a contact that the impulse
        // would pull on is released afterwards by the force-level check.
        let set = closing.union(self.active);
        let r = impact_map(self.params, &self.state, set)?;
        let ke_before = kinetic_energy(self.params, &self.state);
        let energy_before = total_energy(self.params, &self.state);
        self.state = project(self.params, &State::new(self.state.q, r.qdot_post), set)?;
        let ke_after = kinetic_energy(self.params, &self.state);
        // The impact loss is dissipated work; projection drift stays in the residual.
        self.audit.net_work -= energy_before - total_energy(self.params, &self.state);
        self.audit.check(self.params, &self.state);
        log.events.push(SimEvent {
            t: self.t,
            kind: EventKind::Impact,
            contacts: closing,
            active_after: set,
            impulse: r.impulse,
            ke_before,
            ke_after,
        });
        self.active = set;
        self.observe(controller, log);
        Ok(())
    }

    fn sample(&mut self, controller: &mut Controller, log: &mut SimLog, t_tick: f64) -> Result<()> {
        self.observe(controller, log);
        let obs = self.observation();
        let out = controller.compute(self.params, &self.state, self.refs, self.t, &obs)?;
        log.qp_calls += 1;
        log.max_kkt_residual = log.max_kkt_residual.max(out.diagnostics.kkt_residual);
        self.tau = out.tau_star;
        let (still, lambda) = resolve_active(self.params, &self.state, &self.tau, self.active)?;
        log.min_contact_force = log.min_contact_force.min(lambda.min());
        self.release(still, log);
        log.samples.push(sample_row(self.params, &self.state, t_tick, lambda, &out));
        Ok(())
    }
}

pub(crate) fn sample_row(
    params: &ModelParams,
    state: &State,
    t: f64,
    lambda: Vector2<f64>,
    out: &crate::control::ControlOutput,
) -> Sample {
    let tk = crate::mechanics::task_jacobians(params, &state.q, &state.qdot);
    let geom = contact_geometry(params, state);
    Sample {
        t,
        q: state.q,
        qdot: state.qdot,
        p: tk.p,
        theta: tk.theta,
        pdot: tk.jp * state.qdot,
        thetadot: (tk.jtheta * state.qdot)[0],
        gaps: geom.gaps,
        gap_rates: geom.rates(&state.qdot),
        lambda,
        tau_star: out.tau_star,
        mode: out.mode,
        law: out.law,
        qp_cost: out.diagnostics.cost,
        kkt_residual: out.diagnostics.kkt_residual,
        flex: None,
    }
}

fn rigid_loop(params: &ModelParams, config: &SimConfig, refs: &ReferenceBundle, controller: &mut Controller, log: &mut SimLog) -> Result<()> {
    params.validate()?;
    config.validate()?;
    let state = initial_state(params, refs, log.plank_offset)?;
    let mut run = RigidRun {
        params,
        config,
        refs,
        state,
        active: ActiveSet::EMPTY,
        t: 0.0,
        tau: Vector3::zeros(),
        audit: EnergyAudit { initial: total_energy(params, &state), net_work: 0.0, worst: 0.0 },
    };
    log.mode_changes.push((0.0, controller.mode()));
    log.step_changes.push((0.0, config.step));
    let dt = controller.config().dt;
    let ticks = (refs.t_end / dt).round() as u64;
    let result = (|| {
        for k in 0..=ticks {
            let t_tick = k as f64 * dt;
            let mut stalled = 0;
            while t_tick - run.t > 1e-12 {
                let h = (t_tick - run.t).min(config.step);
                let t_before = run.t;
                run.advance(h, controller, log)?;
                stalled = if run.t > t_before { 0 } else { stalled + 1 };
                if stalled > MAX_STALLED_ADVANCES {
                    return Err(Error::EventAccumulation { t: run.t });
                }
            }
            run.t = t_tick;
            run.sample(controller, log, t_tick)?;
        }
        Ok(())
    })();
    log.energy_residual = run.audit.worst;
    result
}

/// Simulates the rigid model under `controller` until the reference end
/// time. Errors stop the run; the log keeps everything up to that point.
pub fn run_rigid(params: &ModelParams, config: &SimConfig, refs: &ReferenceBundle, controller: &mut Controller) -> SimLog {
    let mut log = SimLog::new(ModelKind::Rigid, controller.config().strategy, config.effective_offset());
    if let Err(e) = rigid_loop(params, config, refs, controller, &mut log) {
        log.error = Some(e);
    }
    log
}
