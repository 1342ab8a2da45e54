//! Flexible-joint plant: link and motor inertias coupled by spring-damper
//! transmissions, a low-level torque loop, and compliant contact.

use nalgebra::{Vector2, Vector3, Vector4};

use crate::contact::{contact_geometry, hunt_crossley_force, ActiveSet, ContactGeometry};
use crate::control::{ContactObservation, Controller};
use crate::error::{Error, Result};
use crate::mechanics::{actuation_matrix, bias_vector, kinetic_energy, mass_matrix, total_energy};
use crate::params::{ModelParams, State};
use crate::reference::ReferenceBundle;

use super::log::{EventKind, FlexColumns, ModelKind, SimEvent, SimLog};
use super::rigid::sample_row;
use super::{initial_state, ratio, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexState {
    pub q: Vector4<f64>,
    pub qdot: Vector4<f64>,
    /// Motor-side positions, rad.
    pub theta_rob: Vector3<f64>,
    pub thetadot_rob: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexDerivative {
    pub qdot: Vector4<f64>,
    pub qddot: Vector4<f64>,
    pub thetadot: Vector3<f64>,
    pub thetaddot: Vector3<f64>,
}

impl FlexState {
    /// Motors placed so the springs carry the static gravity load.
    pub fn settled(params: &ModelParams, link: &State) -> Self {
        let g = bias_vector(params, &State::at_rest(link.q));
        let deflection = Vector3::from_fn(|i, _| g[i] / params.joint_stiffness[i]);
        FlexState { q: link.q, qdot: link.qdot, theta_rob: link.q_rob() + deflection, thetadot_rob: link.qdot_rob() }
    }

    pub fn link(&self) -> State {
        State::new(self.q, self.qdot)
    }

    /// Spring torque `K(θ − q)`.
    pub fn tau_flex(&self, params: &ModelParams) -> Vector3<f64> {
        params.stiffness_matrix() * (self.theta_rob - self.q.fixed_rows::<3>(0))
    }

    /// Damper torque `D(θ̇ − q̇)`, equal to `D K⁻¹ τ̇_flex`.
    pub fn tau_damping(&self, params: &ModelParams) -> Vector3<f64> {
        params.damping_matrix() * (self.thetadot_rob - self.qdot.fixed_rows::<3>(0))
    }

    /// Links, motors and transmission springs; contact energy excluded.
    pub fn energy(&self, params: &ModelParams) -> f64 {
        let stretch = self.theta_rob - self.q.fixed_rows::<3>(0);
        total_energy(params, &self.link())
            + 0.5 * self.thetadot_rob.dot(&(params.motor_inertia_matrix() * self.thetadot_rob))
            + 0.5 * stretch.dot(&(params.stiffness_matrix() * stretch))
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).chain(self.theta_rob.iter()).chain(self.thetadot_rob.iter()).all(|v| v.is_finite())
    }

    fn advanced(&self, d: &FlexDerivative, h: f64) -> Self {
        FlexState {
            q: self.q + h * d.qdot,
            qdot: self.qdot + h * d.qddot,
            theta_rob: self.theta_rob + h * d.thetadot,
            thetadot_rob: self.thetadot_rob + h * d.thetaddot,
        }
    }
}

fn forces_from(params: &ModelParams, geom: &ContactGeometry, qdot: &Vector4<f64>) -> Vector2<f64> {
    let rates = geom.rates(qdot);
    Vector2::from_fn(|i, _| hunt_crossley_force(params, geom.gaps[i], rates[i]))
}

/// Compliant normal forces at the two corners, with `γ̇ = J_N q̇`.
pub fn contact_forces(params: &ModelParams, state: &State) -> Vector2<f64> {
    forces_from(params, &contact_geometry(params, state), &state.qdot)
}

/// Motor torque making the transmission torque track `tau_star` as if the
/// motor inertia were the desired one:
/// `τ = B B_θ⁻¹ τ* + (I − B B_θ⁻¹)(τ_flex + D K⁻¹ τ̇_flex)`.
pub fn low_level_torque(params: &ModelParams, fstate: &FlexState, tau_star: &Vector3<f64>) -> Vector3<f64> {
    let shaping = Vector3::from_fn(|i, _| params.motor_inertia[i] / params.desired_motor_inertia[i]);
    let transmitted = fstate.tau_flex(params) + fstate.tau_damping(params);
    shaping.component_mul(tau_star) + (Vector3::repeat(1.0) - shaping).component_mul(&transmitted)
}

fn dynamics_with(params: &ModelParams, fs: &FlexState, tau: &Vector3<f64>, lambda: &Vector2<f64>, geom: &ContactGeometry) -> Result<FlexDerivative> {
    let link = fs.link();
    let transmitted = fs.tau_flex(params) + fs.tau_damping(params);
    let rhs = actuation_matrix() * transmitted + geom.jn.transpose() * lambda - bias_vector(params, &link);
    let qddot = mass_matrix(params, &fs.q).cholesky().ok_or(Error::NonFiniteState)?.solve(&rhs);
    let thetaddot = Vector3::from_fn(|i, _| (tau[i] - transmitted[i]) / params.motor_inertia[i]);
    let d = FlexDerivative { qdot: fs.qdot, qddot, thetadot: fs.thetadot_rob, thetaddot };
    if d.qddot.iter().chain(d.thetaddot.iter()).all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(Error::NonFiniteState)
    }
}

/// Time derivative of the flexible state under motor torque `tau_command`
/// and the given contact forces.
pub fn flex_dynamics(params: &ModelParams, fstate: &FlexState, tau_command: &Vector3<f64>, contact_forces: &Vector2<f64>) -> Result<FlexDerivative> {
    if !fstate.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let geom = contact_geometry(params, &fstate.link());
    dynamics_with(params, fstate, tau_command, contact_forces, &geom)
}

/// Net power into the audited energy: motor work, contact work and both
/// dampers.
fn power(params: &ModelParams, fs: &FlexState, tau: &Vector3<f64>, lambda: &Vector2<f64>, geom: &ContactGeometry) -> f64 {
    let slip = fs.thetadot_rob - fs.qdot.fixed_rows::<3>(0);
    tau.dot(&fs.thetadot_rob) - slip.dot(&(params.damping_matrix() * slip)) - params.hinge_damping * fs.qdot[3] * fs.qdot[3]
        + lambda.dot(&geom.rates(&fs.qdot))
}

struct Stage {
    derivative: FlexDerivative,
    lambda: Vector2<f64>,
    power: f64,
}

fn stage(params: &ModelParams, fs: &FlexState, tau_star: &Vector3<f64>) -> Result<Stage> {
    if !fs.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let geom = contact_geometry(params, &fs.link());
    let lambda = forces_from(params, &geom, &fs.qdot);
    let tau = low_level_torque(params, fs, tau_star);
    let derivative = dynamics_with(params, fs, &tau, &lambda, &geom)?;
    Ok(Stage { derivative, lambda, power: power(params, fs, &tau, &lambda, &geom) })
}

/// One RK4 step with the low-level law evaluated at every stage. Returns the
/// new state, the smallest contact force over the stages and the RK4 estimate
/// of the net work done over the step.
fn rk4(params: &ModelParams, fs: &FlexState, tau_star: &Vector3<f64>, h: f64) -> Result<(FlexState, f64, f64)> {
    let k1 = stage(params, fs, tau_star)?;
    let k2 = stage(params, &fs.advanced(&k1.derivative, 0.5 * h), tau_star)?;
    let k3 = stage(params, &fs.advanced(&k2.derivative, 0.5 * h), tau_star)?;
    let k4 = stage(params, &fs.advanced(&k3.derivative, h), tau_star)?;
    let mix4 = |a: Vector4<f64>, b: Vector4<f64>, c: Vector4<f64>, d: Vector4<f64>| (a + 2.0 * b + 2.0 * c + d) * (h / 6.0);
    let mix3 = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>| (a + 2.0 * b + 2.0 * c + d) * (h / 6.0);
    let (d1, d2, d3, d4) = (&k1.derivative, &k2.derivative, &k3.derivative, &k4.derivative);
    let next = FlexState {
        q: fs.q + mix4(d1.qdot, d2.qdot, d3.qdot, d4.qdot),
        qdot: fs.qdot + mix4(d1.qddot, d2.qddot, d3.qddot, d4.qddot),
        theta_rob: fs.theta_rob + mix3(d1.thetadot, d2.thetadot, d3.thetadot, d4.thetadot),
        thetadot_rob: fs.thetadot_rob + mix3(d1.thetaddot, d2.thetaddot, d3.thetaddot, d4.thetaddot),
    };
    if !next.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let min_force = [&k1, &k2, &k3, &k4].iter().map(|k| k.lambda.min()).fold(f64::INFINITY, f64::min);
    let work = h / 6.0 * (k1.power + 2.0 * k2.power + 2.0 * k3.power + k4.power);
    Ok((next, min_force, work))
}

fn flex_loop(params: &ModelParams, config: &SimConfig, refs: &ReferenceBundle, controller: &mut Controller, log: &mut SimLog) -> Result<()> {
    params.validate()?;
    config.validate()?;
    let dt = controller.config().dt;
    let fine = config.fine_step;
    let coarse_n = ratio(config.step, fine).expect("validated");
    let tick_n = ratio(dt, fine).expect("validated");
    let end_n = (refs.t_end / fine).round() as u64;

    let mut fs = FlexState::settled(params, &initial_state(params, refs, log.plank_offset)?);
    let initial_energy = fs.energy(params);
    let mut net_work = 0.0;
    let mut tau_star = Vector3::zeros();
    let mut current_step = 0.0;
    log.mode_changes.push((0.0, controller.mode()));
    log.min_contact_force = f64::INFINITY;

    let mut closed = ActiveSet::EMPTY;
    let mut n: u64 = 0;
    loop {
        let t = n as f64 * fine;
        let link = fs.link();
        let obs = ContactObservation::from_state(params, &link);
        closed = log_contact_changes(params, &link, t, &obs.gaps, closed, log);
        let before = controller.mode();
        let mode = controller.observe(t, &obs, refs);
        if mode != before {
            log.mode_changes.push((t, mode));
        }
        let gaps = obs.gaps;
        if n.is_multiple_of(tick_n) {
            let out = controller.compute(params, &link, refs, t, &obs)?;
            log.qp_calls += 1;
            log.max_kkt_residual = log.max_kkt_residual.max(out.diagnostics.kkt_residual);
            tau_star = out.tau_star;
            let mut row = sample_row(params, &link, t, contact_forces(params, &link), &out);
            let near = gaps.min() <= config.contact_margin;
            row.flex = Some(FlexColumns {
                theta_rob: fs.theta_rob,
                tau_flex: fs.tau_flex(params),
                step: if near { fine } else { config.step },
            });
            log.samples.push(row);
        }
        if n >= end_n {
            break;
        }
        let m = if gaps.min() <= config.contact_margin {
            1
        } else {
            coarse_n.min(tick_n - n % tick_n).min(end_n - n)
        };
        let h = m as f64 * fine;
        if h != current_step {
            log.step_changes.push((t, h));
            current_step = h;
        }
        let (next, min_force, work) = rk4(params, &fs, &tau_star, h)?;
        log.min_contact_force = log.min_contact_force.min(min_force);
        net_work += work;
        fs = next;
        n += m;
        // Energy stored in a loaded contact is not part of `energy`, so the
        // balance is only checked while both contacts are unloaded.
        if contact_geometry(params, &fs.link()).gaps.min() >= 0.0 {
            let residual = fs.energy(params) - initial_energy - net_work;
            log.energy_residual = log.energy_residual.max(residual.abs());
        }
    }
    Ok(())
}

/// Records compliant contact onsets as impacts with zero impulse, and
/// separations as releases.
fn log_contact_changes(params: &ModelParams, link: &State, t: f64, gaps: &Vector2<f64>, was: ActiveSet, log: &mut SimLog) -> ActiveSet {
    let mut now = ActiveSet::EMPTY;
    for i in (0..2).filter(|&i| gaps[i] <= 0.0) {
        now.insert(i);
    }
    let ke = kinetic_energy(params, link);
    for (kind, contacts) in [(EventKind::Release, was.difference(now)), (EventKind::Impact, now.difference(was))] {
        if !contacts.is_empty() {
            log.events.push(SimEvent { t, kind, contacts, active_after: now, impulse: Vector2::zeros(), ke_before: ke, ke_after: ke });
        }
    }
    now
}

/// Simulates the flexible-joint model under `controller` until the reference
/// end time, logging one row per control period.
pub fn run_flex(params: &ModelParams, config: &SimConfig, refs: &ReferenceBundle, controller: &mut Controller) -> SimLog {
    let mut log = SimLog::new(ModelKind::Flexible, controller.config().strategy, config.effective_offset());
    if let Err(e) = flex_loop(params, config, refs, controller, &mut log) {
        log.error = Some(e);
    }
    if !log.min_contact_force.is_finite() {
        log.min_contact_force = 0.0;
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{build_reference, ReferenceSpec};

    fn setup() -> (ModelParams, ReferenceBundle, FlexState) {
        let p = ModelParams::default();
        let b = build_reference(&p, &ReferenceSpec::default()).unwrap();
        let link = initial_state(&p, &b, 0.0).unwrap();
        let fs = FlexState::settled(&p, &link);
        (p, b, fs)
    }

    #[test]
    fn aligned_motors_transmit_nothing() {
        let (p, _, mut fs) = setup();
        fs.theta_rob = fs.q.fixed_rows::<3>(0).into_owned();
        fs.qdot = Vector4::new(0.3, -0.1, 0.2, 0.0);
        fs.thetadot_rob = fs.qdot.fixed_rows::<3>(0).into_owned();
        assert_eq!(fs.tau_flex(&p), Vector3::zeros());
        assert_eq!(fs.tau_damping(&p), Vector3::zeros());
        let d = flex_dynamics(&p, &fs, &Vector3::zeros(), &Vector2::zeros()).unwrap();
        let unactuated = crate::mechanics::free_acceleration(&p, &fs.link(), &Vector3::zeros()).unwrap();
        assert!((d.qddot - unactuated).amax() < 1e-12);
    }

    #[test]
    fn static_deflection_holds_the_arm() {
        let (p, _, fs) = setup();
        let tau = fs.tau_flex(&p);
        let d = flex_dynamics(&p, &fs, &tau, &Vector2::zeros()).unwrap();
        assert!(d.qddot.amax() < 1e-10);
        assert!(d.thetaddot.amax() < 1e-10);
    }

    #[test]
    fn low_level_law_values() {
        let (mut p, _, mut fs) = setup();
        fs.thetadot_rob = Vector3::new(0.1, 0.2, -0.3);
        let star = Vector3::new(5.0, -3.0, 1.0);
        let transmitted = fs.tau_flex(&p) + fs.tau_damping(&p);
        let tau = low_level_torque(&p, &fs, &star);
        assert!((tau - (20.0 * star - 19.0 * transmitted)).amax() < 1e-9);
        assert!((low_level_torque(&p, &fs, &transmitted) - transmitted).amax() < 1e-9);
        p.desired_motor_inertia = p.motor_inertia;
        assert!((low_level_torque(&p, &fs, &star) - star).amax() < 1e-12);
    }

    #[test]
    fn unforced_motion_loses_energy() {
        let (p, _, mut fs) = setup();
        fs.qdot = Vector4::new(0.5, -0.3, 0.4, 0.2);
        fs.thetadot_rob = Vector3::new(-0.2, 0.1, 0.6);
        let zero = Vector3::zeros();
        let mut e = fs.energy(&p);
        for _ in 0..2000 {
            // Zero motor torque: integrate the plant directly.
            let d = |s: &FlexState| flex_dynamics(&p, s, &zero, &Vector2::zeros()).unwrap();
            let h = 1e-4;
            let k1 = d(&fs);
            let k2 = d(&fs.advanced(&k1, 0.5 * h));
            let k3 = d(&fs.advanced(&k2, 0.5 * h));
            let k4 = d(&fs.advanced(&k3, h));
            let avg = FlexDerivative {
                qdot: (k1.qdot + 2.0 * k2.qdot + 2.0 * k3.qdot + k4.qdot) / 6.0,
                qddot: (k1.qddot + 2.0 * k2.qddot + 2.0 * k3.qddot + k4.qddot) / 6.0,
                thetadot: (k1.thetadot + 2.0 * k2.thetadot + 2.0 * k3.thetadot + k4.thetadot) / 6.0,
                thetaddot: (k1.thetaddot + 2.0 * k2.thetaddot + 2.0 * k3.thetaddot + k4.thetaddot) / 6.0,
            };
            fs = fs.advanced(&avg, h);
            let now = fs.energy(&p);
            assert!(now <= e + 1e-6 * e.abs(), "energy rose from {e} to {now}");
            e = now;
        }
    }

    #[test]
    fn open_contact_has_no_force() {
        let (p, _, fs) = setup();
        assert_eq!(contact_forces(&p, &fs.link()), Vector2::zeros());
    }
}
