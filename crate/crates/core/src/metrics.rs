//! Scalar summaries of a simulation log: impact timing, torque peaks,
//! tracking decay and a complementarity audit.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::contact::ActiveSet;
use crate::control::ControlMode;
use crate::reference::ReferenceBundle;
use crate::sim::{EventKind, ModelKind, Sample, SimLog};

/// Sign and product tolerance of the rigid complementarity audit.
pub const COMPLEMENTARITY_TOLERANCE: f64 = 1e-9;

/// Length of the post-contact window used for the decay fit, s.
pub const DECAY_FIT_WINDOW: f64 = 0.25;

/// Tracking error modelled as `(A + B·s)·exp(−rate·s)` per task coordinate,
/// with `s` the time since full contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    /// Root-mean-square residual of the fit, m.
    pub residual: f64,
    /// Error norm at the start of the window, m.
    pub initial: f64,
}

impl DecayFit {
    pub fn time_constant(&self) -> f64 {
        1.0 / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityAudit {
    pub samples: usize,
    pub min_gap: f64,
    pub min_force: f64,
    pub max_product: f64,
    /// Samples breaking any of the three conditions.
    pub violations: usize,
}

impl ComplementarityAudit {
    /// Rigid logs obey `γ ≥ −tol`, `λ ≥ −tol` and `|γλ| ≤ tol`. Compliant
    /// logs only need non-negative forces, since loaded contacts penetrate.
    pub fn of(log: &SimLog) -> Self {
        let tol = COMPLEMENTARITY_TOLERANCE;
        let rigid = log.model == ModelKind::Rigid;
        let mut audit = ComplementarityAudit {
            samples: log.samples.len(),
            min_gap: f64::INFINITY,
            min_force: f64::INFINITY,
            max_product: 0.0,
            violations: 0,
        };
        for s in &log.samples {
            let product = s.gaps.component_mul(&s.lambda).abs().max();
            audit.min_gap = audit.min_gap.min(s.gaps.min());
            audit.min_force = audit.min_force.min(s.lambda.min());
            audit.max_product = audit.max_product.max(product);
            let ok = if rigid {
                s.gaps.min() >= -tol && s.lambda.min() >= -tol && product <= tol
            } else {
                s.lambda.min() >= 0.0
            };
            if !ok {
                audit.violations += 1;
            }
        }
        audit
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Invariants every log must satisfy, whatever the run did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogAudit {
    pub complementarity: ComplementarityAudit,
    pub monotone_time: bool,
    /// Modes only ever advance Ante → Intermediate → Post.
    pub monotone_modes: bool,
    pub max_kkt_residual: f64,
}

impl LogAudit {
    pub fn of(log: &SimLog) -> Self {
        let samples = &log.samples;
        LogAudit {
            complementarity: ComplementarityAudit::of(log),
            monotone_time: samples.windows(2).all(|w| w[1].t > w[0].t),
            monotone_modes: samples.windows(2).all(|w| w[1].mode >= w[0].mode),
            max_kkt_residual: samples.iter().map(|s| s.kkt_residual).fold(0.0, f64::max),
        }
    }

    pub fn passed(&self) -> bool {
        self.complementarity.passed() && self.monotone_time && self.monotone_modes && self.max_kkt_residual <= crate::qp::KKT_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub impact_times: Vec<f64>,
    pub first_impact: Option<f64>,
    /// First instant with both contacts closed.
    pub full_contact: Option<f64>,
    pub intermediate_entry: Option<f64>,
    pub post_entry: Option<f64>,
    /// Mode at the instant full contact was first reached.
    pub mode_at_full_contact: Option<ControlMode>,
    /// Largest `‖τ*‖∞` over samples between the first impact and full
    /// contact (both inclusive), N·m.
    pub inter_impact_peak_torque: Option<f64>,
    /// Largest per-joint `max τ* − min τ*` from the first impact on, N·m.
    pub peak_to_peak_torque: Option<f64>,
    /// `‖τ*‖∞` change across the first Ante→Intermediate sample pair, N·m.
    pub switch_torque_jump: Option<f64>,
    /// Largest `‖τ*‖∞` while in Ante mode, N·m.
    pub ante_torque_scale: f64,
    pub decay: Option<DecayFit>,
    /// Largest `‖ṗ − ṗ_d‖` against the post reference from Post entry on, m/s.
    pub velocity_error_peak: Option<f64>,
    pub post_rms_error: Option<f64>,
    pub complementarity: ComplementarityAudit,
    pub max_kkt_residual: f64,
    pub energy_residual: f64,
}

fn mode_entry(log: &SimLog, mode: ControlMode) -> Option<f64> {
    log.mode_changes.iter().find(|(_, m)| *m == mode).map(|(t, _)| *t)
}

fn mode_at(log: &SimLog, t: f64) -> ControlMode {
    log.mode_changes.iter().take_while(|(tc, _)| *tc <= t).last().map_or(ControlMode::Ante, |(_, m)| *m)
}

fn samples_from(log: &SimLog, t0: f64) -> impl Iterator<Item = &Sample> {
    // Samples sit on the control grid; a tiny slack keeps the tick that
    // coincides with `t0` up to rounding.
    log.samples.iter().filter(move |s| s.t >= t0 - 1e-12)
}

fn position_error(refs: &ReferenceBundle, s: &Sample) -> Vector2<f64> {
    refs.post_position(s.t).p - s.p
}

/// Least-squares fit of `(A + B·s)·exp(−rate·s)` to each column of `errors`
/// for a fixed rate, returning the residual sum of squares.
fn residual_at(times: &[f64], errors: &[Vector2<f64>], rate: f64) -> f64 {
    let n = times.len();
    let basis = DMatrix::from_fn(n, 2, |r, c| {
        let e = (-rate * times[r]).exp();
        if c == 0 { e } else { times[r] * e }
    });
    let svd = basis.clone().svd(true, true);
    (0..2)
        .map(|k| {
            let y = DVector::from_fn(n, |r, _| errors[r][k]);
            let coef = svd.solve(&y, 1e-14).unwrap_or_else(|_| DVector::zeros(2));
            (&basis * coef - y).norm_squared()
        })
        .sum()
}

/// Fits the decay rate over `[t0, t0 + window]` by a log-spaced scan
/// followed by golden-section refinement.
pub fn fit_decay(log: &SimLog, refs: &ReferenceBundle, t0: f64, window: f64) -> Option<DecayFit> {
    let (times, errors): (Vec<f64>, Vec<Vector2<f64>>) =
        samples_from(log, t0).take_while(|s| s.t <= t0 + window + 1e-12).map(|s| (s.t - t0, position_error(refs, s))).unzip();
    if times.len() < 8 {
        return None;
    }
    let f = |log_rate: f64| residual_at(&times, &errors, log_rate.exp());
    let (lo, hi) = (0.1f64.ln(), 1000f64.ln());
    let steps = 200;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let best = (0..=steps).min_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b])))?;
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let log_rate = 0.5 * (a + b);
    Some(DecayFit {
        rate: log_rate.exp(),
        residual: (f(log_rate) / times.len() as f64).sqrt(),
        initial: errors[0].norm(),
    })
}

impl RunMetrics {
    pub fn of(log: &SimLog, refs: &ReferenceBundle) -> Self {
        let impacts: Vec<_> = log.events.iter().filter(|e| e.kind == EventKind::Impact).collect();
        let first_impact = impacts.first().map(|e| e.t);
        let full_contact = impacts.iter().find(|e| e.active_after == ActiveSet::BOTH).map(|e| e.t);
        let inf_norm = |s: &Sample| s.tau_star.amax();

        let inter_impact_peak_torque = first_impact.zip(full_contact).and_then(|(t0, t1)| {
            samples_from(log, t0).take_while(|s| s.t <= t1 + 1e-12).map(inf_norm).reduce(f64::max)
        });
        let peak_to_peak_torque = first_impact.and_then(|t0| {
            let window: Vec<_> = samples_from(log, t0).collect();
            (!window.is_empty()).then(|| {
                (0..3)
                    .map(|j| {
                        let (lo, hi) = window.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                            (lo.min(s.tau_star[j]), hi.max(s.tau_star[j]))
                        });
                        hi - lo
                    })
                    .fold(0.0, f64::max)
            })
        });
        let switch_torque_jump = log
            .samples
            .windows(2)
            .find(|w| w[0].mode == ControlMode::Ante && w[1].mode == ControlMode::Intermediate)
            .map(|w| (w[1].tau_star - w[0].tau_star).amax());
        let ante_torque_scale = log.samples.iter().filter(|s| s.mode == ControlMode::Ante).map(inf_norm).fold(0.0, f64::max);

        let post_entry = mode_entry(log, ControlMode::Post);
        let velocity_error_peak = post_entry.and_then(|t0| {
            samples_from(log, t0).map(|s| (refs.post_position(s.t).v - s.pdot).norm()).reduce(f64::max)
        });
        let post_rms_error = post_entry.and_then(|t0| {
            let errs: Vec<f64> = samples_from(log, t0).map(|s| position_error(refs, s).norm_squared()).collect();
            (!errs.is_empty()).then(|| (errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
        });

        RunMetrics {
            impact_times: impacts.iter().map(|e| e.t).collect(),
            first_impact,
            full_contact,
            intermediate_entry: mode_entry(log, ControlMode::Intermediate),
            post_entry,
            mode_at_full_contact: full_contact.map(|t| mode_at(log, t - 1e-12)),
            inter_impact_peak_torque,
            peak_to_peak_torque,
            switch_torque_jump,
            ante_torque_scale,
            decay: full_contact.and_then(|t| fit_decay(log, refs, t, DECAY_FIT_WINDOW)),
            velocity_error_peak,
            post_rms_error,
            complementarity: ComplementarityAudit::of(log),
            max_kkt_residual: log.max_kkt_residual,
            energy_residual: log.energy_residual,
        }
    }

    pub fn impact_count(&self) -> usize {
        self.impact_times.len()
    }

    pub fn intermediate_duration(&self) -> Option<f64> {
        self.intermediate_entry.zip(self.post_entry).map(|(a, b)| b - a)
    }

    /// Human-readable `key = value` lines.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.6e}"));
        let mut out = String::new();
        let times: Vec<String> = self.impact_times.iter().map(|t| format!("{t:.6e}")).collect();
        let _ = writeln!(out, "impact_count = {}", self.impact_count());
        let _ = writeln!(out, "impact_times = [{}]", times.join(", "));
        let _ = writeln!(out, "first_impact = {}", opt(self.first_impact));
        let _ = writeln!(out, "full_contact = {}", opt(self.full_contact));
        let _ = writeln!(out, "mode_at_full_contact = {}", self.mode_at_full_contact.map_or("none".to_string(), |m| m.to_string()));
        let _ = writeln!(out, "intermediate_entry = {}", opt(self.intermediate_entry));
        let _ = writeln!(out, "post_entry = {}", opt(self.post_entry));
        let _ = writeln!(out, "intermediate_duration = {}", opt(self.intermediate_duration()));
        let _ = writeln!(out, "inter_impact_peak_torque = {}", opt(self.inter_impact_peak_torque));
        let _ = writeln!(out, "peak_to_peak_torque = {}", opt(self.peak_to_peak_torque));
        let _ = writeln!(out, "switch_torque_jump = {}", opt(self.switch_torque_jump));
        let _ = writeln!(out, "ante_torque_scale = {:.6e}", self.ante_torque_scale);
        let _ = writeln!(out, "decay_rate = {}", opt(self.decay.map(|d| d.rate)));
        let _ = writeln!(out, "decay_residual = {}", opt(self.decay.map(|d| d.residual)));
        let _ = writeln!(out, "velocity_error_peak = {}", opt(self.velocity_error_peak));
        let _ = writeln!(out, "post_rms_error = {}", opt(self.post_rms_error));
        let c = &self.complementarity;
        let _ = writeln!(
            out,
            "complementarity = {} violations over {} samples (min gap {:.3e}, min force {:.3e}, max product {:.3e})",
            c.violations, c.samples, c.min_gap, c.min_force, c.max_product
        );
        let _ = writeln!(out, "max_kkt_residual = {:.3e}", self.max_kkt_residual);
        let _ = writeln!(out, "energy_residual = {:.3e}", self.energy_residual);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlLaw, Strategy};
    use crate::params::ModelParams;
    use crate::reference::{build_reference, ReferenceSpec};
    use nalgebra::{Vector3, Vector4};

    fn blank(t: f64) -> Sample {
        Sample {
            t,
            q: Vector4::zeros(),
            qdot: Vector4::zeros(),
            p: Vector2::zeros(),
            theta: 0.0,
            pdot: Vector2::zeros(),
            thetadot: 0.0,
            gaps: Vector2::new(0.1, 0.1),
            gap_rates: Vector2::zeros(),
            lambda: Vector2::zeros(),
            tau_star: Vector3::zeros(),
            mode: ControlMode::Ante,
            law: ControlLaw::Ante,
            qp_cost: 0.0,
            kkt_residual: 0.0,
            flex: None,
        }
    }

    #[test]
    fn decay_fit_recovers_a_critically_damped_rate() {
        let p = ModelParams::default();
        let refs = build_reference(&p, &ReferenceSpec::default()).unwrap();
        let mut log = SimLog::new(ModelKind::Rigid, Strategy::RsIntermediate, 0.0);
        let (t0, rate) = (1.2, 20.0);
        for k in 0..400 {
            let t = t0 + k as f64 * 1e-3;
            let s = t - t0;
            let e = Vector2::new(0.01 + 0.3 * s, -0.004 + 0.05 * s) * (-rate * s).exp();
            log.samples.push(Sample { p: refs.post_position(t).p - e, ..blank(t) });
        }
        let fit = fit_decay(&log, &refs, t0, DECAY_FIT_WINDOW).unwrap();
        assert!((fit.rate - rate).abs() < 1e-6 * rate, "rate {}", fit.rate);
        assert!(fit.residual < 1e-10);
    }

    #[test]
    fn audit_flags_adhesion_and_penetration() {
        let mut log = SimLog::new(ModelKind::Rigid, Strategy::NoRs, 0.0);
        log.samples.push(blank(0.0));
        log.samples.push(Sample { gaps: Vector2::new(0.0, 0.0), lambda: Vector2::new(3.0, 4.0), ..blank(0.001) });
        assert!(ComplementarityAudit::of(&log).passed());
        log.samples.push(Sample { lambda: Vector2::new(-1e-6, 0.0), gaps: Vector2::zeros(), ..blank(0.002) });
        log.samples.push(Sample { gaps: Vector2::new(-1e-6, 0.1), ..blank(0.003) });
        log.samples.push(Sample { gaps: Vector2::new(1e-3, 0.0), lambda: Vector2::new(1.0, 0.0), ..blank(0.004) });
        let audit = ComplementarityAudit::of(&log);
        assert_eq!(audit.violations, 3);
        assert_eq!(audit.min_force, -1e-6);
    }

    #[test]
    fn compliant_audit_ignores_penetration() {
        let mut log = SimLog::new(ModelKind::Flexible, Strategy::NoRs, 0.0);
        log.samples.push(Sample { gaps: Vector2::new(-1e-5, 0.0), lambda: Vector2::new(30.0, 0.0), ..blank(0.0) });
        assert!(ComplementarityAudit::of(&log).passed());
    }
}
