//! Simulation log and its versioned CSV form.
//!
//! The sample file starts with a `# simlog v1 …` line, then a header with the
//! fixed column order below, then one row per control period with every
//! number formatted `%.12e`. Impacts and releases go to a separate event file
//! with the same conventions.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::contact::ActiveSet;
use crate::control::{ControlLaw, ControlMode, Strategy};
use crate::error::{Error, Result};
use crate::numfmt::sci12;

pub const SCHEMA_VERSION: u32 = 1;

pub const RIGID_COLUMNS: [&str; 28] = [
    "t", "q1", "q2", "q3", "q4", "qd1", "qd2", "qd3", "qd4", "px", "py", "theta", "vx", "vy", "thetadot", "gap1", "gap2",
    "gaprate1", "gaprate2", "lambda1", "lambda2", "tau1", "tau2", "tau3", "mode", "law", "qp_cost", "kkt_residual",
];

/// Appended after [`RIGID_COLUMNS`] for flexible runs.
pub const FLEX_COLUMNS: [&str; 7] = ["theta_rob1", "theta_rob2", "theta_rob3", "tau_flex1", "tau_flex2", "tau_flex3", "step"];

pub const EVENT_COLUMNS: [&str; 8] = ["t", "kind", "contacts", "active_after", "impulse1", "impulse2", "ke_before", "ke_after"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rigid,
    Flexible,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rigid => "rigid",
            ModelKind::Flexible => "flexible",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(ModelKind::Rigid),
            "flexible" => Ok(ModelKind::Flexible),
            _ => Err(Error::InvalidConfig(format!("unknown model `{s}`"))),
        }
    }
}

fn law_index(law: ControlLaw) -> u8 {
    match law {
        ControlLaw::Ante => 0,
        ControlLaw::Intermediate => 1,
        ControlLaw::Post => 2,
        ControlLaw::Fallback => 3,
    }
}

fn law_from_index(i: u8) -> Option<ControlLaw> {
    [ControlLaw::Ante, ControlLaw::Intermediate, ControlLaw::Post, ControlLaw::Fallback].get(i as usize).copied()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexColumns {
    pub theta_rob: Vector3<f64>,
    pub tau_flex: Vector3<f64>,
    /// Integrator step in use at this sample, s.
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: Vector4<f64>,
    pub qdot: Vector4<f64>,
    pub p: Vector2<f64>,
    pub theta: f64,
    pub pdot: Vector2<f64>,
    pub thetadot: f64,
    pub gaps: Vector2<f64>,
    pub gap_rates: Vector2<f64>,
    /// Contact forces, N.
    pub lambda: Vector2<f64>,
    pub tau_star: Vector3<f64>,
    pub mode: ControlMode,
    pub law: ControlLaw,
    pub qp_cost: f64,
    pub kkt_residual: f64,
    pub flex: Option<FlexColumns>,
}

impl Sample {
    fn values(&self) -> Vec<f64> {
        let mut v = vec![self.t];
        v.extend(self.q.iter());
        v.extend(self.qdot.iter());
        v.extend([self.p.x, self.p.y, self.theta, self.pdot.x, self.pdot.y, self.thetadot]);
        v.extend(self.gaps.iter());
        v.extend(self.gap_rates.iter());
        v.extend(self.lambda.iter());
        v.extend(self.tau_star.iter());
        v.extend([self.mode.index() as f64, law_index(self.law) as f64, self.qp_cost, self.kkt_residual]);
        if let Some(f) = &self.flex {
            v.extend(f.theta_rob.iter());
            v.extend(f.tau_flex.iter());
            v.push(f.step);
        }
        v
    }

    fn from_values(v: &[f64], flexible: bool) -> Result<Self> {
        let bad = |what: &str| Error::SchemaMismatch(format!("invalid {what} value"));
        let v4 = |i: usize| Vector4::new(v[i], v[i + 1], v[i + 2], v[i + 3]);
        let v3 = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
        let v2 = |i: usize| Vector2::new(v[i], v[i + 1]);
        let code = |x: f64| (x >= 0.0 && x.fract() == 0.0 && x < 256.0).then_some(x as u8);
        let mode = code(v[24]).and_then(ControlMode::from_index).ok_or_else(|| bad("mode"))?;
        let law = code(v[25]).and_then(law_from_index).ok_or_else(|| bad("law"))?;
        Ok(Sample {
            t: v[0],
            q: v4(1),
            qdot: v4(5),
            p: v2(9),
            theta: v[11],
            pdot: v2(12),
            thetadot: v[14],
            gaps: v2(15),
            gap_rates: v2(17),
            lambda: v2(19),
            tau_star: v3(21),
            mode,
            law,
            qp_cost: v[26],
            kkt_residual: v[27],
            flex: flexible.then(|| FlexColumns { theta_rob: v3(28), tau_flex: v3(31), step: v[34] }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Impact,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
    /// Contacts that closed (impact) or opened (release).
    pub contacts: ActiveSet,
    pub active_after: ActiveSet,
    pub impulse: Vector2<f64>,
    pub ke_before: f64,
    pub ke_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub model: ModelKind,
    pub strategy: Strategy,
    pub plank_offset: f64,
    pub samples: Vec<Sample>,
    pub events: Vec<SimEvent>,
    /// `(t, step)` at every change of the integrator step.
    pub step_changes: Vec<(f64, f64)>,
    /// Times of every mode change, with the new mode.
    pub mode_changes: Vec<(f64, ControlMode)>,
    pub qp_calls: usize,
    pub max_kkt_residual: f64,
    /// Smallest contact force seen at any integrator stage.
    pub min_contact_force: f64,
    /// Largest |E(t) − E(0) − supplied work + dissipated work| over the run, J.
    pub energy_residual: f64,
    pub error: Option<Error>,
}

impl SimLog {
    pub fn new(model: ModelKind, strategy: Strategy, plank_offset: f64) -> Self {
        SimLog {
            model,
            strategy,
            plank_offset,
            samples: Vec::new(),
            events: Vec::new(),
            step_changes: Vec::new(),
            mode_changes: Vec::new(),
            qp_calls: 0,
            max_kkt_residual: 0.0,
            min_contact_force: 0.0,
            energy_residual: 0.0,
            error: None,
        }
    }

    pub fn completed(&self) -> bool {
        self.error.is_none()
    }

    pub fn impacts(&self) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Impact)
    }

    pub fn columns(&self) -> Vec<&'static str> {
        let mut c = RIGID_COLUMNS.to_vec();
        if self.model == ModelKind::Flexible {
            c.extend(FLEX_COLUMNS);
        }
        c
    }

    fn schema_line(&self) -> String {
        format!(
            "# simlog v{SCHEMA_VERSION} model={} strategy={} offset={}",
            self.model,
            self.strategy,
            sci12(self.plank_offset)
        )
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", self.schema_line())?;
        writeln!(w, "{}", self.columns().join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s.values().into_iter().map(sci12).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_events_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# simevents v{SCHEMA_VERSION}")?;
        writeln!(w, "{}", EVENT_COLUMNS.join(","))?;
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Impact => "impact",
                EventKind::Release => "release",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                sci12(e.t),
                kind,
                e.contacts.bits(),
                e.active_after.bits(),
                sci12(e.impulse[0]),
                sci12(e.impulse[1]),
                sci12(e.ke_before),
                sci12(e.ke_after)
            )?;
        }
        Ok(())
    }

    /// Reads a sample file written by [`SimLog::write_csv`]. Run-level
    /// statistics that the file does not carry are left at their defaults.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::SchemaMismatch("file ends before the header".into()))?.map_err(Error::from)
        };
        let schema = next()?;
        let mut fields = schema.split_whitespace();
        if fields.next() != Some("#") || fields.next() != Some("simlog") {
            return Err(Error::SchemaMismatch("missing `# simlog` line".into()));
        }
        if fields.next() != Some(&format!("v{SCHEMA_VERSION}")[..]) {
            return Err(Error::SchemaMismatch("unsupported schema version".into()));
        }
        let (mut model, mut strategy, mut offset) = (None, None, 0.0);
        for kv in fields {
            match kv.split_once('=') {
                Some(("model", v)) => model = Some(v.parse::<ModelKind>().map_err(|e| Error::SchemaMismatch(e.to_string()))?),
                Some(("strategy", v)) => strategy = Some(v.parse::<Strategy>().map_err(|e| Error::SchemaMismatch(e.to_string()))?),
                Some(("offset", v)) => offset = v.parse().map_err(|_| Error::SchemaMismatch("bad offset".into()))?,
                _ => return Err(Error::SchemaMismatch(format!("unexpected schema field `{kv}`"))),
            }
        }
        let model = model.ok_or_else(|| Error::SchemaMismatch("schema line lacks model".into()))?;
        let strategy = strategy.ok_or_else(|| Error::SchemaMismatch("schema line lacks strategy".into()))?;
        let mut log = SimLog::new(model, strategy, offset);
        let header = next()?;
        let expected = log.columns().join(",");
        if header.trim_end() != expected {
            return Err(Error::SchemaMismatch(format!("header does not match the {model} column order")));
        }
        let width = log.columns().len();
        let flexible = model == ModelKind::Flexible;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let values = values.map_err(|_| Error::SchemaMismatch(format!("row {} is not numeric", i + 1)))?;
            if values.len() != width {
                return Err(Error::SchemaMismatch(format!("row {} has {} columns, expected {width}", i + 1, values.len())));
            }
            log.samples.push(Sample::from_values(&values, flexible)?);
        }
        Ok(log)
    }

    /// Reads an event file into `self.events`.
    pub fn read_events_csv<R: BufRead>(&mut self, r: R) -> Result<()> {
        let mut lines = r.lines();
        let schema = lines.next().transpose()?.unwrap_or_default();
        if schema.trim_end() != format!("# simevents v{SCHEMA_VERSION}") {
            return Err(Error::SchemaMismatch("missing `# simevents` line".into()));
        }
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != EVENT_COLUMNS.join(",") {
            return Err(Error::SchemaMismatch("event header does not match".into()));
        }
        let bad = |i: usize| Error::SchemaMismatch(format!("event row {} is malformed", i + 1));
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != EVENT_COLUMNS.len() {
                return Err(bad(i));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i));
            let set = |k: usize| f[k].parse::<u8>().ok().filter(|b| *b < 4).map(ActiveSet::from_bits).ok_or_else(|| bad(i));
            let kind = match f[1] {
                "impact" => EventKind::Impact,
                "release" => EventKind::Release,
                _ => return Err(bad(i)),
            };
            self.events.push(SimEvent {
                t: num(0)?,
                kind,
                contacts: set(2)?,
                active_after: set(3)?,
                impulse: Vector2::new(num(4)?, num(5)?),
                ke_before: num(6)?,
                ke_after: num(7)?,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, flex: bool) -> Sample {
        Sample {
            t,
            q: Vector4::new(0.1, -0.2, 0.3, 0.04),
            qdot: Vector4::new(1.0, 2.0, 3.0, 4.0),
            p: Vector2::new(0.4, 0.37),
            theta: 0.01,
            pdot: Vector2::new(0.0, -0.5),
            thetadot: 0.0,
            gaps: Vector2::new(1e-3, 2e-3),
            gap_rates: Vector2::new(-0.5, -0.5),
            lambda: Vector2::zeros(),
            tau_star: Vector3::new(10.0, -5.0, 1.0 / 3.0),
            mode: ControlMode::Intermediate,
            law: ControlLaw::Intermediate,
            qp_cost: 1e-20,
            kkt_residual: 1e-14,
            flex: flex.then(|| FlexColumns { theta_rob: Vector3::new(0.1, -0.2, 0.3), tau_flex: Vector3::new(1.0, 2.0, 3.0), step: 1e-6 }),
        }
    }

    fn log(model: ModelKind) -> SimLog {
        let mut l = SimLog::new(model, Strategy::NoRs, 0.05);
        l.samples = vec![sample(0.0, model == ModelKind::Flexible), sample(0.001, model == ModelKind::Flexible)];
        l.events.push(SimEvent {
            t: 0.98,
            kind: EventKind::Impact,
            contacts: ActiveSet::single(1),
            active_after: ActiveSet::single(1),
            impulse: Vector2::new(0.0, 3.5),
            ke_before: 1.0,
            ke_after: 0.5,
        });
        l
    }

    #[test]
    fn csv_round_trip() {
        for model in [ModelKind::Rigid, ModelKind::Flexible] {
            let l = log(model);
            let mut out = Vec::new();
            l.write_csv(&mut out).unwrap();
            let mut ev = Vec::new();
            l.write_events_csv(&mut ev).unwrap();
            let mut back = SimLog::read_csv(&out[..]).unwrap();
            back.read_events_csv(&ev[..]).unwrap();
            assert_eq!(back.model, model);
            assert_eq!(back.samples.len(), 2);
            assert_eq!(back.samples[1].mode, ControlMode::Intermediate);
            assert!((back.samples[1].tau_star[2] - 1.0 / 3.0).abs() < 1e-12);
            assert_eq!(back.samples[0].flex.is_some(), model == ModelKind::Flexible);
            assert_eq!(back.events, l.events);
            // Writing the parsed log again is byte-identical.
            let mut again = Vec::new();
            back.write_csv(&mut again).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn header_and_row_shape() {
        let mut out = Vec::new();
        log(ModelKind::Flexible).write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# simlog v1 model=flexible strategy=no_rs offset=5.000000000000e-02");
        assert!(lines[1].ends_with("tau_flex3,step"));
        assert_eq!(lines[2].split(',').count(), 35);
        assert!(lines[2].starts_with("0.000000000000e+00,1.000000000000e-01,"));
    }

    #[test]
    fn schema_mismatch_detected() {
        let mut out = Vec::new();
        log(ModelKind::Rigid).write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let wrong_model = text.replacen("model=rigid", "model=flexible", 1);
        assert!(matches!(SimLog::read_csv(wrong_model.as_bytes()), Err(Error::SchemaMismatch(_))));
        let no_schema = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(SimLog::read_csv(no_schema.as_bytes()), Err(Error::SchemaMismatch(_))));
        let short_row = format!("{text}1.0,2.0\n");
        assert!(matches!(SimLog::read_csv(short_row.as_bytes()), Err(Error::SchemaMismatch(_))));
        let bad_mode = text.replace("1.000000000000e+00,1.000000000000e+00,1.000000000000e-20", "7.000000000000e+00,1.000000000000e+00,1.000000000000e-20");
        assert!(matches!(SimLog::read_csv(bad_mode.as_bytes()), Err(Error::SchemaMismatch(_))));
    }
}
