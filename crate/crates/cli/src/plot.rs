//! Static SVG comparison figures built from simulation CSV logs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plotters::prelude::*;
use spreadqp::sim::{ModelKind, Sample, SimLog};
use spreadqp::ControlMode;

/// A log with the label it is drawn under.
pub struct Trace {
    pub label: String,
    pub log: SimLog,
}

impl Trace {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let log = SimLog::read_csv(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let label = log.strategy.to_string();
        Ok(Trace { label, log })
    }
}

const PALETTE: [RGBColor; 4] = [RGBColor(0, 114, 178), RGBColor(213, 94, 0), RGBColor(0, 158, 115), RGBColor(204, 121, 167)];

/// Time span around the first contact in any trace, or the whole log.
fn window(traces: &[&Trace]) -> (f64, f64) {
    let first = traces
        .iter()
        .filter_map(|tr| tr.log.samples.iter().find(|s| s.mode != ControlMode::Ante || s.gaps.min() <= 0.0).map(|s| s.t))
        .reduce(f64::min);
    let end = traces.iter().filter_map(|tr| tr.log.samples.last().map(|s| s.t)).fold(0.0, f64::max);
    match first {
        Some(t) => ((t - 0.05).max(0.0), (t + 0.45).min(end)),
        None => (0.0, end),
    }
}

struct Panel<'a> {
    title: &'a str,
    unit: &'a str,
    value: &'a dyn Fn(&Sample) -> f64,
}

fn draw_panels(path: &Path, title: &str, traces: &[&Trace], dashed_last: bool, panels: &[Panel]) -> Result<()> {
    let height = 220 * panels.len() as u32 + 40;
    let root = SVGBackend::new(path, (900, height)).into_drawing_area();
    root.fill(&WHITE)?;
    let root = root.titled(title, ("sans-serif", 20))?;
    let (t0, t1) = window(traces);
    for (area, panel) in root.split_evenly((panels.len(), 1)).iter().zip(panels) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for tr in traces {
            for s in tr.log.samples.iter().filter(|s| s.t >= t0 && s.t <= t1) {
                let v = (panel.value)(s);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (-1.0, 1.0);
        }
        let pad = ((hi - lo) * 0.05).max(1e-6);
        let mut chart = ChartBuilder::on(area)
            .caption(panel.title, ("sans-serif", 15))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(t0..t1, (lo - pad)..(hi + pad))?;
        chart.configure_mesh().x_desc("t [s]").y_desc(panel.unit).light_line_style(WHITE.mix(0.0)).draw()?;
        for (k, tr) in traces.iter().enumerate() {
            let nominal = dashed_last && k + 1 == traces.len();
            let color = if nominal { BLACK } else { PALETTE[k % PALETTE.len()] };
            let points: Vec<(f64, f64)> =
                tr.log.samples.iter().filter(|s| s.t >= t0 && s.t <= t1).map(|s| (s.t, (panel.value)(s))).collect();
            let series = if nominal {
                chart.draw_series(DashedLineSeries::new(points, 6, 4, color.stroke_width(1)))?
            } else {
                chart.draw_series(LineSeries::new(points, color.stroke_width(1)))?
            };
            series.label(tr.label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}

/// Writes `<dir>/<model>_velocity_force.svg` and `<dir>/<model>_torque.svg`.
/// The nominal trace is drawn dashed in the torque figure. Returns the paths.
pub fn emit_plots(dir: &Path, model: ModelKind, traces: &[Trace], nominal: &Trace) -> Result<Vec<PathBuf>> {
    let runs: Vec<&Trace> = traces.iter().collect();
    let velocity = dir.join(format!("{model}_velocity_force.svg"));
    draw_panels(
        &velocity,
        &format!("{model} model: task velocities and contact forces"),
        &runs,
        false,
        &[
            Panel { title: "face velocity x", unit: "m/s", value: &|s| s.pdot.x },
            Panel { title: "face velocity y", unit: "m/s", value: &|s| s.pdot.y },
            Panel { title: "face angular velocity", unit: "rad/s", value: &|s| s.thetadot },
            Panel { title: "contact force, corner 1", unit: "N", value: &|s| s.lambda[0] },
            Panel { title: "contact force, corner 2", unit: "N", value: &|s| s.lambda[1] },
        ],
    )?;
    let mut with_nominal = runs.clone();
    with_nominal.push(nominal);
    let torque = dir.join(format!("{model}_torque.svg"));
    draw_panels(
        &torque,
        &format!("{model} model: commanded torque against the nominal run"),
        &with_nominal,
        true,
        &[
            Panel { title: "joint 1", unit: "N·m", value: &|s| s.tau_star[0] },
            Panel { title: "joint 2", unit: "N·m", value: &|s| s.tau_star[1] },
            Panel { title: "joint 3", unit: "N·m", value: &|s| s.tau_star[2] },
        ],
    )?;
    Ok(vec![velocity, torque])
}
