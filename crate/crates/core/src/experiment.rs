//! Batch comparison of strategies on one plant model, written to disk as
//! per-run CSV logs plus a plain-text summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::control::{Controller, ControllerConfig, Strategy};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::params::ModelParams;
use crate::reference::{build_reference, ReferenceBundle, ReferenceSpec};
use crate::sim::{run_flex, run_rigid, ModelKind, SimConfig, SimLog};

/// Everything needed to reproduce a comparison. Every field has a default,
/// so a config file only lists what it changes.
///
/// ```toml
/// model = "flexible"
/// strategies = ["rs_intermediate", "no_rs"]
/// output = "out/flex"
///
/// [sim]
/// plank_offset = 0.03
///
/// [params]
/// task_gains = [25.0, 25.0]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    pub strategies: Vec<Strategy>,
    pub output: PathBuf,
    pub plots: bool,
    pub params: ModelParams,
    pub scenario: ReferenceSpec,
    /// `sim.controller.strategy` is replaced by each entry of `strategies`.
    pub sim: SimConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelKind::Rigid,
            strategies: Strategy::ALL.to_vec(),
            output: PathBuf::from("out"),
            plots: true,
            params: ModelParams::default(),
            scenario: ReferenceSpec::default(),
            sim: SimConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("at least one strategy is required".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::InvalidConfig(format!("strategy `{s}` listed twice")));
            }
        }
        self.params.validate()?;
        self.scenario.validate()?;
        self.sim.validate()
    }

    pub fn run_name(&self, strategy: Strategy) -> String {
        format!("{}_{}", self.model, strategy)
    }

    pub fn csv_path(&self, strategy: Strategy) -> PathBuf {
        self.output.join(format!("{}.csv", self.run_name(strategy)))
    }

    pub fn events_path(&self, strategy: Strategy) -> PathBuf {
        self.output.join(format!("{}_events.csv", self.run_name(strategy)))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output.join("summary.txt")
    }
}

/// One closed-loop run. Simulation errors end up in `SimLog::error`.
pub fn simulate(model: ModelKind, params: &ModelParams, sim: &SimConfig, refs: &ReferenceBundle, strategy: Strategy) -> Result<SimLog> {
    let mut controller = Controller::new(ControllerConfig { strategy, ..sim.controller })?;
    let config = SimConfig { controller: *controller.config(), ..*sim };
    Ok(match model {
        ModelKind::Rigid => run_rigid(params, &config, refs, &mut controller),
        ModelKind::Flexible => run_flex(params, &config, refs, &mut controller),
    })
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub strategy: Strategy,
    pub csv: PathBuf,
    pub events: PathBuf,
    pub metrics: RunMetrics,
    pub error: Option<Error>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub model: ModelKind,
    pub runs: Vec<RunReport>,
    pub summary: PathBuf,
}

impl ExperimentReport {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.error.is_none())
    }

    pub fn run(&self, strategy: Strategy) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.strategy == strategy)
    }
}

pub fn write_log(log: &SimLog, csv: &Path, events: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv)?);
    log.write_csv(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(events)?);
    log.write_events_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn summary_text(spec: &ExperimentSpec, runs: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# spreadqp experiment summary");
    let _ = writeln!(out, "model = {}", spec.model);
    let _ = writeln!(out, "plank_offset = {:.6e}", spec.sim.plank_offset);
    let _ = writeln!(out, "seed = {}", spec.sim.seed);
    for r in runs {
        let _ = writeln!(out, "\n[{}]", spec.run_name(r.strategy));
        match &r.error {
            None => {
                let _ = writeln!(out, "status = completed");
            }
            Some(e) => {
                let _ = writeln!(out, "status = error: {e}");
            }
        }
        out.push_str(&r.metrics.summary());
    }
    out
}

/// Runs every strategy in parallel, writes `<output>/<model>_<strategy>.csv`
/// with its `_events.csv` side-car, then `summary.txt`. Per-run simulation
/// failures are reported, not returned as errors.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let refs = build_reference(&spec.params, &spec.scenario)?;
    fs::create_dir_all(&spec.output)?;
    let logs: Vec<Result<SimLog>> = thread::scope(|scope| {
        let handles: Vec<_> = spec
            .strategies
            .iter()
            .map(|&strategy| {
                let refs = &refs;
                scope.spawn(move || simulate(spec.model, &spec.params, &spec.sim, refs, strategy))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut runs = Vec::with_capacity(logs.len());
    for (&strategy, log) in spec.strategies.iter().zip(logs) {
        let log = log?;
        let (csv, events) = (spec.csv_path(strategy), spec.events_path(strategy));
        write_log(&log, &csv, &events)?;
        runs.push(RunReport { strategy, csv, events, metrics: RunMetrics::of(&log, &refs), error: log.error.clone() });
    }
    let summary = spec.summary_path();
    fs::write(&summary, summary_text(spec, &runs))?;
    Ok(ExperimentReport { model: spec.model, runs, summary })
}
