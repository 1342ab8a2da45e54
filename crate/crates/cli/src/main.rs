use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spreadqp::experiment::{simulate, ExperimentSpec};
use spreadqp::reference::build_reference;
use spreadqp::sim::{ModelKind, SimLog};
use spreadqp::{run_experiment, LogAudit, Strategy};
use spreadqp_cli::{emit_plots, Trace};

/// Reference-spreading QP control of a planar arm striking a hinged plank.
#[derive(Parser)]
#[command(name = "spreadqp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every requested strategy and write CSV logs plus summary.txt.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip the SVG figures.
        #[arg(long)]
        no_plots: bool,
    },
    /// Draw SVG figures from the `<model>_*.csv` logs in the output directory.
    Plot {
        #[command(flatten)]
        common: Common,
    },
    /// Export the sampled ante/post reference to `<out>/reference.csv`.
    Reference {
        #[command(flatten)]
        common: Common,
        /// Sample period, s.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
    },
    /// Audit complementarity, time/mode monotonicity and QP residuals of logs.
    Check {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `rigid` or `flexible`.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Strategy to run; repeat for several. One of rs_intermediate,
    /// rs_no_intermediate, no_rs.
    #[arg(long)]
    strategy: Vec<Strategy>,
    /// Initial plank angle offset, rad.
    #[arg(long, allow_negative_numbers = true)]
    offset: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(model) = self.model {
            spec.model = model;
        }
        if !self.strategy.is_empty() {
            spec.strategies = self.strategy.clone();
        }
        if let Some(offset) = self.offset {
            spec.sim.plank_offset = offset;
        }
        if let Some(out) = &self.out {
            spec.output = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.sim.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run { common, no_plots } => {
            let mut spec = common.spec()?;
            spec.plots &= !no_plots;
            run(&spec)
        }
        Command::Plot { common } => {
            let spec = common.spec()?;
            plot(&spec)?;
            Ok(true)
        }
        Command::Reference { common, dt } => {
            let spec = common.spec()?;
            if dt.is_nan() || dt <= 0.0 {
                bail!("--dt must be positive");
            }
            let refs = build_reference(&spec.params, &spec.scenario)?;
            std::fs::create_dir_all(&spec.output)?;
            let path = spec.output.join("reference.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            refs.write_csv(&mut w, dt)?;
            std::io::Write::flush(&mut w)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Check { csv } => check(&csv),
    }
}

fn run(spec: &ExperimentSpec) -> Result<bool> {
    let report = run_experiment(spec)?;
    for r in &report.runs {
        match &r.error {
            None => println!("{}: completed, {}", spec.run_name(r.strategy), r.csv.display()),
            Some(e) => eprintln!("{}: failed: {e}", spec.run_name(r.strategy)),
        }
    }
    println!("summary: {}", report.summary.display());
    if spec.plots {
        for path in plot(spec)? {
            println!("plot: {}", path.display());
        }
    }
    Ok(report.all_completed())
}

fn plot(spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
    let traces = load_traces(&spec.output, spec.model)?;
    if traces.is_empty() {
        bail!("no {}_*.csv logs in {}", spec.model, spec.output.display());
    }
    let refs = build_reference(&spec.params, &spec.scenario)?;
    let nominal_sim = spreadqp::SimConfig { plank_offset: 0.0, offset_jitter: 0.0, ..spec.sim };
    let mut log = simulate(spec.model, &spec.params, &nominal_sim, &refs, Strategy::RsIntermediate)?;
    if let Some(e) = log.error.take() {
        bail!("nominal run failed: {e}");
    }
    let nominal = Trace { label: "nominal".into(), log };
    emit_plots(&spec.output, spec.model, &traces, &nominal)
}

/// Strategy logs of one model, in the fixed strategy order.
fn load_traces(dir: &Path, model: ModelKind) -> Result<Vec<Trace>> {
    let mut traces = Vec::new();
    for strategy in Strategy::ALL {
        let path = dir.join(format!("{model}_{strategy}.csv"));
        if path.exists() {
            let trace = Trace::load(&path)?;
            if trace.log.model != model {
                bail!("{} holds a {} log", path.display(), trace.log.model);
            }
            traces.push(trace);
        }
    }
    Ok(traces)
}

fn check(paths: &[PathBuf]) -> Result<bool> {
    let mut ok = true;
    for path in paths {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let log = SimLog::read_csv(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let audit = LogAudit::of(&log);
        let c = &audit.complementarity;
        println!(
            "{} {}: samples={} min_gap={:.3e} min_force={:.3e} max_gap_force={:.3e} violations={} monotone_time={} monotone_modes={} max_kkt={:.3e}",
            if audit.passed() { "PASS" } else { "FAIL" },
            path.display(),
            c.samples,
            c.min_gap,
            c.min_force,
            c.max_product,
            c.violations,
            audit.monotone_time,
            audit.monotone_modes,
            audit.max_kkt_residual,
        );
        ok &= audit.passed();
    }
    Ok(ok)
}
