//! Command-line front end for the graphfog experiment harness.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use graphfog_core::experiment::{
    emit_report, run_experiment, ExperimentConfig, ExperimentId, ExperimentReport, HarnessError,
    ReportFormat, Scenario, CANONICAL_APP, CANONICAL_ROAD, CANONICAL_TOPOLOGY,
};
use graphfog_core::scenario::{parse_incident_script, Validation};
use graphfog_core::topology::FaultEntry;
use graphfog_core::SimTime;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Custom,
}

impl From<Experiment> for ExperimentId {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::Exp1 => ExperimentId::Exp1,
            Experiment::Exp2 => ExperimentId::Exp2,
            Experiment::Exp3 => ExperimentId::Exp3,
            Experiment::Exp4 => ExperimentId::Exp4,
            Experiment::Custom => ExperimentId::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "graphfog",
    version,
    about = "Run fog/edge emergency-response simulation experiments"
)]
pub struct Cli {
    /// Experiment preset, or `custom` to run the scenario's own incident script.
    #[arg(value_enum)]
    pub experiment: Experiment,
    /// Road network file (nodes, edges, dispatch config).
    #[arg(long, value_name = "FILE")]
    pub scenario: Option<PathBuf>,
    /// Application description (modules, edges, sensors, actuators, placement).
    #[arg(long, value_name = "FILE")]
    pub app: Option<PathBuf>,
    /// Physical topology (devices and links).
    #[arg(long, value_name = "FILE")]
    pub topology: Option<PathBuf>,
    /// Incident script `[{atMs, zone, kind}]` for custom runs.
    #[arg(long, value_name = "FILE")]
    pub incidents: Option<PathBuf>,
    /// Fault script `[{atMs, action, ...}]` applied to every run.
    #[arg(long, value_name = "FILE")]
    pub faults: Option<PathBuf>,
    #[arg(long, env = "GRAPHFOG_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub reps: Option<u32>,
    /// Simulated horizon in milliseconds.
    #[arg(long, value_name = "MS", value_parser = parse_horizon)]
    pub horizon: Option<f64>,
    #[arg(long, value_name = "DIR", default_value = "graphfog-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json")]
    pub format: Vec<Format>,
    /// Record the wall-clock time in the report (breaks byte-identity).
    #[arg(long)]
    pub stamp: bool,
    /// Serialize transmissions on each link direction.
    #[arg(long)]
    pub serialize_links: bool,
    /// Print the summary only; write no files.
    #[arg(long)]
    pub dry_run: bool,
}

fn parse_horizon(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("horizon must be a positive number of milliseconds".into())
    }
}

/// Input files named on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioSources {
    pub road: Option<PathBuf>,
    pub app: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    pub incidents: Option<PathBuf>,
    pub faults: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub sources: ScenarioSources,
    pub dry_run: bool,
}

pub fn parse_cli<I, T>(argv: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let experiment: ExperimentId = cli.experiment.into();
    let mut config = ExperimentConfig::new(experiment, cli.seed);
    if let Some(r) = cli.reps {
        config.replications = r;
    }
    config.horizon = cli.horizon.map(SimTime::from_millis_f64);
    config.output_dir = Some(cli.out);
    config.formats = cli
        .format
        .iter()
        .map(|f| match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        })
        .collect();
    config.stamp = cli.stamp;
    config.serialize_links = cli.serialize_links;
    Ok(Invocation {
        config,
        sources: ScenarioSources {
            road: cli.scenario,
            app: cli.app,
            topology: cli.topology,
            incidents: cli.incidents,
            faults: cli.faults,
        },
        dry_run: cli.dry_run,
    })
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_or(path: &Option<PathBuf>, fallback: &str) -> Result<String, HarnessError> {
    match path {
        Some(p) => read(p),
        None => Ok(fallback.to_string()),
    }
}

pub fn load_scenario(inv: &Invocation) -> Result<Scenario, HarnessError> {
    let s = &inv.sources;
    let validation = if inv.config.experiment == ExperimentId::Custom {
        Validation::Relaxed
    } else {
        Validation::Canonical
    };
    let road = read_or(&s.road, CANONICAL_ROAD)?;
    let topology = read_or(&s.topology, CANONICAL_TOPOLOGY)?;
    let app = read_or(&s.app, CANONICAL_APP)?;
    let mut scenario = Scenario::from_texts(&road, &topology, &app, validation)?;
    if let Some(p) = &s.incidents {
        scenario.incidents = Some(parse_incident_script(&read(p)?)?);
    }
    if let Some(p) = &s.faults {
        let entries: Vec<FaultEntry> = serde_json_from(&read(p)?)?;
        scenario.faults = entries;
    }
    scenario.check()?;
    Ok(scenario)
}

fn serde_json_from<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, HarnessError> {
    Ok(serde_json::from_str(text)?)
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Human-readable digest printed after a run.
pub fn summary(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let m = &report.metadata;
    let _ = writeln!(
        s,
        "{} seed={} reps={}",
        m.experiment, m.master_seed, m.replications
    );
    for c in &report.aggregate.coordination {
        let _ = writeln!(
            s,
            "  {:<28} n={} mean={} ms sd={} ms",
            c.loop_id,
            c.n,
            fmt_opt((c.n > 0).then_some(c.mean), 4),
            fmt_opt(Some(c.variance.sqrt()), 6)
        );
    }
    for c in &report.aggregate.intervention {
        let _ = writeln!(
            s,
            "  {:<28} n={} mean={} min sd={} min",
            c.loop_id,
            c.n,
            fmt_opt((c.n > 0).then_some(c.mean), 4),
            fmt_opt(Some(c.variance.sqrt()), 6)
        );
    }
    if let Some(zones) = &report.zones {
        for z in zones {
            let _ = writeln!(
                s,
                "  zone {:<4} coordination={} ms mean intervention={} min nearest={} min units<=1.5min={}",
                z.zone,
                fmt_opt(z.coordination_latency_ms, 4),
                fmt_opt(z.mean_intervention_minutes, 4),
                fmt_opt(z.nearest_minutes, 4),
                z.units_within_1_5_min
            );
        }
    }
    if let Some(c) = &report.contention {
        let _ = writeln!(
            s,
            "  conflict rate {} shared [{}]",
            c.conflict_rate,
            c.shared_units.join(",")
        );
        let _ = writeln!(
            s,
            "  baseline {} ms, parallelism 1: {} / {} ms, parallelism 2: {} / {} ms",
            fmt_opt(c.baseline_ms, 4),
            fmt_opt(c.serial_first_ms, 4),
            fmt_opt(c.serial_second_ms, 4),
            fmt_opt(c.parallel_first_ms, 4),
            fmt_opt(c.parallel_second_ms, 4)
        );
    }
    if let Some(c) = &report.cache {
        let _ = writeln!(
            s,
            "  cache misses={} hits={} miss={} ms hit={} ms ratio={}",
            c.misses,
            c.hits,
            fmt_opt(c.miss_service_ms, 6),
            fmt_opt(c.hit_service_ms, 6),
            fmt_opt(c.ratio, 3)
        );
    }
    for r in &report.runs {
        let t = r.tuples;
        if t.dropped > 0 || !r.dispatch_failures.is_empty() {
            let _ = writeln!(
                s,
                "  {}#{}: created={} consumed={} dropped={} in-flight={} failed dispatches={}",
                r.label,
                r.replication,
                t.created,
                t.consumed,
                t.dropped,
                t.in_flight,
                r.dispatch_failures.len()
            );
        }
    }
    s
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match parse_cli(argv) {
        Ok(inv) => inv,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match execute(&inv) {
        Ok((report, files)) => {
            let _ = write!(out, "{}", summary(&report));
            for f in files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "graphfog: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(inv: &Invocation) -> Result<(ExperimentReport, Vec<PathBuf>), HarnessError> {
    let scenario = load_scenario(inv)?;
    let report = run_experiment(&inv.config, &scenario)?;
    let files = match (&inv.config.output_dir, inv.dry_run) {
        (Some(dir), false) => emit_report(&report, &inv.config.formats, dir)?,
        _ => Vec::new(),
    };
    Ok((report, files))
}
