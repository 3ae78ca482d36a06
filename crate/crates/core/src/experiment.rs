//! Experiment presets, replication driver and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::application::{
    place_modules, AppError, Application, ApplicationSpec, ModuleLogic, PassThrough,
};
use crate::metrics::{loop_stats, LatencyStats, SensorEnergyReport};
use crate::rng::{RngStream, GENERATOR_ID};
use crate::scenario::{
    intervention_time, parse_road_network, Coordinator, DispatchFailure, DispatchPlan,
    IncidentEntry, RoadNetwork, ScenarioError, Validation, SAS_PREFIX,
};
use crate::sim::{LatencyBreakdown, SimConfig, SimError, Simulation, TupleCounts};
use crate::time::SimTime;
use crate::topology::{build_graph, FaultEntry, TopologyError, TopologyEvent, TopologySpec};

pub const CANONICAL_ROAD: &str = include_str!("../data/road.json");
pub const CANONICAL_TOPOLOGY: &str = include_str!("../data/topology.json");
pub const CANONICAL_APP: &str = include_str!("../data/app.json");

pub const COORDINATOR_MODULE: &str = "esn-coordinator";
pub const ESN_DEVICE: &str = "esn";
/// Spacing of the consecutive incidents of the cache experiment.
pub const EXP4_SPACING_MS: f64 = 30.0 * 60_000.0;
/// Simulated time kept running after the last scripted event.
pub const DEFAULT_TAIL_MS: f64 = 60_000.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scenario error: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("application error: {0}")]
    App(#[from] AppError),
    #[error("topology error: {0}")]
    Topology(#[from] TopologyError),
    #[error("malformed input: {0}")]
    Json(#[from] serde_json::Error),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 3 for bad inputs, 4 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Scenario(_)
            | HarnessError::App(_)
            | HarnessError::Topology(_)
            | HarnessError::Json(_) => 3,
            HarnessError::Sim(_) | HarnessError::Io(_) | HarnessError::Csv(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ExperimentId {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Custom,
}

impl ExperimentId {
    pub fn default_replications(self) -> u32 {
        match self {
            ExperimentId::Exp1 => 5,
            _ => 1,
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentId::Exp1 => "exp1",
            ExperimentId::Exp2 => "exp2",
            ExperimentId::Exp3 => "exp3",
            ExperimentId::Exp4 => "exp4",
            ExperimentId::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exp1" => Ok(ExperimentId::Exp1),
            "exp2" => Ok(ExperimentId::Exp2),
            "exp3" => Ok(ExperimentId::Exp3),
            "exp4" => Ok(ExperimentId::Exp4),
            "custom" => Ok(ExperimentId::Custom),
            other => Err(HarnessError::Config(format!(
                "unknown experiment `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(HarnessError::Config(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

/// Everything a run needs besides the seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub road: Arc<RoadNetwork>,
    pub topology: TopologySpec,
    pub app: ApplicationSpec,
    /// Incident script for CUSTOM runs; presets bring their own.
    pub incidents: Option<Vec<IncidentEntry>>,
    pub faults: Vec<FaultEntry>,
}

impl Scenario {
    pub fn canonical() -> Self {
        Scenario::from_texts(
            CANONICAL_ROAD,
            CANONICAL_TOPOLOGY,
            CANONICAL_APP,
            Validation::Canonical,
        )
        .expect("shipped scenario is valid")
    }

    pub fn from_texts(
        road: &str,
        topology: &str,
        app: &str,
        validation: Validation,
    ) -> Result<Self, HarnessError> {
        let road = Arc::new(parse_road_network(road, validation)?);
        let topology = TopologySpec::from_json(topology)?;
        let app = ApplicationSpec::from_json(app)?;
        let scenario = Scenario {
            road,
            topology,
            app,
            incidents: None,
            faults: Vec::new(),
        };
        scenario.check()?;
        Ok(scenario)
    }

    /// Builds the graph and application once so errors surface before running.
    pub fn check(&self) -> Result<(), HarnessError> {
        let graph = build_graph(&self.topology)?;
        let app = Application::new(self.app.clone())?;
        place_modules(&app, &graph, &app.spec.placement)?;
        for f in &self.faults {
            f.action.validate(&graph)?;
        }
        Ok(())
    }
}

/// One simulation inside an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub incidents: Vec<IncidentEntry>,
    pub faults: Vec<FaultEntry>,
    pub esn_parallelism: Option<u32>,
    pub cache_enabled: bool,
}

impl RunSpec {
    pub fn new(label: impl Into<String>, incidents: Vec<IncidentEntry>) -> Self {
        RunSpec {
            label: label.into(),
            incidents,
            faults: Vec::new(),
            esn_parallelism: None,
            cache_enabled: true,
        }
    }

    fn default_horizon(&self) -> SimTime {
        let last = self
            .incidents
            .iter()
            .map(|i| i.at_ms)
            .chain(self.faults.iter().map(|f| f.at_ms))
            .fold(0.0, f64::max);
        SimTime::from_millis_f64(last + DEFAULT_TAIL_MS)
    }
}

pub fn fire(at_ms: f64, zone: &str) -> IncidentEntry {
    IncidentEntry {
        at_ms,
        zone: zone.to_string(),
        kind: "fire".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub master_seed: u64,
    pub replications: u32,
    /// `None` runs until a minute after the last scripted event.
    pub horizon: Option<SimTime>,
    pub output_dir: Option<PathBuf>,
    pub formats: BTreeSet<ReportFormat>,
    pub stamp: bool,
    pub serialize_links: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId, master_seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            master_seed,
            replications: experiment.default_replications(),
            horizon: None,
            output_dir: None,
            formats: BTreeSet::from([ReportFormat::Csv, ReportFormat::Json]),
            stamp: false,
            serialize_links: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(HarnessError::Config("replications must be >= 1".into()));
        }
        if self.horizon == Some(SimTime::ZERO) {
            return Err(HarnessError::Config("horizon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IncidentOutcome {
    pub incident_id: String,
    pub zone: String,
    pub kind: String,
    pub raised_at: SimTime,
    pub plan: Option<DispatchPlan>,
    pub coordination_latency_ms: Option<f64>,
    pub confirmations: usize,
    pub nearest_minutes: Option<f64>,
    pub mean_intervention_minutes: Option<f64>,
    pub max_intervention_minutes: Option<f64>,
    /// Tuples created on behalf of this incident.
    pub tuples: u64,
    /// Decomposition of the sample that sets the coordination latency.
    pub breakdown: Option<LatencyBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceLedger {
    pub device_id: String,
    pub energy_j: f64,
    pub cost: f64,
    pub parallelism_degree: u32,
    pub completed: u64,
    pub mean_service_ms: f64,
    pub mean_in_service: f64,
    pub max_queue_length: u32,
    pub throughput_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub label: String,
    pub replication: u32,
    pub seed: u64,
    pub incidents: Vec<IncidentOutcome>,
    pub dispatch_failures: Vec<DispatchFailure>,
    pub latency: Vec<LatencyStats>,
    pub devices: Vec<DeviceLedger>,
    pub sensors: Vec<SensorEnergyReport>,
    pub tuples: TupleCounts,
    pub drops: BTreeMap<String, u64>,
    pub skipped_emissions: u64,
    pub cache: CacheCounters,
    pub events_processed: u64,
    pub final_clock: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ZoneSummary {
    pub zone: String,
    pub coordination_latency_ms: Option<f64>,
    pub mean_intervention_minutes: Option<f64>,
    pub nearest_minutes: Option<f64>,
    pub max_intervention_minutes: Option<f64>,
    pub units_within_1_5_min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContentionSummary {
    pub shared_units: Vec<String>,
    pub conflict_rate: f64,
    pub baseline_ms: Option<f64>,
    pub serial_first_ms: Option<f64>,
    pub serial_second_ms: Option<f64>,
    pub parallel_first_ms: Option<f64>,
    pub parallel_second_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheSummary {
    pub hits: u64,
    pub misses: u64,
    pub miss_service_ms: Option<f64>,
    pub hit_service_ms: Option<f64>,
    pub ratio: Option<f64>,
    pub per_incident: Vec<CacheStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheStep {
    pub incident_id: String,
    pub cache_hit: bool,
    pub dijkstra_service_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub generator: String,
    pub experiment: ExperimentId,
    pub master_seed: u64,
    pub replications: u32,
    pub horizon: Option<SimTime>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Aggregate {
    /// Coordination latency per run label, one sample per incident.
    pub coordination: Vec<LatencyStats>,
    /// Mean intervention minutes per run label, one sample per incident.
    pub intervention: Vec<LatencyStats>,
    /// Loop latency per run label and loop, pooled over replications.
    pub loops: Vec<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub metadata: RunMetadata,
    pub runs: Vec<RunReport>,
    pub aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zones: Option<Vec<ZoneSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contention: Option<ContentionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheSummary>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str, replication: u32) -> Option<&RunReport> {
        self.runs
            .iter()
            .find(|r| r.label == label && r.replication == replication)
    }
}

/// Seed of replication `r`, derived from the master seed.
pub fn replication_seed(master_seed: u64, r: u32) -> u64 {
    RngStream::new(master_seed, format!("replication.{r}")).next_u64()
}

/// A simulation ready to run plus the ids given to its incidents.
pub struct PreparedRun {
    pub sim: Simulation,
    pub incident_ids: Vec<String>,
}

pub fn prepare_run(
    scenario: &Scenario,
    spec: &RunSpec,
    seed: u64,
    serialize_links: bool,
) -> Result<PreparedRun, HarnessError> {
    let mut topology = scenario.topology.clone();
    if let Some(p) = spec.esn_parallelism {
        let esn = topology
            .devices
            .iter_mut()
            .find(|d| d.id == ESN_DEVICE)
            .ok_or_else(|| HarnessError::Config(format!("no `{ESN_DEVICE}` device to resize")))?;
        esn.parallelism_degree = p;
    }
    let graph = build_graph(&topology)?;
    let app = Application::new(scenario.app.clone())?;
    let placement = place_modules(&app, &graph, &app.spec.placement)?;
    let road = Arc::clone(&scenario.road);
    let cache_enabled = spec.cache_enabled;
    let mut factory = move |m: &crate::application::ModuleSpec, _| -> Box<dyn ModuleLogic> {
        if m.name == COORDINATOR_MODULE {
            Box::new(Coordinator::new(Arc::clone(&road), cache_enabled))
        } else {
            Box::new(PassThrough)
        }
    };
    let config = SimConfig {
        master_seed: seed,
        serialize_links,
        trace_events: false,
        record_queue_samples: false,
    };
    let mut sim = Simulation::new(graph, app, placement, &mut factory, config)?;
    let mut incident_ids = Vec::with_capacity(spec.incidents.len());
    for (n, inc) in spec.incidents.iter().enumerate() {
        if scenario.road.role(&inc.zone) != Some(crate::scenario::Role::Zone) {
            return Err(ScenarioError::NotAZone(inc.zone.clone()).into());
        }
        let id = format!("i{}-{}", n + 1, inc.zone);
        let meta = BTreeMap::from([
            ("incident".to_string(), id.clone()),
            ("zone".to_string(), inc.zone.clone()),
            ("kind".to_string(), inc.kind.clone()),
        ]);
        sim.trigger_sensor(
            SimTime::from_millis_f64(inc.at_ms),
            &format!("{SAS_PREFIX}{}", inc.zone),
            meta,
        )?;
        incident_ids.push(id);
    }
    for f in &spec.faults {
        sim.schedule_topology_event(TopologyEvent {
            at: SimTime::from_millis_f64(f.at_ms),
            action: f.action.clone(),
        })?;
    }
    Ok(PreparedRun { sim, incident_ids })
}

/// The coordinator instance of a simulation, if the app has one.
pub fn coordinator(sim: &Simulation) -> Option<&Coordinator> {
    let world = sim.world();
    let hosts = world.placement().get(COORDINATOR_MODULE)?;
    hosts
        .iter()
        .find_map(|&h| world.logic::<Coordinator>(COORDINATOR_MODULE, h))
}

fn outcome(sim: &Simulation, incident: &IncidentEntry, id: &str) -> IncidentOutcome {
    let world = sim.world();
    let plan = coordinator(sim)
        .and_then(|c| c.plans.iter().find(|p| p.incident_id == id))
        .cloned();
    let samples: Vec<_> = world
        .loop_samples()
        .iter()
        .filter(|s| s.meta.get("incident").map(String::as_str) == Some(id))
        .collect();
    let unconflicted: BTreeSet<&str> = plan
        .iter()
        .flat_map(|p| {
            p.assignments
                .iter()
                .filter(|a| !a.conflicted)
                .map(|a| a.unit.as_str())
        })
        .collect();
    let is_clear = |s: &&&crate::application::LoopSample| {
        s.meta
            .get("unit")
            .is_some_and(|u| unconflicted.contains(u.as_str()))
    };
    let pool: Vec<_> = if samples.iter().any(|s| is_clear(&s)) {
        samples.iter().filter(|s| is_clear(s)).copied().collect()
    } else {
        samples.clone()
    };
    let critical = pool.iter().max_by(|a, b| {
        a.latency
            .cmp(&b.latency)
            .then_with(|| b.sink_tuple.cmp(&a.sink_tuple))
    });
    let coordination_latency_ms = critical.map(|s| s.latency_ms());
    let breakdown = critical.map(|s| world.decompose(s.sink_tuple));
    let plan = plan.map(|mut p| {
        p.coordination_latency_ms = coordination_latency_ms;
        p
    });
    let (nearest, mean, max) = match (&plan, coordination_latency_ms) {
        (Some(p), Some(_)) => {
            let times: Vec<f64> = p
                .assignments
                .iter()
                .map(|a| intervention_time(a, p))
                .collect();
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            (
                times.iter().copied().reduce(f64::min),
                Some(mean),
                times.iter().copied().reduce(f64::max),
            )
        }
        _ => (None, None, None),
    };
    let tuples = world
        .tuples()
        .iter()
        .filter(|r| r.tuple.meta.get("incident").map(String::as_str) == Some(id))
        .count() as u64;
    IncidentOutcome {
        incident_id: id.to_string(),
        zone: incident.zone.clone(),
        kind: incident.kind.clone(),
        raised_at: SimTime::from_millis_f64(incident.at_ms),
        plan,
        coordination_latency_ms,
        confirmations: samples.len(),
        nearest_minutes: nearest,
        mean_intervention_minutes: mean,
        max_intervention_minutes: max,
        tuples,
        breakdown,
    }
}

/// Runs one simulation and condenses it into a report block.
pub fn run_once(
    scenario: &Scenario,
    spec: &RunSpec,
    replication: u32,
    seed: u64,
    horizon: Option<SimTime>,
    serialize_links: bool,
) -> Result<RunReport, HarnessError> {
    let PreparedRun {
        mut sim,
        incident_ids,
    } = prepare_run(scenario, spec, seed, serialize_links)?;
    let horizon = horizon.unwrap_or_else(|| spec.default_horizon());
    sim.run_until(horizon);
    let world = sim.world();
    let incidents = spec
        .incidents
        .iter()
        .zip(&incident_ids)
        .map(|(inc, id)| outcome(&sim, inc, id))
        .collect();
    let mut by_loop: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in world.loop_samples() {
        by_loop
            .entry(s.loop_id.as_str())
            .or_default()
            .push(s.latency_ms());
    }
    let latency = by_loop
        .into_iter()
        .map(|(id, xs)| loop_stats(id, &xs))
        .collect();
    let now = sim.now();
    let devices = world
        .graph()
        .devices()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let t = &world.telemetry()[i];
            DeviceLedger {
                device_id: d.id.clone(),
                energy_j: world.energy()[i].total_joules,
                cost: world.cost()[i].total_cost,
                parallelism_degree: d.parallelism_degree,
                completed: t.completed,
                mean_service_ms: t.mean_service_time_secs() * 1e3,
                mean_in_service: t.mean_in_service(now),
                max_queue_length: t.max_queue_length,
                throughput_per_s: t.throughput(now),
            }
        })
        .collect();
    let drops = world
        .drops()
        .iter()
        .map(|(k, v)| {
            (
                serde_json::to_value(k)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                *v,
            )
        })
        .collect();
    let (cache, dispatch_failures) = match coordinator(&sim) {
        Some(c) => (
            CacheCounters {
                hits: c.cache.hits,
                misses: c.cache.misses,
            },
            c.failures.clone(),
        ),
        None => (CacheCounters { hits: 0, misses: 0 }, Vec::new()),
    };
    Ok(RunReport {
        label: spec.label.clone(),
        replication,
        seed,
        incidents,
        dispatch_failures,
        latency,
        devices,
        sensors: world.sensor_reports(),
        tuples: world.counts(),
        drops,
        skipped_emissions: world.skipped_emissions(),
        cache,
        events_processed: sim.events_processed(),
        final_clock: now,
    })
}

fn with_faults(mut spec: RunSpec, faults: &[FaultEntry]) -> RunSpec {
    spec.faults.extend_from_slice(faults);
    spec
}

/// The runs an experiment consists of, per replication.
pub fn experiment_runs(experiment: ExperimentId, scenario: &Scenario) -> Vec<RunSpec> {
    let runs = match experiment {
        ExperimentId::Exp1 => vec![RunSpec::new("z1", vec![fire(0.0, "z1")])],
        ExperimentId::Exp2 => scenario
            .road
            .zones()
            .into_iter()
            .map(|z| RunSpec::new(z.clone(), vec![fire(0.0, &z)]))
            .collect(),
        ExperimentId::Exp3 => {
            let dual = vec![fire(0.0, "z1"), fire(0.0, "z2")];
            vec![
                RunSpec {
                    esn_parallelism: Some(1),
                    ..RunSpec::new("baseline", vec![fire(0.0, "z2")])
                },
                RunSpec {
                    esn_parallelism: Some(1),
                    ..RunSpec::new("serial", dual.clone())
                },
                RunSpec {
                    esn_parallelism: Some(2),
                    ..RunSpec::new("parallel", dual)
                },
            ]
        }
        ExperimentId::Exp4 => {
            vec![RunSpec::new(
                "z1x5",
                (0..5)
                    .map(|i| fire(f64::from(i) * EXP4_SPACING_MS, "z1"))
                    .collect(),
            )]
        }
        ExperimentId::Custom => {
            let incidents = scenario
                .incidents
                .clone()
                .unwrap_or_else(|| vec![fire(0.0, "z1")]);
            vec![RunSpec::new("custom", incidents)]
        }
    };
    runs.into_iter()
        .map(|r| with_faults(r, &scenario.faults))
        .collect()
}

type Job = (usize, u32, u64);

#[cfg(not(target_arch = "wasm32"))]
fn execute(
    jobs: &[Job],
    specs: &[RunSpec],
    scenario: &Scenario,
    config: &ExperimentConfig,
) -> Vec<Result<RunReport, HarnessError>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .max(1);
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, r, seed)| {
                    s.spawn(move || {
                        run_once(
                            scenario,
                            &specs[i],
                            r,
                            seed,
                            config.horizon,
                            config.serialize_links,
                        )
                    })
                })
                .collect();
            out.extend(
                handles
                    .into_iter()
                    .map(|h| h.join().expect("replication thread panicked")),
            );
        });
    }
    out
}

#[cfg(target_arch = "wasm32")]
fn execute(
    jobs: &[Job],
    specs: &[RunSpec],
    scenario: &Scenario,
    config: &ExperimentConfig,
) -> Vec<Result<RunReport, HarnessError>> {
    jobs.iter()
        .map(|&(i, r, seed)| {
            run_once(
                scenario,
                &specs[i],
                r,
                seed,
                config.horizon,
                config.serialize_links,
            )
        })
        .collect()
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(runs: &[RunReport], specs: &[RunSpec]) -> Aggregate {
    let mut coordination = Vec::new();
    let mut intervention = Vec::new();
    let mut loops = Vec::new();
    for spec in specs {
        let mine: Vec<&RunReport> = runs.iter().filter(|r| r.label == spec.label).collect();
        let coord: Vec<f64> = mine
            .iter()
            .flat_map(|r| r.incidents.iter().filter_map(|i| i.coordination_latency_ms))
            .collect();
        let inter: Vec<f64> = mine
            .iter()
            .flat_map(|r| {
                r.incidents
                    .iter()
                    .filter_map(|i| i.mean_intervention_minutes)
            })
            .collect();
        coordination.push(loop_stats(format!("{}/coordination", spec.label), &coord));
        intervention.push(loop_stats(format!("{}/intervention", spec.label), &inter));
        let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &mine {
            for l in &r.latency {
                pooled
                    .entry(l.loop_id.clone())
                    .or_default()
                    .extend_from_slice(&l.samples_ms);
            }
        }
        for (id, xs) in pooled {
            loops.push(loop_stats(format!("{}/{}", spec.label, id), &xs));
        }
    }
    Aggregate {
        coordination,
        intervention,
        loops,
    }
}

fn zone_summaries(runs: &[RunReport], specs: &[RunSpec]) -> Vec<ZoneSummary> {
    specs
        .iter()
        .map(|spec| {
            let incs: Vec<&IncidentOutcome> = runs
                .iter()
                .filter(|r| r.label == spec.label)
                .flat_map(|r| r.incidents.first())
                .collect();
            let within = incs.first().and_then(|i| i.plan.as_ref()).map_or(0, |p| {
                p.assignments
                    .iter()
                    .filter(|a| a.travel_minutes <= 1.5)
                    .count()
            });
            ZoneSummary {
                zone: spec.label.clone(),
                coordination_latency_ms: mean_of(incs.iter().map(|i| i.coordination_latency_ms)),
                mean_intervention_minutes: mean_of(
                    incs.iter().map(|i| i.mean_intervention_minutes),
                ),
                nearest_minutes: mean_of(incs.iter().map(|i| i.nearest_minutes)),
                max_intervention_minutes: mean_of(incs.iter().map(|i| i.max_intervention_minutes)),
                units_within_1_5_min: within,
            }
        })
        .collect()
}

fn contention_summary(runs: &[RunReport]) -> ContentionSummary {
    let first = |label: &str| runs.iter().find(|r| r.label == label && r.replication == 0);
    let latency = |label: &str, k: usize| {
        first(label)
            .and_then(|r| r.incidents.get(k))
            .and_then(|i| i.coordination_latency_ms)
    };
    let serial = first("serial");
    let later = serial
        .and_then(|r| r.incidents.get(1))
        .and_then(|i| i.plan.as_ref());
    ContentionSummary {
        shared_units: later.map_or_else(Vec::new, |p| {
            p.assignments
                .iter()
                .filter(|a| a.conflicted)
                .map(|a| a.unit.clone())
                .collect()
        }),
        conflict_rate: later.map_or(0.0, |p| p.conflict_rate),
        baseline_ms: latency("baseline", 0),
        serial_first_ms: latency("serial", 0),
        serial_second_ms: latency("serial", 1),
        parallel_first_ms: latency("parallel", 0),
        parallel_second_ms: latency("parallel", 1),
    }
}

fn cache_summary(runs: &[RunReport]) -> CacheSummary {
    let run = runs.iter().find(|r| r.replication == 0);
    let per_incident: Vec<CacheStep> = run
        .map(|r| {
            r.incidents
                .iter()
                .filter_map(|i| i.plan.as_ref())
                .map(|p| CacheStep {
                    incident_id: p.incident_id.clone(),
                    cache_hit: p.cache_hit,
                    dijkstra_service_ms: p.dijkstra_service.as_millis_f64(),
                })
                .collect()
        })
        .unwrap_or_default();
    let miss = per_incident
        .iter()
        .find(|s| !s.cache_hit)
        .map(|s| s.dijkstra_service_ms);
    let hit = per_incident
        .iter()
        .find(|s| s.cache_hit)
        .map(|s| s.dijkstra_service_ms);
    CacheSummary {
        hits: run.map_or(0, |r| r.cache.hits),
        misses: run.map_or(0, |r| r.cache.misses),
        miss_service_ms: miss,
        hit_service_ms: hit,
        ratio: miss.zip(hit).and_then(|(m, h)| (h > 0.0).then(|| m / h)),
        per_incident,
    }
}

fn unix_stamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

pub fn run_experiment(
    config: &ExperimentConfig,
    scenario: &Scenario,
) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let specs = experiment_runs(config.experiment, scenario);
    let mut jobs: Vec<Job> = Vec::new();
    for r in 0..config.replications {
        let seed = replication_seed(config.master_seed, r);
        for i in 0..specs.len() {
            jobs.push((i, r, seed));
        }
    }
    let runs = execute(&jobs, &specs, scenario, config)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = aggregate(&runs, &specs);
    let zones = (config.experiment == ExperimentId::Exp2).then(|| zone_summaries(&runs, &specs));
    let contention = (config.experiment == ExperimentId::Exp3).then(|| contention_summary(&runs));
    let cache = (config.experiment == ExperimentId::Exp4).then(|| cache_summary(&runs));
    Ok(ExperimentReport {
        metadata: RunMetadata {
            tool: "graphfog".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            generator: GENERATOR_ID.into(),
            experiment: config.experiment,
            master_seed: config.master_seed,
            replications: config.replications,
            horizon: config.horizon,
            generated_at: config.stamp.then(unix_stamp),
        },
        runs,
        aggregate,
        zones,
        contention,
        cache,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn stats_row(s: &LatencyStats) -> Vec<String> {
    vec![
        s.loop_id.clone(),
        s.n.to_string(),
        if s.n == 0 {
            String::new()
        } else {
            s.mean.to_string()
        },
        s.variance.to_string(),
        opt(s.ci95.map(|c| c.0)),
        opt(s.ci95.map(|c| c.1)),
    ]
}

/// Writes `report.json` and/or one CSV per ledger into `dir`; returns the
/// files written in a fixed order.
pub fn emit_report(
    report: &ExperimentReport,
    formats: &BTreeSet<ReportFormat>,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        let path = dir.join("latency.csv");
        let agg = &report.aggregate;
        let rows = agg
            .loops
            .iter()
            .chain(&agg.coordination)
            .map(stats_row)
            .collect();
        write_csv(
            &path,
            &[
                "loop_id",
                "n",
                "mean_ms",
                "variance_ms2",
                "ci95_low_ms",
                "ci95_high_ms",
            ],
            rows,
        )?;
        written.push(path);

        let path = dir.join("incidents.csv");
        let mut rows = Vec::new();
        for r in &report.runs {
            for i in &r.incidents {
                let p = i.plan.as_ref();
                rows.push(vec![
                    r.label.clone(),
                    r.replication.to_string(),
                    i.incident_id.clone(),
                    i.zone.clone(),
                    i.kind.clone(),
                    i.raised_at.as_millis_f64().to_string(),
                    opt(i.coordination_latency_ms),
                    i.confirmations.to_string(),
                    opt(i.nearest_minutes),
                    opt(i.mean_intervention_minutes),
                    opt(i.max_intervention_minutes),
                    opt(p.map(|p| p.conflict_rate)),
                    p.map(|p| p.cache_hit.to_string()).unwrap_or_default(),
                    opt(p.map(|p| p.dijkstra_service.as_millis_f64())),
                    i.tuples.to_string(),
                ]);
            }
        }
        write_csv(
            &path,
            &[
                "run",
                "replication",
                "incident",
                "zone",
                "kind",
                "raised_at_ms",
                "coordination_ms",
                "confirmations",
                "nearest_min",
                "mean_intervention_min",
                "max_intervention_min",
                "conflict_rate",
                "cache_hit",
                "dijkstra_service_ms",
                "tuples",
            ],
            rows,
        )?;
        written.push(path);

        let path = dir.join("assignments.csv");
        let mut rows = Vec::new();
        for r in &report.runs {
            for i in &r.incidents {
                let Some(p) = &i.plan else { continue };
                for (rank, a) in p.assignments.iter().enumerate() {
                    rows.push(vec![
                        r.label.clone(),
                        r.replication.to_string(),
                        i.incident_id.clone(),
                        (rank + 1).to_string(),
                        a.unit.clone(),
                        serde_json::to_value(a.role)?
                            .as_str()
                            .unwrap_or_default()
                            .to_string(),
                        a.distance_km.to_string(),
                        a.travel_minutes.to_string(),
                        a.conflicted.to_string(),
                        intervention_time(a, p).to_string(),
                    ]);
                }
            }
        }
        write_csv(
            &path,
            &[
                "run",
                "replication",
                "incident",
                "rank",
                "unit",
                "role",
                "distance_km",
                "travel_min",
                "conflicted",
                "intervention_min",
            ],
            rows,
        )?;
        written.push(path);

        let path = dir.join("devices.csv");
        let mut rows = Vec::new();
        for r in &report.runs {
            for d in &r.devices {
                rows.push(vec![
                    r.label.clone(),
                    r.replication.to_string(),
                    d.device_id.clone(),
                    d.energy_j.to_string(),
                    d.cost.to_string(),
                    d.parallelism_degree.to_string(),
                    d.completed.to_string(),
                    d.mean_service_ms.to_string(),
                    d.mean_in_service.to_string(),
                    d.max_queue_length.to_string(),
                    d.throughput_per_s.to_string(),
                ]);
            }
        }
        write_csv(
            &path,
            &[
                "run",
                "replication",
                "device_id",
                "energy_j",
                "cost",
                "parallelism",
                "completed",
                "mean_service_ms",
                "mean_in_service",
                "max_queue_length",
                "throughput_per_s",
            ],
            rows,
        )?;
        written.push(path);

        let path = dir.join("sensors.csv");
        let mut rows = Vec::new();
        for r in &report.runs {
            for s in &r.sensors {
                rows.push(vec![
                    r.label.clone(),
                    r.replication.to_string(),
                    s.sensor_id.clone(),
                    s.emissions.to_string(),
                    s.energy_spent_milli_j.to_string(),
                    opt(s.remaining_milli_j),
                    opt(s.depleted_at.map(SimTime::as_millis_f64)),
                ]);
            }
        }
        write_csv(
            &path,
            &[
                "run",
                "replication",
                "sensor_id",
                "emissions",
                "energy_spent_mj",
                "remaining_mj",
                "depleted_at_ms",
            ],
            rows,
        )?;
        written.push(path);

        let path = dir.join("tuples.csv");
        let rows = report
            .runs
            .iter()
            .map(|r| {
                let t = r.tuples;
                vec![
                    r.label.clone(),
                    r.replication.to_string(),
                    t.created.to_string(),
                    t.consumed.to_string(),
                    t.dropped.to_string(),
                    t.in_flight.to_string(),
                    r.skipped_emissions.to_string(),
                    r.cache.hits.to_string(),
                    r.cache.misses.to_string(),
                ]
            })
            .collect();
        write_csv(
            &path,
            &[
                "run",
                "replication",
                "created",
                "consumed",
                "dropped",
                "in_flight",
                "skipped_emissions",
                "cache_hits",
                "cache_misses",
            ],
            rows,
        )?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Json) {
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
