//! Application model: a DAG of modules joined by typed edges, fed by sensors
//! and drained by actuators.
//!
//! Modules are stateful. Each placed instance owns a [`StateStore`] and a
//! [`ModuleLogic`] whose hooks run when a tuple enters service.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::RngStream;
use crate::time::SimTime;
use crate::topology::{compute_service_time, Device, DeviceIdx, PhysicalGraph, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Up,
    Down,
    Actuator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TupleId(pub u64);

/// One network hop: the device reached and how long the hop took.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HopRecord {
    pub device: String,
    pub arrival: SimTime,
    /// Time spent waiting for a serialized link to free up.
    pub link_wait: SimTime,
    pub propagation: SimTime,
    pub transmission: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Tuple {
    pub id: TupleId,
    pub app_id: String,
    pub tuple_type: String,
    pub direction: Direction,
    pub cloudlet_length_mi: f64,
    pub file_size_bits: u64,
    pub src_module: String,
    pub dst_module: String,
    pub created_at: SimTime,
    pub loop_tags: BTreeSet<String>,
    pub hop_trace: Vec<HopRecord>,
    pub parent: Option<TupleId>,
    /// The sensor tuple this one descends from, and its creation time.
    pub origin: TupleId,
    pub origin_created_at: SimTime,
    /// Preferred device for the destination instance (e.g. a chosen unit).
    pub target_hint: Option<String>,
    /// Free-form annotations inherited by descendants.
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum Selectivity {
    #[default]
    Always,
    Fractional {
        p: f64,
    },
}

impl Selectivity {
    pub fn fires(&self, rng: &mut RngStream) -> bool {
        match *self {
            Selectivity::Always => true,
            Selectivity::Fractional { p } => rng.bernoulli(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppEdge {
    /// A module name or a sensor tuple type.
    pub src: String,
    /// A module name or an actuator type.
    pub dst: String,
    #[serde(rename = "type")]
    pub tuple_type: String,
    pub direction: Direction,
    #[serde(rename = "tupleMI")]
    pub tuple_mi: f64,
    pub tuple_size_bits: u64,
    #[serde(default)]
    pub selectivity: Selectivity,
    /// Workload of the original design, kept for reference when `tuple_mi`
    /// is a calibrated value.
    #[serde(
        default,
        rename = "referenceMI",
        skip_serializing_if = "Option::is_none"
    )]
    pub reference_mi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModuleSpec {
    pub name: String,
    #[serde(default)]
    pub ram_mb: u32,
    /// Restricts hosts to devices carrying this tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_tag: Option<String>,
    /// Place an instance on every qualifying device of the chosen tier.
    #[serde(default)]
    pub replicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sensor {
    pub id: String,
    pub attached_device: String,
    pub tuple_type: String,
    #[serde(default)]
    pub latency_ms: f64,
    /// Mean emission period; 0 means the sensor only fires when triggered.
    #[serde(default)]
    pub nominal_interval_ms: f64,
    #[serde(default = "default_jitter")]
    pub jitter_fraction: f64,
    /// `None` models a mains-powered sensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_capacity_milli_j: Option<f64>,
    #[serde(default)]
    pub tx_energy_per_tuple_milli_j: f64,
    #[serde(default)]
    pub emitted: u64,
}

fn default_jitter() -> f64 {
    0.02
}

/// Floor applied to jittered emission intervals.
pub const MIN_EMISSION_INTERVAL: SimTime = SimTime::from_millis(1);

impl Sensor {
    pub fn remaining_milli_j(&self) -> Option<f64> {
        self.battery_capacity_milli_j
            .map(|cap| (cap - self.emitted as f64 * self.tx_energy_per_tuple_milli_j).max(0.0))
    }

    pub fn energy_spent_milli_j(&self) -> f64 {
        self.emitted as f64 * self.tx_energy_per_tuple_milli_j
    }

    /// True once the battery cannot fund another transmission.
    pub fn is_depleted(&self) -> bool {
        match self.battery_capacity_milli_j {
            None => false,
            Some(cap) => {
                let needed = (self.emitted + 1) as f64 * self.tx_energy_per_tuple_milli_j;
                needed > cap * (1.0 + 1e-12)
            }
        }
    }

    pub fn is_periodic(&self) -> bool {
        self.nominal_interval_ms > 0.0
    }

    /// `max(1ms, N(nominal, jitter·nominal))`, clipped at ±3σ.
    pub fn next_interval(&self, rng: &mut RngStream) -> SimTime {
        let sigma = self.jitter_fraction * self.nominal_interval_ms;
        let ms = rng.truncated_gaussian(self.nominal_interval_ms, sigma, 3.0);
        SimTime::from_millis_f64(ms.max(0.0)).max(MIN_EMISSION_INTERVAL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Actuator {
    pub id: String,
    pub actuator_type: String,
    pub attached_device: String,
    #[serde(default)]
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppLoop {
    pub id: String,
    /// Source sensor type, then modules, then the sink.
    pub modules: Vec<String>,
}

impl AppLoop {
    pub fn contains_step(&self, from: &str, to: &str) -> bool {
        self.modules.windows(2).any(|w| w[0] == from && w[1] == to)
    }

    pub fn sink(&self) -> &str {
        self.modules.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlacementPolicy {
    CloudOnly,
    Edgeward,
    Explicit { map: BTreeMap<String, Vec<String>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApplicationSpec {
    pub app_id: String,
    pub modules: Vec<ModuleSpec>,
    pub edges: Vec<AppEdge>,
    #[serde(default)]
    pub sensors: Vec<Sensor>,
    #[serde(default)]
    pub actuators: Vec<Actuator>,
    #[serde(default)]
    pub loops: Vec<AppLoop>,
    #[serde(default = "default_placement")]
    pub placement: PlacementPolicy,
}

fn default_placement() -> PlacementPolicy {
    PlacementPolicy::Edgeward
}

impl ApplicationSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("edge references unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("application graph has a cycle through `{0}`")]
    Cycle(String),
    #[error("loop `{id}` has no edge {from} -> {to}")]
    BrokenLoop {
        id: String,
        from: String,
        to: String,
    },
    #[error("duplicate name `{0}`")]
    Duplicate(String),
    #[error("module `{0}` cannot be placed")]
    UnplaceableModule(String),
    #[error("module `{0}` is not placed")]
    ModuleNotPlaced(String),
    #[error("selectivity for edge {0} -> {1} is outside [0, 1]")]
    BadSelectivity(String, String),
    #[error("{0}")]
    Topology(#[from] TopologyError),
    #[error("sensor `{0}` attached to unknown device")]
    UnknownAttachment(String),
}

/// A validated application.
#[derive(Debug, Clone, PartialEq)]
pub struct Application {
    pub spec: ApplicationSpec,
    modules: BTreeMap<String, usize>,
}

impl Application {
    pub fn new(spec: ApplicationSpec) -> Result<Self, AppError> {
        let mut modules = BTreeMap::new();
        for (i, m) in spec.modules.iter().enumerate() {
            if modules.insert(m.name.clone(), i).is_some() {
                return Err(AppError::Duplicate(m.name.clone()));
            }
        }
        let sources: BTreeSet<&str> = spec.sensors.iter().map(|s| s.tuple_type.as_str()).collect();
        let sinks: BTreeSet<&str> = spec
            .actuators
            .iter()
            .map(|a| a.actuator_type.as_str())
            .collect();
        let mut seen = BTreeSet::new();
        for s in &spec.sensors {
            if !seen.insert(s.id.as_str()) {
                return Err(AppError::Duplicate(s.id.clone()));
            }
        }
        for a in &spec.actuators {
            if !seen.insert(a.id.as_str()) {
                return Err(AppError::Duplicate(a.id.clone()));
            }
        }
        for e in &spec.edges {
            if !modules.contains_key(&e.src) && !sources.contains(e.src.as_str()) {
                return Err(AppError::UnknownEndpoint(e.src.clone()));
            }
            if !modules.contains_key(&e.dst) && !sinks.contains(e.dst.as_str()) {
                return Err(AppError::UnknownEndpoint(e.dst.clone()));
            }
            if let Selectivity::Fractional { p } = e.selectivity {
                if !(0.0..=1.0).contains(&p) {
                    return Err(AppError::BadSelectivity(e.src.clone(), e.dst.clone()));
                }
            }
        }
        check_acyclic(&spec.edges)?;
        for l in &spec.loops {
            for w in l.modules.windows(2) {
                if !spec.edges.iter().any(|e| e.src == w[0] && e.dst == w[1]) {
                    return Err(AppError::BrokenLoop {
                        id: l.id.clone(),
                        from: w[0].clone(),
                        to: w[1].clone(),
                    });
                }
            }
        }
        Ok(Application { spec, modules })
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.modules.get(name).map(|&i| &self.spec.modules[i])
    }

    pub fn is_module(&self, name: &str) -> bool {
        self.modules.contains_key(name)
    }

    pub fn outgoing<'a>(&'a self, src: &'a str) -> impl Iterator<Item = (usize, &'a AppEdge)> + 'a {
        self.spec
            .edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.src == src)
    }

    pub fn edge(&self, i: usize) -> &AppEdge {
        &self.spec.edges[i]
    }
}

fn check_acyclic(edges: &[AppEdge]) -> Result<(), AppError> {
    let mut indeg: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in edges {
        indeg.entry(&e.src).or_insert(0);
        *indeg.entry(&e.dst).or_insert(0) += 1;
        out.entry(&e.src).or_default().push(&e.dst);
    }
    let mut ready: VecDeque<&str> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&n, _)| n)
        .collect();
    let mut visited = 0;
    while let Some(n) = ready.pop_front() {
        visited += 1;
        for &m in out.get(n).into_iter().flatten() {
            let d = indeg.get_mut(m).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.push_back(m);
            }
        }
    }
    if visited == indeg.len() {
        Ok(())
    } else {
        let stuck = indeg
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        Err(AppError::Cycle(stuck))
    }
}

/// Module name → host devices.
pub type Placement = BTreeMap<String, Vec<DeviceIdx>>;

fn fits(module: &ModuleSpec, device: &Device) -> bool {
    device.is_up()
        && device.ram_mb >= module.ram_mb
        && module.host_tag.as_deref().is_none_or(|t| device.has_tag(t))
}

pub fn place_modules(
    app: &Application,
    graph: &PhysicalGraph,
    policy: &PlacementPolicy,
) -> Result<Placement, AppError> {
    let mut placement = Placement::new();
    match policy {
        PlacementPolicy::CloudOnly => {
            let cloud = graph
                .device_indices()
                .find(|&d| graph.device(d).has_tag("cloud") && graph.device(d).is_up());
            for m in &app.spec.modules {
                let host = cloud.ok_or_else(|| AppError::UnplaceableModule(m.name.clone()))?;
                placement.insert(m.name.clone(), vec![host]);
            }
        }
        PlacementPolicy::Edgeward => {
            for m in &app.spec.modules {
                let mut candidates: Vec<DeviceIdx> = graph
                    .device_indices()
                    .filter(|&d| fits(m, graph.device(d)))
                    .collect();
                let edge_level = candidates
                    .iter()
                    .map(|&d| graph.device(d).level)
                    .max()
                    .ok_or_else(|| AppError::UnplaceableModule(m.name.clone()))?;
                candidates.retain(|&d| graph.device(d).level == edge_level);
                candidates.sort_by(|&a, &b| graph.id(a).cmp(graph.id(b)));
                if !m.replicate {
                    candidates.truncate(1);
                }
                placement.insert(m.name.clone(), candidates);
            }
        }
        PlacementPolicy::Explicit { map } => {
            for m in &app.spec.modules {
                let hosts = map.get(&m.name).filter(|h| !h.is_empty());
                let hosts = hosts.ok_or_else(|| AppError::UnplaceableModule(m.name.clone()))?;
                let mut idx = Vec::with_capacity(hosts.len());
                for h in hosts {
                    let d = graph
                        .lookup(h)
                        .ok_or_else(|| AppError::UnplaceableModule(m.name.clone()))?;
                    if !fits(m, graph.device(d)) {
                        return Err(AppError::UnplaceableModule(m.name.clone()));
                    }
                    idx.push(d);
                }
                placement.insert(m.name.clone(), idx);
            }
            if let Some(extra) = map.keys().find(|k| !app.is_module(k)) {
                return Err(AppError::UnplaceableModule(extra.clone()));
            }
        }
    }
    Ok(placement)
}

/// Module-private persistent key/value state.
pub type StateStore = BTreeMap<String, Value>;

/// Serialized module state produced by `on_checkpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint(pub Value);

/// A tuple a module asks to send along one of its outgoing edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub edge: usize,
    pub target_hint: Option<String>,
    pub meta: BTreeMap<String, String>,
}

/// What a module sees while processing one tuple.
pub struct ArrivalContext<'a> {
    pub app: &'a Application,
    pub module: &'a str,
    pub host: &'a Device,
    pub now: SimTime,
    pub state: &'a mut StateStore,
    extra_mi: f64,
    emissions: Vec<Emission>,
}

impl ArrivalContext<'_> {
    /// Adds MI on top of the tuple's own cloudlet length.
    pub fn charge_mi(&mut self, mi: f64) {
        debug_assert!(mi >= 0.0);
        self.extra_mi += mi;
    }

    pub fn extra_mi(&self) -> f64 {
        self.extra_mi
    }

    pub fn emit(&mut self, emission: Emission) {
        self.emissions.push(emission);
    }

    /// One emission per outgoing edge, untargeted.
    pub fn emit_all_outgoing(&mut self) {
        let edges: Vec<usize> = self.app.outgoing(self.module).map(|(i, _)| i).collect();
        for edge in edges {
            self.emissions.push(Emission {
                edge,
                target_hint: None,
                meta: BTreeMap::new(),
            });
        }
    }
}

/// Lifecycle hooks of a stateful module instance.
pub trait ModuleLogic: Send {
    fn on_init(&mut self, _state: &mut StateStore) {}

    /// Runs when a tuple enters service. Emissions are subject to the edge's
    /// selectivity and leave the module when service completes.
    fn on_tuple_arrival(&mut self, ctx: &mut ArrivalContext<'_>, tuple: &Tuple);

    fn on_checkpoint(&self, state: &StateStore) -> Checkpoint {
        Checkpoint(serde_json::to_value(state).expect("state is JSON"))
    }

    fn on_restore(&mut self, state: &mut StateStore, checkpoint: &Checkpoint) {
        *state = serde_json::from_value(checkpoint.0.clone()).unwrap_or_default();
    }

    fn as_any(&self) -> &dyn Any;
}

/// Forwards every input along all outgoing edges.
#[derive(Debug, Default, Clone)]
pub struct PassThrough;

impl ModuleLogic for PassThrough {
    fn on_tuple_arrival(&mut self, ctx: &mut ArrivalContext<'_>, _tuple: &Tuple) {
        ctx.emit_all_outgoing();
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// A placed module: name, host and private state.
pub struct AppModule {
    pub name: String,
    pub host: DeviceIdx,
    pub state: StateStore,
    pub logic: Box<dyn ModuleLogic>,
}

impl AppModule {
    pub fn new(name: impl Into<String>, host: DeviceIdx, mut logic: Box<dyn ModuleLogic>) -> Self {
        let mut state = StateStore::new();
        logic.on_init(&mut state);
        AppModule {
            name: name.into(),
            host,
            state,
            logic,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.logic.on_checkpoint(&self.state)
    }

    pub fn restore(&mut self, checkpoint: &Checkpoint) {
        self.logic.on_restore(&mut self.state, checkpoint);
    }
}

impl std::fmt::Debug for AppModule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppModule")
            .field("name", &self.name)
            .field("host", &self.host)
            .field("state", &self.state)
            .finish()
    }
}

/// Hands out tuple ids in creation order.
#[derive(Debug, Default, Clone)]
pub struct TupleIdGen(u64);

impl TupleIdGen {
    pub fn next_id(&mut self) -> TupleId {
        let id = TupleId(self.0);
        self.0 += 1;
        id
    }

    pub fn issued(&self) -> u64 {
        self.0
    }
}

/// Per-edge selectivity streams, created lazily.
#[derive(Debug)]
pub struct SelectivityStreams {
    master_seed: u64,
    streams: BTreeMap<usize, RngStream>,
}

impl SelectivityStreams {
    pub fn new(master_seed: u64) -> Self {
        SelectivityStreams {
            master_seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn for_edge(&mut self, app: &Application, edge: usize) -> &mut RngStream {
        let seed = self.master_seed;
        self.streams.entry(edge).or_insert_with(|| {
            let e = app.edge(edge);
            RngStream::new(
                seed,
                format!("selectivity.{}->{}:{}", e.src, e.dst, e.tuple_type),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensorEmission {
    Emitted {
        tuple: Box<Tuple>,
        next_emission: Option<SimTime>,
    },
    Halted,
}

fn tags_for_step(
    app: &Application,
    inherited: Option<&BTreeSet<String>>,
    from: &str,
    to: &str,
) -> BTreeSet<String> {
    app.spec
        .loops
        .iter()
        .filter(|l| l.contains_step(from, to))
        .filter(|l| match inherited {
            Some(tags) => tags.contains(&l.id),
            None => l.modules.first().is_some_and(|m| m == from),
        })
        .map(|l| l.id.clone())
        .collect()
}

/// Emits one tuple from `sensor` and charges its battery.
pub fn emit_sensor_tuple(
    sensor: &mut Sensor,
    attached: &Device,
    app: &Application,
    now: SimTime,
    rng: &mut RngStream,
    ids: &mut TupleIdGen,
) -> Result<SensorEmission, AppError> {
    if !attached.is_up() {
        return Err(TopologyError::DeviceDown(attached.id.clone()).into());
    }
    if sensor.is_depleted() {
        return Ok(SensorEmission::Halted);
    }
    let (_, edge) = app
        .outgoing(&sensor.tuple_type)
        .next()
        .ok_or_else(|| AppError::UnknownEndpoint(sensor.tuple_type.clone()))?;
    sensor.emitted += 1;
    let id = ids.next_id();
    let tuple = Tuple {
        id,
        app_id: app.spec.app_id.clone(),
        tuple_type: edge.tuple_type.clone(),
        direction: edge.direction,
        cloudlet_length_mi: edge.tuple_mi,
        file_size_bits: edge.tuple_size_bits,
        src_module: sensor.tuple_type.clone(),
        dst_module: edge.dst.clone(),
        created_at: now,
        loop_tags: tags_for_step(app, None, &edge.src, &edge.dst),
        hop_trace: Vec::new(),
        parent: None,
        origin: id,
        origin_created_at: now,
        target_hint: None,
        meta: BTreeMap::new(),
    };
    let next_emission = sensor
        .is_periodic()
        .then(|| now + sensor.next_interval(rng));
    Ok(SensorEmission::Emitted {
        tuple: Box::new(tuple),
        next_emission,
    })
}

/// Result of running a module on one tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalOutcome {
    pub charged_mi: f64,
    pub service_time: SimTime,
    /// Output tuples, stamped with the service completion time.
    pub outputs: Vec<Tuple>,
}

/// Runs `module` on `tuple` as it enters service at `now`.
pub fn process_tuple_arrival(
    module: &mut AppModule,
    app: &Application,
    host: &Device,
    tuple: &Tuple,
    now: SimTime,
    selectivity: &mut SelectivityStreams,
    ids: &mut TupleIdGen,
) -> Result<ArrivalOutcome, AppError> {
    if tuple.dst_module != module.name || !app.is_module(&module.name) {
        return Err(AppError::ModuleNotPlaced(tuple.dst_module.clone()));
    }
    let mut ctx = ArrivalContext {
        app,
        module: &module.name,
        host,
        now,
        state: &mut module.state,
        extra_mi: 0.0,
        emissions: Vec::new(),
    };
    module.logic.on_tuple_arrival(&mut ctx, tuple);
    let charged_mi = tuple.cloudlet_length_mi + ctx.extra_mi;
    let emissions = std::mem::take(&mut ctx.emissions);
    let service_time = compute_service_time(charged_mi, host, 0)?.duration;
    let done_at = now + service_time;

    let mut outputs = Vec::with_capacity(emissions.len());
    for em in emissions {
        let edge = app.edge(em.edge);
        debug_assert_eq!(edge.src, module.name);
        if !edge.selectivity.fires(selectivity.for_edge(app, em.edge)) {
            continue;
        }
        let mut meta = tuple.meta.clone();
        meta.extend(em.meta);
        outputs.push(Tuple {
            id: ids.next_id(),
            app_id: tuple.app_id.clone(),
            tuple_type: edge.tuple_type.clone(),
            direction: edge.direction,
            cloudlet_length_mi: edge.tuple_mi,
            file_size_bits: edge.tuple_size_bits,
            src_module: module.name.clone(),
            dst_module: edge.dst.clone(),
            created_at: done_at,
            loop_tags: tags_for_step(app, Some(&tuple.loop_tags), &edge.src, &edge.dst),
            hop_trace: Vec::new(),
            parent: Some(tuple.id),
            origin: tuple.origin,
            origin_created_at: tuple.origin_created_at,
            target_hint: em.target_hint.or_else(|| tuple.target_hint.clone()),
            meta,
        });
    }
    Ok(ArrivalOutcome {
        charged_mi,
        service_time,
        outputs,
    })
}

/// One end-to-end loop measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoopSample {
    pub loop_id: String,
    pub origin: TupleId,
    pub sink_tuple: TupleId,
    pub created_at: SimTime,
    pub completed_at: SimTime,
    pub latency: SimTime,
    pub meta: BTreeMap<String, String>,
}

impl LoopSample {
    pub fn latency_ms(&self) -> f64 {
        self.latency.as_millis_f64()
    }
}

/// Appends a sample if `tuple` belongs to `app_loop`; returns its latency in ms.
pub fn record_loop_sample(
    app_loop: &AppLoop,
    tuple: &Tuple,
    completed_at: SimTime,
    samples: &mut Vec<LoopSample>,
) -> Option<f64> {
    if !tuple.loop_tags.contains(&app_loop.id) {
        return None;
    }
    let latency = completed_at - tuple.origin_created_at;
    samples.push(LoopSample {
        loop_id: app_loop.id.clone(),
        origin: tuple.origin,
        sink_tuple: tuple.id,
        created_at: tuple.origin_created_at,
        completed_at,
        latency,
        meta: tuple.meta.clone(),
    });
    Some(latency.as_millis_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, Architecture, LinkSpec, TopologySpec};

    fn edge(src: &str, dst: &str, ty: &str, mi: f64, sel: Selectivity) -> AppEdge {
        AppEdge {
            src: src.into(),
            dst: dst.into(),
            tuple_type: ty.into(),
            direction: Direction::Up,
            tuple_mi: mi,
            tuple_size_bits: 100,
            selectivity: sel,
            reference_mi: None,
        }
    }

    fn module(name: &str) -> ModuleSpec {
        ModuleSpec {
            name: name.into(),
            ram_mb: 0,
            host_tag: None,
            replicate: false,
        }
    }

    fn sensor(battery: Option<f64>, per: f64, interval: f64, jitter: f64) -> Sensor {
        Sensor {
            id: "s".into(),
            attached_device: "gw".into(),
            tuple_type: "RAW".into(),
            latency_ms: 1.0,
            nominal_interval_ms: interval,
            jitter_fraction: jitter,
            battery_capacity_milli_j: battery,
            tx_energy_per_tuple_milli_j: per,
            emitted: 0,
        }
    }

    fn two_stage(sel: Selectivity) -> Application {
        Application::new(ApplicationSpec {
            app_id: "t".into(),
            modules: vec![module("filter"), module("sink")],
            edges: vec![
                edge("RAW", "filter", "RAW", 100.0, Selectivity::Always),
                edge("filter", "sink", "FILTERED", 50.0, sel),
            ],
            sensors: vec![sensor(None, 0.0, 10.0, 0.0)],
            actuators: vec![],
            loops: vec![AppLoop {
                id: "l".into(),
                modules: vec!["RAW".into(), "filter".into(), "sink".into()],
            }],
            placement: PlacementPolicy::Edgeward,
        })
        .unwrap()
    }

    fn gateway() -> Device {
        Device::new("gw", 1000.0, Architecture::Cpu)
    }

    #[test]
    fn zero_jitter_gives_exact_period() {
        let app = two_stage(Selectivity::Always);
        let mut s = sensor(None, 0.0, 1000.0, 0.0);
        let mut rng = RngStream::new(1, "s");
        let mut ids = TupleIdGen::default();
        let now = SimTime::from_millis(7);
        match emit_sensor_tuple(&mut s, &gateway(), &app, now, &mut rng, &mut ids).unwrap() {
            SensorEmission::Emitted {
                next_emission,
                tuple,
            } => {
                assert_eq!(next_emission, Some(now + SimTime::from_millis(1000)));
                assert_eq!(tuple.loop_tags, BTreeSet::from(["l".to_string()]));
            }
            SensorEmission::Halted => panic!("halted"),
        }
    }

    #[test]
    fn battery_allows_exact_number_of_emissions() {
        let app = two_stage(Selectivity::Always);
        let mut s = sensor(Some(100.0), 10.0, 0.0, 0.0);
        let mut rng = RngStream::new(1, "s");
        let mut ids = TupleIdGen::default();
        let mut n = 0;
        while let SensorEmission::Emitted { .. } =
            emit_sensor_tuple(&mut s, &gateway(), &app, SimTime::ZERO, &mut rng, &mut ids).unwrap()
        {
            n += 1;
        }
        assert_eq!(n, 10);
        assert_eq!(s.remaining_milli_j(), Some(0.0));
        // stays halted
        assert_eq!(
            emit_sensor_tuple(&mut s, &gateway(), &app, SimTime::ZERO, &mut rng, &mut ids).unwrap(),
            SensorEmission::Halted
        );
    }

    #[test]
    fn emission_on_down_device_is_skipped_without_charge() {
        let app = two_stage(Selectivity::Always);
        let mut s = sensor(Some(100.0), 10.0, 0.0, 0.0);
        let mut dev = gateway();
        dev.status = crate::topology::Status::Down;
        let err = emit_sensor_tuple(
            &mut s,
            &dev,
            &app,
            SimTime::ZERO,
            &mut RngStream::new(1, "s"),
            &mut TupleIdGen::default(),
        );
        assert!(err.is_err());
        assert_eq!(s.emitted, 0);
    }

    #[test]
    fn jitter_sigma_matches_configuration() {
        let s = sensor(None, 0.0, 1000.0, 0.02);
        let mut rng = RngStream::new(11, "sensor.z1");
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| s.next_interval(&mut rng).as_millis_f64())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 20.0).abs() / 20.0 < 0.05, "sd {sd}");
        assert!(xs.iter().all(|&x| (940.0..=1060.0).contains(&x)));
    }

    #[test]
    fn interval_floor_applies() {
        let s = sensor(None, 0.0, 0.2, 0.0);
        assert_eq!(
            s.next_interval(&mut RngStream::new(1, "x")),
            MIN_EMISSION_INTERVAL
        );
    }

    fn first_tuple(app: &Application, ids: &mut TupleIdGen) -> Tuple {
        let mut s = sensor(None, 0.0, 0.0, 0.0);
        match emit_sensor_tuple(
            &mut s,
            &gateway(),
            app,
            SimTime::ZERO,
            &mut RngStream::new(1, "s"),
            ids,
        )
        .unwrap()
        {
            SensorEmission::Emitted { tuple, .. } => *tuple,
            SensorEmission::Halted => unreachable!(),
        }
    }

    #[test]
    fn zero_selectivity_emits_nothing() {
        let app = two_stage(Selectivity::Fractional { p: 0.0 });
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut m = AppModule::new("filter", DeviceIdx(0), Box::new(PassThrough));
        let out = process_tuple_arrival(
            &mut m,
            &app,
            &gateway(),
            &t,
            SimTime::ZERO,
            &mut SelectivityStreams::new(1),
            &mut ids,
        )
        .unwrap();
        assert!(out.outputs.is_empty());
        assert_eq!(out.service_time, SimTime::from_millis(100));
    }

    #[test]
    fn outputs_inherit_origin_and_tags() {
        let app = two_stage(Selectivity::Always);
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut m = AppModule::new("filter", DeviceIdx(0), Box::new(PassThrough));
        let now = SimTime::from_millis(3);
        let out = process_tuple_arrival(
            &mut m,
            &app,
            &gateway(),
            &t,
            now,
            &mut SelectivityStreams::new(1),
            &mut ids,
        )
        .unwrap();
        assert_eq!(out.outputs.len(), 1);
        let o = &out.outputs[0];
        assert_eq!(o.parent, Some(t.id));
        assert_eq!(o.origin, t.id);
        assert_eq!(o.created_at, now + SimTime::from_millis(100));
        assert_eq!(o.cloudlet_length_mi, 50.0);
        assert!(o.loop_tags.contains("l"));
    }

    #[test]
    fn wrong_module_is_rejected() {
        let app = two_stage(Selectivity::Always);
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut m = AppModule::new("sink", DeviceIdx(0), Box::new(PassThrough));
        let r = process_tuple_arrival(
            &mut m,
            &app,
            &gateway(),
            &t,
            SimTime::ZERO,
            &mut SelectivityStreams::new(1),
            &mut ids,
        );
        assert_eq!(r, Err(AppError::ModuleNotPlaced("filter".into())));
    }

    #[test]
    fn selectivity_frequency_within_binomial_bounds() {
        let app = two_stage(Selectivity::Fractional { p: 0.3 });
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut m = AppModule::new("filter", DeviceIdx(0), Box::new(PassThrough));
        let mut streams = SelectivityStreams::new(99);
        let n = 20_000;
        let mut fired = 0;
        for _ in 0..n {
            fired += process_tuple_arrival(
                &mut m,
                &app,
                &gateway(),
                &t,
                SimTime::ZERO,
                &mut streams,
                &mut ids,
            )
            .unwrap()
            .outputs
            .len();
        }
        let p = 0.3;
        let half_width = 2.576 * (p * (1.0 - p) / n as f64).sqrt();
        let rate = fired as f64 / n as f64;
        assert!((rate - p).abs() < half_width, "rate {rate}");
    }

    struct Counter;
    impl ModuleLogic for Counter {
        fn on_tuple_arrival(&mut self, ctx: &mut ArrivalContext<'_>, _t: &Tuple) {
            let k = ctx.state.get("count").and_then(Value::as_u64).unwrap_or(0);
            ctx.state.insert("count".into(), Value::from(k + 1));
            ctx.emit(Emission {
                edge: 1,
                target_hint: None,
                meta: BTreeMap::from([("seen".into(), k.to_string())]),
            });
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    fn seen(outcome: &ArrivalOutcome) -> String {
        outcome.outputs[0].meta["seen"].clone()
    }

    #[test]
    fn module_state_persists_across_arrivals() {
        let app = two_stage(Selectivity::Always);
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut m = AppModule::new("filter", DeviceIdx(0), Box::new(Counter));
        let mut streams = SelectivityStreams::new(1);
        for k in 1..=5u64 {
            let out = process_tuple_arrival(
                &mut m,
                &app,
                &gateway(),
                &t,
                SimTime::ZERO,
                &mut streams,
                &mut ids,
            )
            .unwrap();
            assert_eq!(seen(&out), (k - 1).to_string());
        }
    }

    #[test]
    fn checkpoint_restore_replays_identically() {
        let app = two_stage(Selectivity::Always);
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut streams = SelectivityStreams::new(1);
        let mut m = AppModule::new("filter", DeviceIdx(0), Box::new(Counter));
        for _ in 0..3 {
            process_tuple_arrival(
                &mut m,
                &app,
                &gateway(),
                &t,
                SimTime::ZERO,
                &mut streams,
                &mut ids,
            )
            .unwrap();
        }
        let cp = m.checkpoint();
        let run = |m: &mut AppModule, ids: &mut TupleIdGen| -> Vec<String> {
            (0..4)
                .map(|_| {
                    seen(
                        &process_tuple_arrival(
                            m,
                            &app,
                            &gateway(),
                            &t,
                            SimTime::ZERO,
                            &mut SelectivityStreams::new(1),
                            ids,
                        )
                        .unwrap(),
                    )
                })
                .collect()
        };
        let uninterrupted = run(&mut m, &mut ids);
        let mut fresh = AppModule::new("filter", DeviceIdx(0), Box::new(Counter));
        fresh.restore(&cp);
        assert_eq!(run(&mut fresh, &mut ids), uninterrupted);
    }

    #[test]
    fn cycles_and_broken_loops_are_rejected() {
        let mut spec = two_stage(Selectivity::Always).spec;
        spec.edges
            .push(edge("sink", "filter", "BACK", 1.0, Selectivity::Always));
        assert!(matches!(Application::new(spec), Err(AppError::Cycle(_))));

        let mut spec = two_stage(Selectivity::Always).spec;
        spec.loops[0].modules = vec!["RAW".into(), "sink".into()];
        assert!(matches!(
            Application::new(spec),
            Err(AppError::BrokenLoop { .. })
        ));

        let mut spec = two_stage(Selectivity::Always).spec;
        spec.edges[1].dst = "nowhere".into();
        assert_eq!(
            Application::new(spec),
            Err(AppError::UnknownEndpoint("nowhere".into()))
        );
    }

    #[test]
    fn loop_sample_latency() {
        let app = two_stage(Selectivity::Always);
        let mut ids = TupleIdGen::default();
        let t = first_tuple(&app, &mut ids);
        let mut samples = Vec::new();
        let ms = record_loop_sample(
            &app.spec.loops[0],
            &t,
            SimTime::from_millis(205),
            &mut samples,
        );
        assert_eq!(ms, Some(205.0));
        assert_eq!(
            record_loop_sample(&app.spec.loops[0], &t, SimTime::ZERO, &mut samples),
            Some(0.0)
        );
        let other = AppLoop {
            id: "other".into(),
            modules: vec![],
        };
        assert_eq!(
            record_loop_sample(&other, &t, SimTime::ZERO, &mut samples),
            None
        );
        assert_eq!(samples.len(), 2);
    }

    fn tiered_graph() -> PhysicalGraph {
        let mut cloud = Device::new("cloud", 40_000.0, Architecture::Cpu);
        cloud.tags = vec!["cloud".into()];
        cloud.ram_mb = 40_000;
        let mut fog = Device::new("fog", 5_000.0, Architecture::Cpu);
        fog.level = 1;
        fog.ram_mb = 4096;
        let mut e1 = Device::new("edge-b", 1_000.0, Architecture::Cpu);
        e1.level = 2;
        e1.ram_mb = 512;
        let mut e2 = e1.clone();
        e2.id = "edge-a".into();
        let link = |a: &str, b: &str| LinkSpec {
            a: a.into(),
            b: b.into(),
            latency_ms: 1.0,
            bandwidth_bps: 1e6,
            weight_km: None,
        };
        build_graph(&TopologySpec {
            devices: vec![cloud, fog, e1, e2],
            links: vec![
                link("cloud", "fog"),
                link("fog", "edge-a"),
                link("fog", "edge-b"),
            ],
        })
        .unwrap()
    }

    #[test]
    fn placement_policies() {
        let g = tiered_graph();
        let mut spec = two_stage(Selectivity::Always).spec;
        spec.modules[0].ram_mb = 256;
        spec.modules[1].ram_mb = 2048;
        let app = Application::new(spec).unwrap();

        let cloud = place_modules(&app, &g, &PlacementPolicy::CloudOnly).unwrap();
        assert!(cloud
            .values()
            .all(|h| h == &vec![g.lookup("cloud").unwrap()]));

        let edge = place_modules(&app, &g, &PlacementPolicy::Edgeward).unwrap();
        assert_eq!(edge["filter"], vec![g.lookup("edge-a").unwrap()]);
        assert_eq!(edge["sink"], vec![g.lookup("fog").unwrap()]);

        let explicit = PlacementPolicy::Explicit {
            map: BTreeMap::from([
                ("filter".into(), vec!["edge-b".into()]),
                ("sink".into(), vec!["fog".into()]),
            ]),
        };
        assert_eq!(
            place_modules(&app, &g, &explicit).unwrap()["filter"],
            vec![g.lookup("edge-b").unwrap()]
        );

        let bad = PlacementPolicy::Explicit {
            map: BTreeMap::from([
                ("filter".into(), vec!["edge-b".into()]),
                ("sink".into(), vec!["edge-a".into()]),
            ]),
        };
        assert_eq!(
            place_modules(&app, &g, &bad),
            Err(AppError::UnplaceableModule("sink".into()))
        );
    }

    #[test]
    fn replicated_modules_land_on_every_edge_device() {
        let g = tiered_graph();
        let mut spec = two_stage(Selectivity::Always).spec;
        spec.modules[0].replicate = true;
        let app = Application::new(spec).unwrap();
        let p = place_modules(&app, &g, &PlacementPolicy::Edgeward).unwrap();
        assert_eq!(
            p["filter"],
            vec![g.lookup("edge-a").unwrap(), g.lookup("edge-b").unwrap()]
        );
    }

    #[test]
    fn application_json_round_trip() {
        let app = two_stage(Selectivity::Fractional { p: 0.5 });
        let text = serde_json::to_string(&app.spec).unwrap();
        assert!(text.contains("\"tupleMI\""));
        assert!(text.contains("\"kind\":\"FRACTIONAL\""));
        assert_eq!(ApplicationSpec::from_json(&text).unwrap(), app.spec);
    }
}
