//! The simulation world: routes tuples hop by hop across the physical graph,
//! runs module instances on device execution slots, applies topology events,
//! and keeps the metric ledgers.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::application::{
    emit_sensor_tuple, process_tuple_arrival, record_loop_sample, AppError, AppModule, Application,
    HopRecord, LoopSample, ModuleLogic, ModuleSpec, Placement, SelectivityStreams, SensorEmission,
    Tuple, TupleId, TupleIdGen,
};
use crate::engine::{
    Engine, EngineError, EntityId, Event, EventPayload, Handler, RunSummary, TraceEntry,
};
use crate::metrics::{
    update_cost, update_energy, CostAccount, EnergyAccount, QueueTelemetry, SensorEnergyReport,
};
use crate::rng::RngStream;
use crate::time::SimTime;
use crate::topology::{
    apply_topology_event, shortest_paths_from, transmission_time, DeviceIdx, LatencyShortestPath,
    PhysicalGraph, RoutingStrategy, ShortestPaths, TopologyAction, TopologyError, TopologyEvent,
    WeightKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimConfig {
    pub master_seed: u64,
    /// Serialize transmissions per link direction (iFogSim's busy-link flags).
    #[serde(default)]
    pub serialize_links: bool,
    #[serde(default)]
    pub trace_events: bool,
    #[serde(default)]
    pub record_queue_samples: bool,
}

impl SimConfig {
    pub fn new(master_seed: u64) -> Self {
        SimConfig {
            master_seed,
            serialize_links: false,
            trace_events: false,
            record_queue_samples: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    SensorEmit {
        sensor: usize,
        meta: BTreeMap<String, String>,
        periodic: bool,
    },
    TupleArrival {
        tuple: TupleId,
        device: DeviceIdx,
    },
    ActuatorArrival {
        tuple: TupleId,
        actuator: usize,
    },
    ServiceDone {
        device: DeviceIdx,
        tuple: TupleId,
        generation: u64,
    },
    Topology(TopologyAction),
}

impl EventPayload for SimEvent {
    fn kind(&self) -> &'static str {
        match self {
            SimEvent::SensorEmit { .. } => "sensor_emit",
            SimEvent::TupleArrival { .. } => "tuple_arrival",
            SimEvent::ActuatorArrival { .. } => "actuator_arrival",
            SimEvent::ServiceDone { .. } => "service_done",
            SimEvent::Topology(_) => "topology",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TupleState {
    InTransit,
    Queued,
    InService,
    Consumed,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DropReason {
    DeviceDown,
    DeviceFailed,
    Unreachable,
    NoInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sink {
    Module(DeviceIdx),
    Actuator(usize),
}

/// Lifecycle of one tuple.
#[derive(Debug, Clone)]
pub struct TupleRecord {
    pub tuple: Tuple,
    pub sink: Option<Sink>,
    pub state: TupleState,
    pub drop_reason: Option<DropReason>,
    pub arrived_at_sink: Option<SimTime>,
    pub service_start: Option<SimTime>,
    pub service_end: Option<SimTime>,
    pub charged_mi: f64,
    in_transit: Option<HopRecord>,
    pending_outputs: Vec<Tuple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TupleCounts {
    pub created: u64,
    pub consumed: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

/// Where an end-to-end latency sample went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyBreakdown {
    pub propagation: SimTime,
    pub transmission: SimTime,
    pub link_wait: SimTime,
    pub queueing: SimTime,
    pub service: SimTime,
    pub total: SimTime,
}

impl LatencyBreakdown {
    pub fn network(&self) -> SimTime {
        self.propagation + self.transmission + self.link_wait
    }

    pub fn sum(&self) -> SimTime {
        self.network() + self.queueing + self.service
    }
}

#[derive(Debug, Default)]
struct DeviceRuntime {
    queue: VecDeque<TupleId>,
    in_service: Vec<TupleId>,
    generation: u64,
}

/// Builds module logic for each placed instance.
pub type LogicFactory<'a> = dyn FnMut(&ModuleSpec, DeviceIdx) -> Box<dyn ModuleLogic> + 'a;

pub struct World {
    graph: PhysicalGraph,
    app: Application,
    placement: Placement,
    modules: Vec<AppModule>,
    instance_at: BTreeMap<(String, DeviceIdx), usize>,
    sensors: Vec<crate::application::Sensor>,
    sensor_rngs: Vec<RngStream>,
    sensor_device: Vec<DeviceIdx>,
    sensor_depleted_at: Vec<Option<SimTime>>,
    actuator_device: Vec<DeviceIdx>,
    devices: Vec<DeviceRuntime>,
    tuples: Vec<TupleRecord>,
    ids: TupleIdGen,
    selectivity: SelectivityStreams,
    routing: Box<dyn RoutingStrategy + Send>,
    route_cache: BTreeMap<(DeviceIdx, DeviceIdx), Option<DeviceIdx>>,
    sp_cache: BTreeMap<DeviceIdx, ShortestPaths>,
    link_busy_until: BTreeMap<(DeviceIdx, DeviceIdx), SimTime>,
    serialize_links: bool,
    energy: Vec<EnergyAccount>,
    cost: Vec<CostAccount>,
    telemetry: Vec<QueueTelemetry>,
    loop_samples: Vec<LoopSample>,
    counts: TupleCounts,
    drops: BTreeMap<DropReason, u64>,
    skipped_emissions: u64,
    n_devices: u32,
    n_sensors: u32,
}

pub struct Simulation {
    engine: Engine<SimEvent>,
    world: World,
    config: SimConfig,
}

impl Simulation {
    pub fn new(
        graph: PhysicalGraph,
        app: Application,
        placement: Placement,
        logic: &mut LogicFactory<'_>,
        config: SimConfig,
    ) -> Result<Self, SimError> {
        let mut modules = Vec::new();
        let mut instance_at = BTreeMap::new();
        for (name, hosts) in &placement {
            let spec = app
                .module(name)
                .ok_or_else(|| AppError::UnplaceableModule(name.clone()))?;
            for &h in hosts {
                instance_at.insert((name.clone(), h), modules.len());
                modules.push(AppModule::new(name.clone(), h, logic(spec, h)));
            }
        }
        let mut sensor_device = Vec::new();
        for s in &app.spec.sensors {
            sensor_device.push(
                graph
                    .lookup(&s.attached_device)
                    .ok_or_else(|| AppError::UnknownAttachment(s.id.clone()))?,
            );
        }
        let mut actuator_device = Vec::new();
        for a in &app.spec.actuators {
            actuator_device.push(
                graph
                    .lookup(&a.attached_device)
                    .ok_or_else(|| AppError::UnknownAttachment(a.id.clone()))?,
            );
        }
        let sensors = app.spec.sensors.clone();
        let sensor_rngs = sensors
            .iter()
            .map(|s| RngStream::new(config.master_seed, format!("sensor.{}", s.id)))
            .collect();
        let energy = graph
            .devices()
            .iter()
            .map(|d| EnergyAccount::new(&d.id, SimTime::ZERO))
            .collect();
        let cost = graph
            .devices()
            .iter()
            .map(|d| CostAccount::new(&d.id, SimTime::ZERO))
            .collect();
        let telemetry = graph
            .devices()
            .iter()
            .map(|d| QueueTelemetry::new(&d.id, d.parallelism_degree, config.record_queue_samples))
            .collect();
        let n_devices = graph.devices().len() as u32;
        let world = World {
            devices: (0..n_devices).map(|_| DeviceRuntime::default()).collect(),
            n_sensors: sensors.len() as u32,
            sensor_depleted_at: vec![None; sensors.len()],
            graph,
            app,
            placement,
            modules,
            instance_at,
            sensors,
            sensor_rngs,
            sensor_device,
            actuator_device,
            tuples: Vec::new(),
            ids: TupleIdGen::default(),
            selectivity: SelectivityStreams::new(config.master_seed),
            routing: Box::new(LatencyShortestPath),
            route_cache: BTreeMap::new(),
            sp_cache: BTreeMap::new(),
            link_busy_until: BTreeMap::new(),
            serialize_links: config.serialize_links,
            energy,
            cost,
            telemetry,
            loop_samples: Vec::new(),
            counts: TupleCounts::default(),
            drops: BTreeMap::new(),
            skipped_emissions: 0,
            n_devices,
        };
        let mut engine = Engine::new();
        if config.trace_events {
            engine = engine.with_trace();
        }
        let mut sim = Simulation {
            engine,
            world,
            config,
        };
        sim.start_periodic_sensors();
        Ok(sim)
    }

    fn start_periodic_sensors(&mut self) {
        for i in 0..self.world.sensors.len() {
            if self.world.sensors[i].is_periodic() {
                let first = self.world.sensors[i].next_interval(&mut self.world.sensor_rngs[i]);
                let target = self.world.sensor_entity(i);
                self.engine.schedule_in(
                    first,
                    target,
                    SimEvent::SensorEmit {
                        sensor: i,
                        meta: BTreeMap::new(),
                        periodic: true,
                    },
                );
            }
        }
    }

    pub fn set_routing(&mut self, strategy: Box<dyn RoutingStrategy + Send>) {
        self.world.routing = strategy;
        self.world.route_cache.clear();
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Makes a sensor emit once at `at`, tagging the tuple with `meta`.
    pub fn trigger_sensor(
        &mut self,
        at: SimTime,
        sensor_id: &str,
        meta: BTreeMap<String, String>,
    ) -> Result<(), SimError> {
        let i = self
            .world
            .sensors
            .iter()
            .position(|s| s.id == sensor_id)
            .ok_or_else(|| SimError::UnknownSensor(sensor_id.to_string()))?;
        let target = self.world.sensor_entity(i);
        self.engine.schedule(
            at,
            target,
            SimEvent::SensorEmit {
                sensor: i,
                meta,
                periodic: false,
            },
        )?;
        Ok(())
    }

    pub fn schedule_topology_event(&mut self, event: TopologyEvent) -> Result<(), SimError> {
        event.action.validate(&self.world.graph)?;
        self.engine.schedule(
            event.at,
            EntityId(u32::MAX),
            SimEvent::Topology(event.action),
        )?;
        Ok(())
    }

    pub fn run_until(&mut self, horizon: SimTime) -> RunSummary {
        let s = self.engine.run_until(horizon, &mut self.world);
        self.world.finalize(self.engine.now());
        s
    }

    pub fn run(&mut self) -> RunSummary {
        let s = self.engine.run(&mut self.world);
        self.world.finalize(self.engine.now());
        s
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.engine.events_processed()
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.engine.trace()
    }

    pub fn world(&self) -> &World {
        &self.world
    }
}

impl World {
    fn sensor_entity(&self, i: usize) -> EntityId {
        EntityId(self.n_devices + i as u32)
    }

    fn actuator_entity(&self, i: usize) -> EntityId {
        EntityId(self.n_devices + self.n_sensors + i as u32)
    }

    pub fn graph(&self) -> &PhysicalGraph {
        &self.graph
    }

    pub fn app(&self) -> &Application {
        &self.app
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn tuples(&self) -> &[TupleRecord] {
        &self.tuples
    }

    pub fn tuple(&self, id: TupleId) -> &TupleRecord {
        &self.tuples[id.0 as usize]
    }

    pub fn loop_samples(&self) -> &[LoopSample] {
        &self.loop_samples
    }

    pub fn energy(&self) -> &[EnergyAccount] {
        &self.energy
    }

    pub fn cost(&self) -> &[CostAccount] {
        &self.cost
    }

    pub fn telemetry(&self) -> &[QueueTelemetry] {
        &self.telemetry
    }

    pub fn drops(&self) -> &BTreeMap<DropReason, u64> {
        &self.drops
    }

    pub fn skipped_emissions(&self) -> u64 {
        self.skipped_emissions
    }

    pub fn counts(&self) -> TupleCounts {
        self.counts
    }

    /// Recounts tuples by lifecycle state, independently of the running counters.
    pub fn recount(&self) -> TupleCounts {
        let mut c = TupleCounts {
            created: self.tuples.len() as u64,
            ..Default::default()
        };
        for r in &self.tuples {
            match r.state {
                TupleState::Consumed => c.consumed += 1,
                TupleState::Dropped => c.dropped += 1,
                _ => c.in_flight += 1,
            }
        }
        c
    }

    pub fn sensors(&self) -> &[crate::application::Sensor] {
        &self.sensors
    }

    pub fn sensor_reports(&self) -> Vec<SensorEnergyReport> {
        self.sensors
            .iter()
            .zip(&self.sensor_depleted_at)
            .map(|(s, depleted_at)| SensorEnergyReport {
                sensor_id: s.id.clone(),
                emissions: s.emitted,
                energy_spent_milli_j: s.energy_spent_milli_j(),
                remaining_milli_j: s.remaining_milli_j(),
                depleted_at: *depleted_at,
            })
            .collect()
    }

    pub fn module(&self, name: &str, host: DeviceIdx) -> Option<&AppModule> {
        self.instance_at
            .get(&(name.to_string(), host))
            .map(|&i| &self.modules[i])
    }

    pub fn module_mut(&mut self, name: &str, host: DeviceIdx) -> Option<&mut AppModule> {
        self.instance_at
            .get(&(name.to_string(), host))
            .map(|&i| &mut self.modules[i])
    }

    pub fn modules(&self) -> &[AppModule] {
        &self.modules
    }

    /// Downcasts the logic of a placed instance.
    pub fn logic<T: 'static>(&self, name: &str, host: DeviceIdx) -> Option<&T> {
        self.module(name, host)
            .and_then(|m| m.logic.as_any().downcast_ref::<T>())
    }

    pub fn queue_length(&self, d: DeviceIdx) -> usize {
        self.devices[d.0].queue.len()
    }

    pub fn in_service(&self, d: DeviceIdx) -> usize {
        self.devices[d.0].in_service.len()
    }

    /// Splits the latency from `sink`'s origin sensor tuple to the end of
    /// `sink`'s life into network, queueing and service time.
    pub fn decompose(&self, sink: TupleId) -> LatencyBreakdown {
        let mut chain = vec![sink];
        let mut cur = sink;
        while let Some(p) = self.tuple(cur).tuple.parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        let mut b = LatencyBreakdown::default();
        let mut end = SimTime::ZERO;
        for id in chain {
            let r = self.tuple(id);
            for h in &r.tuple.hop_trace {
                b.propagation += h.propagation;
                b.transmission += h.transmission;
                b.link_wait += h.link_wait;
                end = h.arrival;
            }
            if let (Some(arrived), Some(start), Some(stop)) =
                (r.arrived_at_sink, r.service_start, r.service_end)
            {
                b.queueing += start - arrived;
                b.service += stop - start;
                end = stop;
            }
        }
        let origin = self.tuple(sink).tuple.origin_created_at;
        b.total = end - origin;
        b
    }

    fn utilization(&self, d: DeviceIdx) -> f64 {
        let dev = self.graph.device(d);
        self.devices[d.0].in_service.len() as f64 / f64::from(dev.parallelism_degree)
    }

    fn account(&mut self, d: DeviceIdx, now: SimTime) {
        let u = self.utilization(d);
        let dev = self.graph.device(d);
        update_energy(&mut self.energy[d.0], now, u, dev).expect("engine clock is monotone");
        update_cost(&mut self.cost[d.0], now, u, dev).expect("engine clock is monotone");
        let rt = &self.devices[d.0];
        self.telemetry[d.0].observe(now, rt.queue.len() as u32, rt.in_service.len() as u32);
    }

    fn finalize(&mut self, now: SimTime) {
        for d in self.graph.device_indices().collect::<Vec<_>>() {
            let u = self.utilization(d);
            let dev = self.graph.device(d);
            update_energy(&mut self.energy[d.0], now, u, dev).expect("engine clock is monotone");
            update_cost(&mut self.cost[d.0], now, u, dev).expect("engine clock is monotone");
            self.telemetry[d.0].advance(now);
        }
    }

    fn register(&mut self, tuple: Tuple) -> TupleId {
        let id = tuple.id;
        assert_eq!(id.0 as usize, self.tuples.len(), "tuple ids are dense");
        self.tuples.push(TupleRecord {
            tuple,
            sink: None,
            state: TupleState::InTransit,
            drop_reason: None,
            arrived_at_sink: None,
            service_start: None,
            service_end: None,
            charged_mi: 0.0,
            in_transit: None,
            pending_outputs: Vec::new(),
        });
        self.counts.created += 1;
        self.counts.in_flight += 1;
        id
    }

    fn drop_tuple(&mut self, id: TupleId, reason: DropReason) {
        let r = &mut self.tuples[id.0 as usize];
        debug_assert!(!matches!(
            r.state,
            TupleState::Consumed | TupleState::Dropped
        ));
        r.state = TupleState::Dropped;
        r.drop_reason = Some(reason);
        r.pending_outputs.clear();
        self.counts.dropped += 1;
        self.counts.in_flight -= 1;
        *self.drops.entry(reason).or_insert(0) += 1;
    }

    fn consume(&mut self, id: TupleId) {
        let r = &mut self.tuples[id.0 as usize];
        debug_assert!(!matches!(
            r.state,
            TupleState::Consumed | TupleState::Dropped
        ));
        r.state = TupleState::Consumed;
        self.counts.consumed += 1;
        self.counts.in_flight -= 1;
    }

    fn distances_from(&mut self, from: DeviceIdx) -> &ShortestPaths {
        let graph = &self.graph;
        self.sp_cache.entry(from).or_insert_with(|| {
            shortest_paths_from(graph, from, WeightKind::LatencyMs)
                .expect("latency weights always present")
        })
    }

    /// Picks the nearest of `candidates` from `from`, preferring `hint`.
    fn choose(
        &mut self,
        candidates: &[DeviceIdx],
        hint: Option<DeviceIdx>,
        from: DeviceIdx,
    ) -> Option<DeviceIdx> {
        if let Some(h) = hint.filter(|h| candidates.contains(h)) {
            return Some(h);
        }
        if candidates.contains(&from) {
            return Some(from);
        }
        let sp = self.distances_from(from).clone();
        let graph = &self.graph;
        candidates.iter().copied().min_by(|&a, &b| {
            let da = sp.distance(a).unwrap_or(f64::INFINITY);
            let db = sp.distance(b).unwrap_or(f64::INFINITY);
            da.total_cmp(&db).then_with(|| graph.id(a).cmp(graph.id(b)))
        })
    }

    fn resolve_sink(&mut self, id: TupleId, from: DeviceIdx) -> Option<Sink> {
        let t = &self.tuples[id.0 as usize].tuple;
        let dst = t.dst_module.clone();
        let hint = t.target_hint.as_deref().and_then(|h| self.graph.lookup(h));
        if self.app.is_module(&dst) {
            let hosts = self.placement.get(&dst).cloned().unwrap_or_default();
            self.choose(&hosts, hint, from).map(Sink::Module)
        } else {
            let matching: Vec<usize> = (0..self.app.spec.actuators.len())
                .filter(|&i| self.app.spec.actuators[i].actuator_type == dst)
                .collect();
            let devices: Vec<DeviceIdx> =
                matching.iter().map(|&i| self.actuator_device[i]).collect();
            let chosen = self.choose(&devices, hint, from)?;
            matching
                .into_iter()
                .find(|&i| self.actuator_device[i] == chosen)
                .map(Sink::Actuator)
        }
    }

    fn sink_device(&self, sink: Sink) -> DeviceIdx {
        match sink {
            Sink::Module(d) => d,
            Sink::Actuator(a) => self.actuator_device[a],
        }
    }

    fn next_hop(&mut self, from: DeviceIdx, to: DeviceIdx) -> Option<DeviceIdx> {
        if let Some(&hop) = self.route_cache.get(&(from, to)) {
            return hop;
        }
        let hop = self.routing.next_hop(&self.graph, from, to).ok();
        self.route_cache.insert((from, to), hop);
        hop
    }

    /// Releases a freshly created tuple at `from`.
    fn launch(&mut self, id: TupleId, from: DeviceIdx, engine: &mut Engine<SimEvent>) {
        match self.resolve_sink(id, from) {
            Some(sink) => {
                self.tuples[id.0 as usize].sink = Some(sink);
                self.forward(id, from, engine);
            }
            None => self.drop_tuple(id, DropReason::NoInstance),
        }
    }

    /// Moves a tuple sitting at `at` one step closer to its sink.
    fn forward(&mut self, id: TupleId, at: DeviceIdx, engine: &mut Engine<SimEvent>) {
        let now = engine.now();
        let sink = self.tuples[id.0 as usize]
            .sink
            .expect("sink resolved at launch");
        let dest = self.sink_device(sink);
        if at == dest {
            match sink {
                Sink::Module(_) => {
                    engine.schedule_in(
                        SimTime::ZERO,
                        EntityId(at.0 as u32),
                        SimEvent::TupleArrival {
                            tuple: id,
                            device: at,
                        },
                    );
                }
                Sink::Actuator(a) => {
                    let act = &self.app.spec.actuators[a];
                    let propagation = SimTime::from_millis_f64(act.latency_ms);
                    self.tuples[id.0 as usize].in_transit = Some(HopRecord {
                        device: act.id.clone(),
                        arrival: now + propagation,
                        link_wait: SimTime::ZERO,
                        propagation,
                        transmission: SimTime::ZERO,
                    });
                    let target = self.actuator_entity(a);
                    engine.schedule_in(
                        propagation,
                        target,
                        SimEvent::ActuatorArrival {
                            tuple: id,
                            actuator: a,
                        },
                    );
                }
            }
            return;
        }
        let Some(next) = self.next_hop(at, dest) else {
            self.drop_tuple(id, DropReason::Unreachable);
            return;
        };
        let link_idx = self
            .graph
            .link_between(at, next)
            .expect("next hop is a neighbour");
        let link = self.graph.link(link_idx);
        let size = self.tuples[id.0 as usize].tuple.file_size_bits;
        let transmission = transmission_time(size, link.bandwidth_bps);
        let propagation = SimTime::from_millis_f64(link.latency_ms);
        let mut start = now;
        if self.serialize_links {
            let busy = self
                .link_busy_until
                .entry((at, next))
                .or_insert(SimTime::ZERO);
            start = start.max(*busy);
            *busy = start + transmission;
        }
        let arrival = start + transmission + propagation;
        self.tuples[id.0 as usize].in_transit = Some(HopRecord {
            device: self.graph.id(next).to_string(),
            arrival,
            link_wait: start - now,
            propagation,
            transmission,
        });
        engine
            .schedule(
                arrival,
                EntityId(next.0 as u32),
                SimEvent::TupleArrival {
                    tuple: id,
                    device: next,
                },
            )
            .expect("arrival is never in the past");
    }

    fn land(&mut self, id: TupleId) {
        let r = &mut self.tuples[id.0 as usize];
        if let Some(hop) = r.in_transit.take() {
            r.tuple.hop_trace.push(hop);
        }
    }

    fn on_tuple_arrival(&mut self, id: TupleId, device: DeviceIdx, engine: &mut Engine<SimEvent>) {
        if self.tuples[id.0 as usize].state != TupleState::InTransit {
            return;
        }
        if !self.graph.device(device).is_up() {
            self.tuples[id.0 as usize].in_transit = None;
            self.drop_tuple(id, DropReason::DeviceDown);
            return;
        }
        self.land(id);
        let sink = self.tuples[id.0 as usize]
            .sink
            .expect("sink resolved at launch");
        if sink == Sink::Module(device) {
            let r = &mut self.tuples[id.0 as usize];
            r.state = TupleState::Queued;
            r.arrived_at_sink = Some(engine.now());
            self.devices[device.0].queue.push_back(id);
            self.account(device, engine.now());
            self.try_start(device, engine);
        } else {
            self.forward(id, device, engine);
        }
    }

    fn try_start(&mut self, d: DeviceIdx, engine: &mut Engine<SimEvent>) {
        let now = engine.now();
        let slots = self.graph.device(d).parallelism_degree as usize;
        let mut changed = false;
        while self.devices[d.0].in_service.len() < slots {
            let Some(id) = self.devices[d.0].queue.pop_front() else {
                break;
            };
            changed = true;
            let module_name = self.tuples[id.0 as usize].tuple.dst_module.clone();
            let Some(&mi) = self.instance_at.get(&(module_name, d)) else {
                self.drop_tuple(id, DropReason::NoInstance);
                continue;
            };
            let tuple = self.tuples[id.0 as usize].tuple.clone();
            let outcome = process_tuple_arrival(
                &mut self.modules[mi],
                &self.app,
                self.graph.device(d),
                &tuple,
                now,
                &mut self.selectivity,
                &mut TupleIdGen::default(),
            );
            let outcome = match outcome {
                Ok(o) => o,
                Err(_) => {
                    self.drop_tuple(id, DropReason::DeviceDown);
                    continue;
                }
            };
            let r = &mut self.tuples[id.0 as usize];
            r.state = TupleState::InService;
            r.service_start = Some(now);
            r.charged_mi = outcome.charged_mi;
            r.pending_outputs = outcome.outputs;
            let generation = self.devices[d.0].generation;
            self.devices[d.0].in_service.push(id);
            engine.schedule_in(
                outcome.service_time,
                EntityId(d.0 as u32),
                SimEvent::ServiceDone {
                    device: d,
                    tuple: id,
                    generation,
                },
            );
        }
        if changed {
            self.account(d, now);
        }
    }

    fn record_samples(&mut self, id: TupleId, sink_label: &str, at: SimTime) {
        let tuple = &self.tuples[id.0 as usize].tuple;
        for l in self
            .app
            .spec
            .loops
            .iter()
            .filter(|l| l.sink() == sink_label)
        {
            record_loop_sample(l, tuple, at, &mut self.loop_samples);
        }
    }

    fn on_service_done(
        &mut self,
        d: DeviceIdx,
        id: TupleId,
        generation: u64,
        engine: &mut Engine<SimEvent>,
    ) {
        if self.devices[d.0].generation != generation {
            return;
        }
        let now = engine.now();
        let rt = &mut self.devices[d.0];
        let pos = rt
            .in_service
            .iter()
            .position(|&t| t == id)
            .expect("tuple in service");
        rt.in_service.remove(pos);
        let r = &mut self.tuples[id.0 as usize];
        r.service_end = Some(now);
        let service = now - r.service_start.expect("started");
        let outputs = std::mem::take(&mut r.pending_outputs);
        let module = r.tuple.dst_module.clone();
        self.consume(id);
        self.telemetry[d.0].record_completion(service);
        self.account(d, now);
        self.record_samples(id, &module, now);
        // outputs take their ids when they come into existence
        for mut out in outputs {
            out.id = self.ids.next_id();
            let oid = self.register(out);
            self.launch(oid, d, engine);
        }
        self.try_start(d, engine);
    }

    fn on_actuator_arrival(&mut self, id: TupleId, actuator: usize, now: SimTime) {
        if self.tuples[id.0 as usize].state != TupleState::InTransit {
            return;
        }
        self.land(id);
        self.tuples[id.0 as usize].arrived_at_sink = Some(now);
        self.consume(id);
        let label = self.app.spec.actuators[actuator].actuator_type.clone();
        self.record_samples(id, &label, now);
    }

    fn on_sensor_emit(
        &mut self,
        i: usize,
        meta: BTreeMap<String, String>,
        periodic: bool,
        engine: &mut Engine<SimEvent>,
    ) {
        let now = engine.now();
        let dev = self.sensor_device[i];
        let result = emit_sensor_tuple(
            &mut self.sensors[i],
            self.graph.device(dev),
            &self.app,
            now,
            &mut self.sensor_rngs[i],
            &mut self.ids,
        );
        let next = match result {
            Ok(SensorEmission::Emitted {
                mut tuple,
                next_emission,
            }) => {
                tuple.meta.extend(meta.clone());
                let id = self.register(*tuple);
                match self.resolve_sink(id, dev) {
                    Some(sink) => {
                        self.tuples[id.0 as usize].sink = Some(sink);
                        let propagation = SimTime::from_millis_f64(self.sensors[i].latency_ms);
                        self.tuples[id.0 as usize].in_transit = Some(HopRecord {
                            device: self.graph.id(dev).to_string(),
                            arrival: now + propagation,
                            link_wait: SimTime::ZERO,
                            propagation,
                            transmission: SimTime::ZERO,
                        });
                        engine.schedule_in(
                            propagation,
                            EntityId(dev.0 as u32),
                            SimEvent::TupleArrival {
                                tuple: id,
                                device: dev,
                            },
                        );
                    }
                    None => self.drop_tuple(id, DropReason::NoInstance),
                }
                next_emission
            }
            Ok(SensorEmission::Halted) => {
                self.sensor_depleted_at[i].get_or_insert(now);
                None
            }
            Err(_) => {
                self.skipped_emissions += 1;
                periodic.then(|| now + self.sensors[i].next_interval(&mut self.sensor_rngs[i]))
            }
        };
        if let Some(at) = next.filter(|_| periodic) {
            let target = self.sensor_entity(i);
            engine
                .schedule(
                    at,
                    target,
                    SimEvent::SensorEmit {
                        sensor: i,
                        meta,
                        periodic,
                    },
                )
                .expect("next emission is in the future");
        }
    }

    fn on_topology(&mut self, action: TopologyAction, now: SimTime) {
        let touched: Vec<DeviceIdx> = match &action {
            TopologyAction::FailDevice { device } | TopologyAction::RecoverDevice { device } => {
                self.graph.lookup(device).into_iter().collect()
            }
            _ => Vec::new(),
        };
        for &d in &touched {
            self.account(d, now);
        }
        apply_topology_event(&mut self.graph, &action).expect("validated when scheduled");
        self.route_cache.clear();
        self.sp_cache.clear();
        if let TopologyAction::FailDevice { .. } = action {
            for &d in &touched {
                let rt = &mut self.devices[d.0];
                rt.generation += 1;
                let lost: Vec<TupleId> =
                    rt.queue.drain(..).chain(rt.in_service.drain(..)).collect();
                for id in lost {
                    self.drop_tuple(id, DropReason::DeviceFailed);
                }
            }
        }
        for &d in &touched {
            self.account(d, now);
        }
    }
}

impl Handler<SimEvent> for World {
    fn handle(&mut self, event: Event<SimEvent>, engine: &mut Engine<SimEvent>) {
        match event.payload {
            SimEvent::SensorEmit {
                sensor,
                meta,
                periodic,
            } => self.on_sensor_emit(sensor, meta, periodic, engine),
            SimEvent::TupleArrival { tuple, device } => {
                self.on_tuple_arrival(tuple, device, engine)
            }
            SimEvent::ActuatorArrival { tuple, actuator } => {
                self.on_actuator_arrival(tuple, actuator, engine.now())
            }
            SimEvent::ServiceDone {
                device,
                tuple,
                generation,
            } => self.on_service_done(device, tuple, generation, engine),
            SimEvent::Topology(action) => self.on_topology(action, engine.now()),
        }
    }
}
