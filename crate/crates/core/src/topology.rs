//! Physical topology: heterogeneous devices joined by an arbitrary graph of
//! bidirectional links, with shortest-path routing and runtime mutation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Architecture {
    Cpu,
    Fpga,
    Gpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    #[default]
    Up,
    Down,
}

/// Dense index of a device inside a [`PhysicalGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceIdx(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkIdx(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Device {
    pub id: String,
    pub mips: f64,
    #[serde(default)]
    pub ram_mb: u32,
    pub architecture: Architecture,
    /// Max tuples in service at once, each at full `mips`.
    #[serde(default = "one")]
    pub parallelism_degree: u32,
    #[serde(default)]
    pub rate_per_mips: f64,
    #[serde(default)]
    pub power_idle_w: f64,
    #[serde(default)]
    pub power_busy_w: f64,
    #[serde(default)]
    pub level: i32,
    /// Free-form role labels used by placement policies (e.g. `cloud`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default)]
    pub status: Status,
}

fn one() -> u32 {
    1
}

impl Device {
    pub fn new(id: impl Into<String>, mips: f64, architecture: Architecture) -> Self {
        Device {
            id: id.into(),
            mips,
            ram_mb: 0,
            architecture,
            parallelism_degree: 1,
            rate_per_mips: 0.0,
            power_idle_w: 0.0,
            power_busy_w: 0.0,
            level: 0,
            tags: Vec::new(),
            status: Status::Up,
        }
    }

    pub fn is_up(&self) -> bool {
        self.status == Status::Up
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let bad = |reason: &str| {
            Err(TopologyError::InvalidDevice {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if !(self.mips > 0.0 && self.mips.is_finite()) {
            return bad("mips must be positive");
        }
        if self.parallelism_degree == 0 {
            return bad("parallelismDegree must be >= 1");
        }
        if !(self.power_idle_w >= 0.0 && self.power_busy_w >= self.power_idle_w) {
            return bad("require powerBusyW >= powerIdleW >= 0");
        }
        if self.rate_per_mips < 0.0 {
            return bad("ratePerMips must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: DeviceIdx,
    pub b: DeviceIdx,
    pub latency_ms: f64,
    pub bandwidth_bps: f64,
    pub weight_km: Option<f64>,
    pub status: Status,
}

impl Link {
    pub fn other(&self, end: DeviceIdx) -> DeviceIdx {
        if self.a == end {
            self.b
        } else {
            self.a
        }
    }
}

/// Transmission time of `file_size_bits` over `link` plus its propagation latency.
pub fn link_delay(file_size_bits: u64, link: &Link) -> Result<SimTime, TopologyError> {
    if link.status == Status::Down {
        return Err(TopologyError::LinkDown);
    }
    Ok(SimTime::from_millis_f64(link.latency_ms)
        + transmission_time(file_size_bits, link.bandwidth_bps))
}

pub fn transmission_time(file_size_bits: u64, bandwidth_bps: f64) -> SimTime {
    if file_size_bits == 0 || bandwidth_bps.is_infinite() {
        return SimTime::ZERO;
    }
    SimTime::from_secs_f64(file_size_bits as f64 / bandwidth_bps)
}

/// Outcome of offering a tuple to a device's execution slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceDecision {
    /// Pure service time `MI / MIPS`; queueing is the caller's concern.
    pub duration: SimTime,
    /// `false` when every slot is busy and the tuple must wait FIFO.
    pub admitted: bool,
}

pub fn compute_service_time(
    tuple_mi: f64,
    device: &Device,
    in_service: u32,
) -> Result<ServiceDecision, TopologyError> {
    if !device.is_up() {
        return Err(TopologyError::DeviceDown(device.id.clone()));
    }
    debug_assert!(tuple_mi >= 0.0);
    Ok(ServiceDecision {
        duration: SimTime::from_secs_f64(tuple_mi / device.mips),
        admitted: in_service < device.parallelism_degree,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate device id `{0}`")]
    DuplicateId(String),
    #[error("link references unknown device `{0}`")]
    DanglingLink(String),
    #[error("link {0}-{1} has non-positive bandwidth")]
    NonPositiveBandwidth(String, String),
    #[error("link {0}-{1} has negative latency")]
    NegativeLatency(String, String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("more than one link between `{0}` and `{1}`")]
    DuplicateLink(String, String),
    #[error("invalid device `{id}`: {reason}")]
    InvalidDevice { id: String, reason: String },
    #[error("link is down")]
    LinkDown,
    #[error("device `{0}` is down")]
    DeviceDown(String),
    #[error("unknown source device `{0}`")]
    UnknownSource(String),
    #[error("unknown topology event target `{0}`")]
    UnknownTarget(String),
    #[error("no usable path from `{0}` to `{1}`")]
    Unreachable(String, String),
    #[error("link {0}-{1} has no km weight")]
    MissingWeight(String, String),
}

/// JSON form of a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub latency_ms: f64,
    pub bandwidth_bps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_km: Option<f64>,
}

/// JSON topology description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopologySpec {
    pub devices: Vec<Device>,
    pub links: Vec<LinkSpec>,
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhysicalGraph {
    devices: Vec<Device>,
    links: Vec<Link>,
    adjacency: Vec<Vec<LinkIdx>>,
    #[serde(skip)]
    by_id: BTreeMap<String, DeviceIdx>,
    #[serde(skip)]
    by_pair: BTreeMap<(DeviceIdx, DeviceIdx), LinkIdx>,
}

fn ordered(a: DeviceIdx, b: DeviceIdx) -> (DeviceIdx, DeviceIdx) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn build_graph(spec: &TopologySpec) -> Result<PhysicalGraph, TopologyError> {
    let mut g = PhysicalGraph {
        devices: Vec::with_capacity(spec.devices.len()),
        links: Vec::with_capacity(spec.links.len()),
        adjacency: Vec::with_capacity(spec.devices.len()),
        by_id: BTreeMap::new(),
        by_pair: BTreeMap::new(),
    };
    for d in &spec.devices {
        d.validate()?;
        if g.by_id
            .insert(d.id.clone(), DeviceIdx(g.devices.len()))
            .is_some()
        {
            return Err(TopologyError::DuplicateId(d.id.clone()));
        }
        g.devices.push(d.clone());
        g.adjacency.push(Vec::new());
    }
    for l in &spec.links {
        let a = g
            .lookup(&l.a)
            .ok_or_else(|| TopologyError::DanglingLink(l.a.clone()))?;
        let b = g
            .lookup(&l.b)
            .ok_or_else(|| TopologyError::DanglingLink(l.b.clone()))?;
        if a == b {
            return Err(TopologyError::SelfLoop(l.a.clone()));
        }
        if l.bandwidth_bps.is_nan() || l.bandwidth_bps <= 0.0 {
            return Err(TopologyError::NonPositiveBandwidth(
                l.a.clone(),
                l.b.clone(),
            ));
        }
        if l.latency_ms.is_nan() || l.latency_ms < 0.0 {
            return Err(TopologyError::NegativeLatency(l.a.clone(), l.b.clone()));
        }
        let idx = LinkIdx(g.links.len());
        if g.by_pair.insert(ordered(a, b), idx).is_some() {
            return Err(TopologyError::DuplicateLink(l.a.clone(), l.b.clone()));
        }
        g.links.push(Link {
            a,
            b,
            latency_ms: l.latency_ms,
            bandwidth_bps: l.bandwidth_bps,
            weight_km: l.weight_km,
            status: Status::Up,
        });
        g.adjacency[a.0].push(idx);
        g.adjacency[b.0].push(idx);
    }
    Ok(g)
}

impl PhysicalGraph {
    pub fn lookup(&self, id: &str) -> Option<DeviceIdx> {
        self.by_id.get(id).copied()
    }

    pub fn device(&self, idx: DeviceIdx) -> &Device {
        &self.devices[idx.0]
    }

    pub fn device_mut(&mut self, idx: DeviceIdx) -> &mut Device {
        &mut self.devices[idx.0]
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device_indices(&self) -> impl Iterator<Item = DeviceIdx> {
        (0..self.devices.len()).map(DeviceIdx)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, idx: LinkIdx) -> &Link {
        &self.links[idx.0]
    }

    pub fn incident_links(&self, d: DeviceIdx) -> &[LinkIdx] {
        &self.adjacency[d.0]
    }

    pub fn degree(&self, d: DeviceIdx) -> usize {
        self.adjacency[d.0].len()
    }

    pub fn link_between(&self, a: DeviceIdx, b: DeviceIdx) -> Option<LinkIdx> {
        self.by_pair.get(&ordered(a, b)).copied()
    }

    pub fn id(&self, idx: DeviceIdx) -> &str {
        &self.devices[idx.0].id
    }

    /// A link carries traffic only when it and both endpoints are up.
    pub fn link_usable(&self, idx: LinkIdx) -> bool {
        let l = &self.links[idx.0];
        l.status == Status::Up && self.devices[l.a.0].is_up() && self.devices[l.b.0].is_up()
    }

    /// Reconstructs the JSON description of the current state.
    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            devices: self.devices.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkSpec {
                    a: self.id(l.a).to_string(),
                    b: self.id(l.b).to_string(),
                    latency_ms: l.latency_ms,
                    bandwidth_bps: l.bandwidth_bps,
                    weight_km: l.weight_km,
                })
                .collect(),
        }
    }

    fn resolve(&self, id: &str) -> Result<DeviceIdx, TopologyError> {
        self.lookup(id)
            .ok_or_else(|| TopologyError::UnknownTarget(id.to_string()))
    }

    fn resolve_link(&self, src: &str, dst: &str) -> Result<LinkIdx, TopologyError> {
        let (a, b) = (self.resolve(src)?, self.resolve(dst)?);
        self.link_between(a, b)
            .ok_or_else(|| TopologyError::UnknownTarget(format!("{src}-{dst}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    DistanceKm,
    LatencyMs,
}

/// Single-source shortest distances; `None` marks unreachable devices.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPaths {
    pub source: DeviceIdx,
    pub dist: Vec<Option<f64>>,
    pub pred: Vec<Option<DeviceIdx>>,
}

impl ShortestPaths {
    pub fn distance(&self, d: DeviceIdx) -> Option<f64> {
        self.dist[d.0]
    }

    /// Device sequence from the source to `target`, both inclusive.
    pub fn path_to(&self, target: DeviceIdx) -> Option<Vec<DeviceIdx>> {
        self.dist[target.0]?;
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.pred[cur.0] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    }
}

#[derive(PartialEq)]
struct Frontier(f64, DeviceIdx);
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

/// Dijkstra over usable links. Equal-distance relaxations keep the
/// lexicographically smaller predecessor id so paths are deterministic.
pub fn shortest_paths(
    graph: &PhysicalGraph,
    source: &str,
    kind: WeightKind,
) -> Result<ShortestPaths, TopologyError> {
    let src = graph
        .lookup(source)
        .ok_or_else(|| TopologyError::UnknownSource(source.to_string()))?;
    shortest_paths_from(graph, src, kind)
}

pub fn shortest_paths_from(
    graph: &PhysicalGraph,
    src: DeviceIdx,
    kind: WeightKind,
) -> Result<ShortestPaths, TopologyError> {
    let n = graph.devices.len();
    let mut dist: Vec<Option<f64>> = vec![None; n];
    let mut pred: Vec<Option<DeviceIdx>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    if graph.device(src).is_up() {
        dist[src.0] = Some(0.0);
        heap.push(Frontier(0.0, src));
    }
    while let Some(Frontier(d, u)) = heap.pop() {
        if done[u.0] {
            continue;
        }
        done[u.0] = true;
        for &li in graph.incident_links(u) {
            if !graph.link_usable(li) {
                continue;
            }
            let link = graph.link(li);
            let w = match kind {
                WeightKind::LatencyMs => link.latency_ms,
                WeightKind::DistanceKm => link.weight_km.ok_or_else(|| {
                    TopologyError::MissingWeight(graph.id(link.a).into(), graph.id(link.b).into())
                })?,
            };
            let v = link.other(u);
            if done[v.0] {
                continue;
            }
            let cand = d + w;
            match dist[v.0] {
                Some(cur) if cand > cur => {}
                Some(cur) if cand == cur => {
                    let better = pred[v.0].is_some_and(|p| graph.id(u) < graph.id(p));
                    if better {
                        pred[v.0] = Some(u);
                    }
                }
                _ => {
                    dist[v.0] = Some(cand);
                    pred[v.0] = Some(u);
                    heap.push(Frontier(cand, v));
                }
            }
        }
    }
    Ok(ShortestPaths {
        source: src,
        dist,
        pred,
    })
}

/// Picks the next device on the way from `current` to `destination`.
pub trait RoutingStrategy {
    fn next_hop(
        &self,
        graph: &PhysicalGraph,
        current: DeviceIdx,
        destination: DeviceIdx,
    ) -> Result<DeviceIdx, TopologyError>;
}

/// Next hop on the latency-weighted shortest path.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatencyShortestPath;

impl RoutingStrategy for LatencyShortestPath {
    fn next_hop(
        &self,
        graph: &PhysicalGraph,
        current: DeviceIdx,
        destination: DeviceIdx,
    ) -> Result<DeviceIdx, TopologyError> {
        if current == destination {
            return Ok(destination);
        }
        let unreachable =
            || TopologyError::Unreachable(graph.id(current).into(), graph.id(destination).into());
        let sp = shortest_paths_from(graph, current, WeightKind::LatencyMs)?;
        let path = sp.path_to(destination).ok_or_else(unreachable)?;
        path.get(1).copied().ok_or_else(unreachable)
    }
}

pub fn route_next_hop(
    graph: &PhysicalGraph,
    current: &str,
    destination: &str,
    strategy: &dyn RoutingStrategy,
) -> Result<String, TopologyError> {
    let c = graph
        .lookup(current)
        .ok_or_else(|| TopologyError::UnknownTarget(current.into()))?;
    let d = graph
        .lookup(destination)
        .ok_or_else(|| TopologyError::UnknownTarget(destination.into()))?;
    strategy
        .next_hop(graph, c, d)
        .map(|i| graph.id(i).to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TopologyAction {
    FailDevice {
        device: String,
    },
    RecoverDevice {
        device: String,
    },
    #[serde(rename_all = "camelCase")]
    SetLinkLatency {
        src: String,
        dst: String,
        latency_ms: f64,
    },
    #[serde(rename_all = "camelCase")]
    SetLinkBandwidth {
        src: String,
        dst: String,
        bandwidth_bps: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEvent {
    pub at: SimTime,
    pub action: TopologyAction,
}

/// One line of a fault script: `{"atMs": 1500, "action": "FAIL_DEVICE", "device": "esn"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultEntry {
    pub at_ms: f64,
    #[serde(flatten)]
    pub action: TopologyAction,
}

pub fn parse_fault_script(text: &str) -> Result<Vec<TopologyEvent>, serde_json::Error> {
    let entries: Vec<FaultEntry> = serde_json::from_str(text)?;
    Ok(entries
        .into_iter()
        .map(|e| TopologyEvent {
            at: SimTime::from_millis_f64(e.at_ms),
            action: e.action,
        })
        .collect())
}

impl TopologyAction {
    /// Checks every referenced id exists without mutating anything.
    pub fn validate(&self, graph: &PhysicalGraph) -> Result<(), TopologyError> {
        match self {
            TopologyAction::FailDevice { device } | TopologyAction::RecoverDevice { device } => {
                graph.resolve(device).map(|_| ())
            }
            TopologyAction::SetLinkLatency { src, dst, .. }
            | TopologyAction::SetLinkBandwidth { src, dst, .. } => {
                graph.resolve_link(src, dst).map(|_| ())
            }
        }
    }
}

pub fn apply_topology_event(
    graph: &mut PhysicalGraph,
    action: &TopologyAction,
) -> Result<(), TopologyError> {
    match action {
        TopologyAction::FailDevice { device } => {
            let d = graph.resolve(device)?;
            graph.devices[d.0].status = Status::Down;
        }
        TopologyAction::RecoverDevice { device } => {
            let d = graph.resolve(device)?;
            graph.devices[d.0].status = Status::Up;
        }
        TopologyAction::SetLinkLatency {
            src,
            dst,
            latency_ms,
        } => {
            let l = graph.resolve_link(src, dst)?;
            graph.links[l.0].latency_ms = *latency_ms;
        }
        TopologyAction::SetLinkBandwidth {
            src,
            dst,
            bandwidth_bps,
        } => {
            let l = graph.resolve_link(src, dst)?;
            graph.links[l.0].bandwidth_bps = *bandwidth_bps;
        }
    }
    Ok(())
}
