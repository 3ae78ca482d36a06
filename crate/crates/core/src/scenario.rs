//! Smart emergency response: a 25-node road network, zone-keyed Dijkstra
//! cache, eight-unit dispatch and unit-sharing conflicts between overlapping
//! incidents.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::application::{ArrivalContext, Emission, ModuleLogic, Tuple};
use crate::time::SimTime;
use crate::topology::{
    build_graph, compute_service_time, shortest_paths, Architecture, Device, LinkSpec,
    PhysicalGraph, TopologyError, TopologySpec, WeightKind,
};

pub const UNITS_PER_INCIDENT: usize = 8;
pub const IOPS_PREFIX: &str = "iops-";
pub const SAS_PREFIX: &str = "sas-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Zone,
    Fire,
    Police,
    Medical,
    Antiterror,
    Relay,
}

impl Role {
    pub fn is_unit(self) -> bool {
        !matches!(self, Role::Zone | Role::Relay)
    }

    fn canonical_ids(self) -> Vec<String> {
        let (prefix, n) = match self {
            Role::Zone => ("z", 5),
            Role::Fire => ("c", 3),
            Role::Police => ("p", 2),
            Role::Medical => ("u", 3),
            Role::Antiterror => ("b", 2),
            Role::Relay => ("a", 10),
        };
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }

    pub const ALL: [Role; 6] = [
        Role::Zone,
        Role::Fire,
        Role::Police,
        Role::Medical,
        Role::Antiterror,
        Role::Relay,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNode {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadEdge {
    pub a: String,
    pub b: String,
    pub km: f64,
}

fn default_speed() -> f64 {
    1.0
}
fn default_cold() -> f64 {
    20.0
}
fn default_warm() -> f64 {
    0.1
}
fn default_penalty() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoadConfig {
    #[serde(default = "default_speed")]
    pub unit_speed_km_per_min: f64,
    #[serde(default = "default_cold", rename = "coldMI")]
    pub cold_mi: f64,
    #[serde(default = "default_warm", rename = "warmMI")]
    pub warm_mi: f64,
    #[serde(default = "default_penalty")]
    pub conflict_penalty: f64,
    /// Upper bound on units of each role per incident; absent means no limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<BTreeMap<Role, usize>>,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            unit_speed_km_per_min: default_speed(),
            cold_mi: default_cold(),
            warm_mi: default_warm(),
            conflict_penalty: default_penalty(),
            quota: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadFile {
    pub nodes: Vec<RoadNode>,
    pub edges: Vec<RoadEdge>,
    #[serde(default)]
    pub config: RoadConfig,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("role {role:?}: expected {expected}, found {found}")]
    RoleCountMismatch {
        role: Role,
        expected: String,
        found: String,
    },
    #[error("expected {expected} edges, found {found}")]
    WrongEdgeCount { expected: usize, found: usize },
    #[error("expected {expected} nodes, found {found}")]
    WrongNodeCount { expected: usize, found: usize },
    #[error("road network is not connected: `{0}` unreachable from `{1}`")]
    NotConnected(String, String),
    #[error("edge {0}-{1} has non-positive length")]
    BadEdgeLength(String, String),
    #[error("invalid road config: {0}")]
    BadConfig(String),
    #[error("`{0}` is not a zone")]
    NotAZone(String),
    #[error("zone `{0}` cannot reach {1} units")]
    ZoneUnreachable(String, usize),
    #[error("edge server is down")]
    EsnDown,
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How strictly `load_road_network` checks the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    /// The canonical 25-node / 41-edge city with fixed role ids.
    Canonical,
    /// Any connected network with at least one zone and eight units.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub graph: PhysicalGraph,
    pub roles: BTreeMap<String, Role>,
    pub config: RoadConfig,
    pub file: RoadFile,
}

pub const CANONICAL_NODES: usize = 25;
pub const CANONICAL_EDGES: usize = 41;

pub fn parse_road_network(
    text: &str,
    validation: Validation,
) -> Result<RoadNetwork, ScenarioError> {
    let file: RoadFile = serde_json::from_str(text)?;
    load_road_network(file, validation)
}

pub fn load_road_network(
    file: RoadFile,
    validation: Validation,
) -> Result<RoadNetwork, ScenarioError> {
    let c = &file.config;
    if c.unit_speed_km_per_min.is_nan() || c.unit_speed_km_per_min <= 0.0 {
        return Err(ScenarioError::BadConfig(
            "unitSpeedKmPerMin must be positive".into(),
        ));
    }
    if !(c.cold_mi >= 0.0 && c.warm_mi >= 0.0) {
        return Err(ScenarioError::BadConfig(
            "coldMI and warmMI must be non-negative".into(),
        ));
    }
    if c.conflict_penalty.is_nan() || c.conflict_penalty < 1.0 {
        return Err(ScenarioError::BadConfig(
            "conflictPenalty must be >= 1".into(),
        ));
    }
    let mut by_role: BTreeMap<Role, BTreeSet<String>> = BTreeMap::new();
    for n in &file.nodes {
        by_role.entry(n.role).or_default().insert(n.id.clone());
    }
    match validation {
        Validation::Canonical => {
            for role in Role::ALL {
                let expected: BTreeSet<String> = role.canonical_ids().into_iter().collect();
                let found = by_role.get(&role).cloned().unwrap_or_default();
                if found != expected {
                    return Err(ScenarioError::RoleCountMismatch {
                        role,
                        expected: expected.into_iter().collect::<Vec<_>>().join(","),
                        found: found.into_iter().collect::<Vec<_>>().join(","),
                    });
                }
            }
            if file.nodes.len() != CANONICAL_NODES {
                return Err(ScenarioError::WrongNodeCount {
                    expected: CANONICAL_NODES,
                    found: file.nodes.len(),
                });
            }
            if file.edges.len() != CANONICAL_EDGES {
                return Err(ScenarioError::WrongEdgeCount {
                    expected: CANONICAL_EDGES,
                    found: file.edges.len(),
                });
            }
        }
        Validation::Relaxed => {
            let zones = by_role.get(&Role::Zone).map_or(0, BTreeSet::len);
            if zones == 0 {
                return Err(ScenarioError::RoleCountMismatch {
                    role: Role::Zone,
                    expected: ">=1".into(),
                    found: "0".into(),
                });
            }
            let units: usize = by_role
                .iter()
                .filter(|(r, _)| r.is_unit())
                .map(|(_, s)| s.len())
                .sum();
            if units < UNITS_PER_INCIDENT {
                return Err(ScenarioError::RoleCountMismatch {
                    role: Role::Fire,
                    expected: format!(">={UNITS_PER_INCIDENT} units"),
                    found: units.to_string(),
                });
            }
        }
    }
    for e in &file.edges {
        if !(e.km > 0.0 && e.km.is_finite()) {
            return Err(ScenarioError::BadEdgeLength(e.a.clone(), e.b.clone()));
        }
    }
    let spec = TopologySpec {
        devices: file
            .nodes
            .iter()
            .map(|n| Device::new(n.id.clone(), 1.0, Architecture::Cpu))
            .collect(),
        links: file
            .edges
            .iter()
            .map(|e| LinkSpec {
                a: e.a.clone(),
                b: e.b.clone(),
                latency_ms: 0.0,
                bandwidth_bps: f64::INFINITY,
                weight_km: Some(e.km),
            })
            .collect(),
    };
    let graph = build_graph(&spec)?;
    if let Some(first) = file.nodes.first() {
        let sp = shortest_paths(&graph, &first.id, WeightKind::DistanceKm)?;
        if let Some(n) = file
            .nodes
            .iter()
            .find(|n| sp.distance(graph.lookup(&n.id).expect("built")).is_none())
        {
            return Err(ScenarioError::NotConnected(n.id.clone(), first.id.clone()));
        }
    }
    let roles = file.nodes.iter().map(|n| (n.id.clone(), n.role)).collect();
    Ok(RoadNetwork {
        graph,
        roles,
        config: file.config.clone(),
        file,
    })
}

impl RoadNetwork {
    pub fn role(&self, id: &str) -> Option<Role> {
        self.roles.get(id).copied()
    }

    pub fn zones(&self) -> Vec<String> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::Zone)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn units(&self) -> Vec<String> {
        self.roles
            .iter()
            .filter(|(_, r)| r.is_unit())
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Road distance in km from `zone` to every reachable node.
    pub fn distances_from(&self, zone: &str) -> Result<BTreeMap<String, f64>, ScenarioError> {
        let sp = shortest_paths(&self.graph, zone, WeightKind::DistanceKm)?;
        Ok(self
            .graph
            .device_indices()
            .filter_map(|d| sp.distance(d).map(|km| (self.graph.id(d).to_string(), km)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Incident {
    pub id: String,
    pub zone: String,
    pub kind: String,
    pub raised_at: SimTime,
}

/// One line of an incident script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IncidentEntry {
    pub at_ms: f64,
    pub zone: String,
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "fire".into()
}

pub fn parse_incident_script(text: &str) -> Result<Vec<IncidentEntry>, serde_json::Error> {
    serde_json::from_str(text)
}

/// Zone-keyed store of Dijkstra distance maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathCache {
    #[serde(skip)]
    entries: BTreeMap<String, Arc<BTreeMap<String, f64>>>,
    pub hits: u64,
    pub misses: u64,
    #[serde(rename = "coldMI")]
    pub cold_mi: f64,
    #[serde(rename = "warmMI")]
    pub warm_mi: f64,
    pub enabled: bool,
}

/// Result of a cache lookup: the map and the MI charged for obtaining it.
#[derive(Debug, Clone)]
pub struct CacheLookup {
    pub distances: Arc<BTreeMap<String, f64>>,
    pub hit: bool,
    pub charged_mi: f64,
}

impl PathCache {
    pub fn new(cold_mi: f64, warm_mi: f64) -> Self {
        PathCache {
            entries: BTreeMap::new(),
            hits: 0,
            misses: 0,
            cold_mi,
            warm_mi,
            enabled: true,
        }
    }

    pub fn disabled(cold_mi: f64) -> Self {
        PathCache {
            enabled: false,
            ..PathCache::new(cold_mi, cold_mi)
        }
    }

    pub fn lookup(
        &mut self,
        zone: &str,
        network: &RoadNetwork,
    ) -> Result<CacheLookup, ScenarioError> {
        if self.enabled {
            if let Some(d) = self.entries.get(zone) {
                self.hits += 1;
                return Ok(CacheLookup {
                    distances: Arc::clone(d),
                    hit: true,
                    charged_mi: self.warm_mi,
                });
            }
        }
        let d = Arc::new(network.distances_from(zone)?);
        self.misses += 1;
        if self.enabled {
            self.entries.insert(zone.to_string(), Arc::clone(&d));
        }
        Ok(CacheLookup {
            distances: d,
            hit: false,
            charged_mi: self.cold_mi,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Assignment {
    pub unit: String,
    pub role: Role,
    pub distance_km: f64,
    pub travel_minutes: f64,
    pub conflicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DispatchPlan {
    pub incident_id: String,
    pub zone: String,
    pub kind: String,
    pub raised_at: SimTime,
    pub dispatched_at: SimTime,
    pub assignments: Vec<Assignment>,
    pub conflict_rate: f64,
    pub cache_hit: bool,
    #[serde(rename = "dijkstraMI")]
    pub dijkstra_mi: f64,
    /// Time the ESN spends on the distance-map lookup alone.
    pub dijkstra_service: SimTime,
    /// Filled in once the confirmation loop samples are in.
    pub coordination_latency_ms: Option<f64>,
}

impl DispatchPlan {
    pub fn units(&self) -> BTreeSet<&str> {
        self.assignments.iter().map(|a| a.unit.as_str()).collect()
    }
}

/// The units of `ranked` honouring an optional per-role quota, in rank order.
fn select_units(
    ranked: &[(f64, String, Role)],
    quota: Option<&BTreeMap<Role, usize>>,
) -> Vec<(f64, String, Role)> {
    let mut taken: BTreeMap<Role, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(UNITS_PER_INCIDENT);
    for (km, id, role) in ranked {
        if out.len() == UNITS_PER_INCIDENT {
            break;
        }
        if let Some(limit) = quota.and_then(|q| q.get(role)) {
            if taken.get(role).copied().unwrap_or(0) >= *limit {
                continue;
            }
        }
        *taken.entry(*role).or_insert(0) += 1;
        out.push((*km, id.clone(), *role));
    }
    out
}

/// Ranks every unit by road distance from the incident zone (ties by id) and
/// assigns the eight nearest.
pub fn dispatch(
    incident: &Incident,
    network: &RoadNetwork,
    cache: &mut PathCache,
    esn: &Device,
) -> Result<DispatchPlan, ScenarioError> {
    if !esn.is_up() {
        return Err(ScenarioError::EsnDown);
    }
    if network.role(&incident.zone) != Some(Role::Zone) {
        return Err(ScenarioError::NotAZone(incident.zone.clone()));
    }
    let lookup = cache.lookup(&incident.zone, network)?;
    let mut ranked: Vec<(f64, String, Role)> = network
        .roles
        .iter()
        .filter(|(_, r)| r.is_unit())
        .filter_map(|(id, r)| lookup.distances.get(id).map(|km| (*km, id.clone(), *r)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let chosen = select_units(&ranked, network.config.quota.as_ref());
    if chosen.len() < UNITS_PER_INCIDENT {
        return Err(ScenarioError::ZoneUnreachable(
            incident.zone.clone(),
            UNITS_PER_INCIDENT,
        ));
    }
    let speed = network.config.unit_speed_km_per_min;
    let assignments = chosen
        .into_iter()
        .map(|(km, unit, role)| Assignment {
            unit,
            role,
            distance_km: km,
            travel_minutes: km / speed,
            conflicted: false,
        })
        .collect();
    let dijkstra_service = compute_service_time(lookup.charged_mi, esn, 0)?.duration;
    Ok(DispatchPlan {
        incident_id: incident.id.clone(),
        zone: incident.zone.clone(),
        kind: incident.kind.clone(),
        raised_at: incident.raised_at,
        dispatched_at: incident.raised_at,
        assignments,
        conflict_rate: 0.0,
        cache_hit: lookup.hit,
        dijkstra_mi: lookup.charged_mi,
        dijkstra_service,
        coordination_latency_ms: None,
    })
}

/// Marks the units of `plan` already in `claimed` as conflicted, applying the
/// travel penalty, and returns the conflict rate.
pub fn mark_conflicts(plan: &mut DispatchPlan, claimed: &BTreeSet<String>, penalty: f64) -> f64 {
    let mut conflicted = 0;
    for a in &mut plan.assignments {
        if claimed.contains(&a.unit) && !a.conflicted {
            a.conflicted = true;
            a.travel_minutes *= penalty;
        }
        conflicted += usize::from(a.conflicted);
    }
    plan.conflict_rate = conflicted as f64 / plan.assignments.len() as f64;
    plan.conflict_rate
}

/// Treats `plans` as overlapping in time, in arrival order: each plan's units
/// already claimed by an earlier plan become conflicted.
pub fn resolve_conflicts(plans: &mut [DispatchPlan], penalty: f64) -> Vec<f64> {
    let mut claimed = BTreeSet::new();
    let mut rates = Vec::with_capacity(plans.len());
    for plan in plans.iter_mut() {
        rates.push(mark_conflicts(plan, &claimed, penalty));
        claimed.extend(plan.assignments.iter().map(|a| a.unit.clone()));
    }
    rates
}

/// Minutes from alert to the unit reaching the zone.
pub fn intervention_time(assignment: &Assignment, plan: &DispatchPlan) -> f64 {
    plan.coordination_latency_ms.unwrap_or(0.0) / 60_000.0 + assignment.travel_minutes
}

#[derive(Debug, Clone, PartialEq)]
struct Claim {
    incident: String,
    until: SimTime,
}

/// A failed dispatch attempt inside the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DispatchFailure {
    pub incident_id: String,
    pub at: SimTime,
    pub reason: String,
}

/// ESN module logic: looks up the zone's distance map, picks eight units,
/// claims them for their travel time and sends one order per unit to its
/// order processor.
pub struct Coordinator {
    network: Arc<RoadNetwork>,
    pub cache: PathCache,
    claims: BTreeMap<String, Claim>,
    pub plans: Vec<DispatchPlan>,
    pub failures: Vec<DispatchFailure>,
}

impl Coordinator {
    pub fn new(network: Arc<RoadNetwork>, cache_enabled: bool) -> Self {
        let c = &network.config;
        let cache = if cache_enabled {
            PathCache::new(c.cold_mi, c.warm_mi)
        } else {
            PathCache::disabled(c.cold_mi)
        };
        Coordinator {
            network,
            cache,
            claims: BTreeMap::new(),
            plans: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    fn claimed_at(&self, now: SimTime, incident: &str) -> BTreeSet<String> {
        self.claims
            .iter()
            .filter(|(_, c)| c.until > now && c.incident != incident)
            .map(|(u, _)| u.clone())
            .collect()
    }
}

impl ModuleLogic for Coordinator {
    fn on_tuple_arrival(&mut self, ctx: &mut ArrivalContext<'_>, tuple: &Tuple) {
        let incident = Incident {
            id: tuple
                .meta
                .get("incident")
                .cloned()
                .unwrap_or_else(|| format!("t{}", tuple.origin.0)),
            zone: tuple.meta.get("zone").cloned().unwrap_or_default(),
            kind: tuple.meta.get("kind").cloned().unwrap_or_else(default_kind),
            raised_at: tuple.origin_created_at,
        };
        let mut plan = match dispatch(&incident, &self.network, &mut self.cache, ctx.host) {
            Ok(p) => p,
            Err(e) => {
                self.failures.push(DispatchFailure {
                    incident_id: incident.id,
                    at: ctx.now,
                    reason: e.to_string(),
                });
                return;
            }
        };
        plan.dispatched_at = ctx.now;
        ctx.charge_mi(plan.dijkstra_mi);
        let claimed = self.claimed_at(ctx.now, &incident.id);
        mark_conflicts(&mut plan, &claimed, self.network.config.conflict_penalty);
        for a in &plan.assignments {
            let until = ctx.now + SimTime::from_secs_f64(a.travel_minutes * 60.0);
            let entry = self.claims.entry(a.unit.clone()).or_insert(Claim {
                incident: incident.id.clone(),
                until,
            });
            if entry.until <= ctx.now || until > entry.until {
                *entry = Claim {
                    incident: incident.id.clone(),
                    until,
                };
            }
        }
        let edges: Vec<usize> = ctx.app.outgoing(ctx.module).map(|(i, _)| i).collect();
        for a in &plan.assignments {
            for &edge in &edges {
                let meta = BTreeMap::from([("unit".to_string(), a.unit.clone())]);
                ctx.emit(Emission {
                    edge,
                    target_hint: Some(format!("{IOPS_PREFIX}{}", a.unit)),
                    meta,
                });
            }
        }
        self.plans.push(plan);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
