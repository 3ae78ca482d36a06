//! Browser bindings: dispatch maps, pipeline latency and the road network.

use graphfog_core::application::PlacementPolicy;
use graphfog_core::experiment::{fire, run_once, RunSpec, Scenario, ESN_DEVICE};
use graphfog_core::scenario::{dispatch, resolve_conflicts, Incident, PathCache};
use graphfog_core::topology::{Architecture, Device};
use graphfog_core::SimTime;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn zones_of(list: &str) -> Vec<String> {
    list.split(',')
        .map(str::trim)
        .filter(|z| !z.is_empty())
        .map(String::from)
        .collect()
}

/// Nodes, edges and dispatch settings of the shipped road network.
pub fn road_network_json() -> String {
    let scenario = Scenario::canonical();
    serde_json::to_string(&scenario.road.file).expect("road file serializes")
}

/// Plans for simultaneous incidents at `zones` (comma separated), with
/// units shared with an earlier incident marked conflicted.
pub fn dispatch_json(zones: &str) -> Result<String, String> {
    let scenario = Scenario::canonical();
    let road = &scenario.road;
    let esn = Device::new(ESN_DEVICE, 10_000.0, Architecture::Fpga);
    let mut cache = PathCache::new(road.config.cold_mi, road.config.warm_mi);
    let mut plans = Vec::new();
    for (n, zone) in zones_of(zones).into_iter().enumerate() {
        let incident = Incident {
            id: format!("i{}-{zone}", n + 1),
            zone,
            kind: "fire".into(),
            raised_at: SimTime::ZERO,
        };
        plans.push(dispatch(&incident, road, &mut cache, &esn).map_err(|e| e.to_string())?);
    }
    if plans.is_empty() {
        return Err("no zones given".into());
    }
    let rates = resolve_conflicts(&mut plans, road.config.conflict_penalty);
    let out = json!({ "plans": plans, "conflictRates": rates, "cache": { "hits": cache.hits, "misses": cache.misses } });
    Ok(out.to_string())
}

/// Simulates simultaneous incidents at `zones` with the given edge-server
/// capacity and placement policy (`explicit`, `edgeward` or `cloud`).
pub fn pipeline_json(
    zones: &str,
    esn_mips: f64,
    esn_parallelism: u32,
    placement: &str,
    seed: u64,
) -> Result<String, String> {
    let mut scenario = Scenario::canonical();
    let esn = scenario
        .topology
        .devices
        .iter_mut()
        .find(|d| d.id == ESN_DEVICE)
        .ok_or("no edge server in topology")?;
    esn.mips = esn_mips;
    esn.parallelism_degree = esn_parallelism;
    scenario.app.placement = match placement {
        "explicit" => scenario.app.placement.clone(),
        "edgeward" => PlacementPolicy::Edgeward,
        "cloud" => PlacementPolicy::CloudOnly,
        other => return Err(format!("unknown placement `{other}`")),
    };
    scenario.check().map_err(|e| e.to_string())?;
    let incidents = zones_of(zones)
        .iter()
        .map(|z| fire(0.0, z))
        .collect::<Vec<_>>();
    if incidents.is_empty() {
        return Err("no zones given".into());
    }
    let report = run_once(
        &scenario,
        &RunSpec::new("demo", incidents),
        0,
        seed,
        None,
        false,
    )
    .map_err(|e| e.to_string())?;
    let incidents: Vec<Value> = report
        .incidents
        .iter()
        .map(|i| {
            json!({
                "incident": i.incident_id,
                "zone": i.zone,
                "coordinationMs": i.coordination_latency_ms,
                "breakdownMs": i.breakdown.map(|b| json!({
                    "propagation": b.propagation.as_millis_f64(),
                    "transmission": b.transmission.as_millis_f64(),
                    "linkWait": b.link_wait.as_millis_f64(),
                    "queueing": b.queueing.as_millis_f64(),
                    "service": b.service.as_millis_f64(),
                })),
                "meanInterventionMin": i.mean_intervention_minutes,
                "conflictRate": i.plan.as_ref().map(|p| p.conflict_rate),
                "tuples": i.tuples,
            })
        })
        .collect();
    let devices: Vec<Value> = report
        .devices
        .iter()
        .filter(|d| d.completed > 0)
        .map(|d| json!({ "device": d.device_id, "completed": d.completed, "energyJ": d.energy_j, "cost": d.cost }))
        .collect();
    Ok(json!({ "incidents": incidents, "devices": devices, "tuples": report.tuples }).to_string())
}

#[wasm_bindgen(js_name = roadNetwork)]
pub fn road_network() -> String {
    road_network_json()
}

#[wasm_bindgen(js_name = dispatchZones)]
pub fn dispatch_zones(zones: &str) -> Result<String, JsError> {
    dispatch_json(zones).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulatePipeline)]
pub fn simulate_pipeline(
    zones: &str,
    esn_mips: f64,
    esn_parallelism: u32,
    placement: &str,
    seed: u64,
) -> Result<String, JsError> {
    pipeline_json(zones, esn_mips, esn_parallelism, placement, seed).map_err(|e| JsError::new(&e))
}
