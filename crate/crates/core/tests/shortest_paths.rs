use graphfog_core::topology::{
    build_graph, link_delay, route_next_hop, shortest_paths, transmission_time, Architecture,
    Device, LatencyShortestPath, LinkSpec, PhysicalGraph, TopologySpec, WeightKind,
};
use graphfog_core::SimTime;
use proptest::prelude::*;

/// Connected graph: a random spanning tree plus extra random edges.
/// Integer weights keep every path sum exact.
fn connected_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, u32)>)> {
    (2usize..=12).prop_flat_map(|n| {
        let tree = proptest::collection::vec((any::<prop::sample::Index>(), 1u32..=100), n - 1);
        let extra = proptest::collection::vec((0..n, 0..n, 1u32..=100), 0..=2 * n);
        (Just(n), tree, extra).prop_map(|(n, tree, extra)| {
            let mut edges = Vec::new();
            for (v, (parent, w)) in tree.into_iter().enumerate() {
                let v = v + 1;
                edges.push((parent.index(v), v, w));
            }
            for (a, b, w) in extra {
                let exists = edges
                    .iter()
                    .any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a));
                if a != b && !exists {
                    edges.push((a, b, w));
                }
            }
            (n, edges)
        })
    })
}

fn id(i: usize) -> String {
    format!("n{i:02}")
}

fn build(n: usize, edges: &[(usize, usize, u32)]) -> PhysicalGraph {
    let devices = (0..n)
        .map(|i| Device::new(id(i), 1000.0, Architecture::Cpu))
        .collect();
    let links = edges
        .iter()
        .map(|&(a, b, w)| LinkSpec {
            a: id(a),
            b: id(b),
            latency_ms: f64::from(w),
            bandwidth_bps: 1e6,
            weight_km: Some(f64::from(w)),
        })
        .collect();
    build_graph(&TopologySpec { devices, links }).unwrap()
}

fn floyd_warshall(n: usize, edges: &[(usize, usize, u32)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, w) in edges {
        d[a][b] = f64::from(w);
        d[b][a] = f64::from(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dijkstra_matches_floyd_warshall((n, edges) in connected_graph()) {
        let g = build(n, &edges);
        let oracle = floyd_warshall(n, &edges);
        for kind in [WeightKind::DistanceKm, WeightKind::LatencyMs] {
            for (s, row) in oracle.iter().enumerate() {
                let sp = shortest_paths(&g, &id(s), kind).unwrap();
                for (t, &want) in row.iter().enumerate() {
                    let idx = g.lookup(&id(t)).unwrap();
                    prop_assert_eq!(sp.distance(idx), Some(want));
                }
            }
        }
    }

    #[test]
    fn distances_obey_triangle_inequality((n, edges) in connected_graph()) {
        let g = build(n, &edges);
        let all: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let sp = shortest_paths(&g, &id(s), WeightKind::DistanceKm).unwrap();
                (0..n).map(|t| sp.distance(g.lookup(&id(t)).unwrap()).unwrap()).collect()
            })
            .collect();
        for a in 0..n {
            prop_assert_eq!(all[a][a], 0.0);
            for b in 0..n {
                prop_assert_eq!(all[a][b], all[b][a]);
                for c in 0..n {
                    prop_assert!(all[a][c] <= all[a][b] + all[b][c]);
                }
            }
        }
    }

    #[test]
    fn returned_paths_have_the_reported_length((n, edges) in connected_graph()) {
        let g = build(n, &edges);
        let sp = shortest_paths(&g, &id(0), WeightKind::LatencyMs).unwrap();
        for t in 0..n {
            let target = g.lookup(&id(t)).unwrap();
            let path = sp.path_to(target).unwrap();
            prop_assert_eq!(path[0], g.lookup(&id(0)).unwrap());
            prop_assert_eq!(*path.last().unwrap(), target);
            let len: f64 = path
                .windows(2)
                .map(|w| g.link(g.link_between(w[0], w[1]).unwrap()).latency_ms)
                .sum();
            prop_assert_eq!(Some(len), sp.distance(target));
        }
    }

    #[test]
    fn path_delay_is_the_sum_of_link_delays((n, edges) in connected_graph(), bits in 0u64..100_000) {
        let g = build(n, &edges);
        let sp = shortest_paths(&g, &id(0), WeightKind::LatencyMs).unwrap();
        let last = g.lookup(&id(n - 1)).unwrap();
        let path = sp.path_to(last).unwrap();
        let mut total = SimTime::ZERO;
        for w in path.windows(2) {
            total += link_delay(bits, g.link(g.link_between(w[0], w[1]).unwrap())).unwrap();
        }
        let hops = (path.len() - 1) as u64;
        let latency = SimTime::from_millis_f64(sp.distance(last).unwrap());
        let tx = transmission_time(bits, 1e6);
        prop_assert_eq!(total.as_nanos(), latency.as_nanos() + hops * tx.as_nanos());
    }
}

fn tree() -> PhysicalGraph {
    let dev = |id: &str, level: i32| {
        let mut d = Device::new(id, 1000.0, Architecture::Cpu);
        d.level = level;
        d
    };
    let link = |a: &str, b: &str, ms: f64| LinkSpec {
        a: a.into(),
        b: b.into(),
        latency_ms: ms,
        bandwidth_bps: 1e7,
        weight_km: None,
    };
    build_graph(&TopologySpec {
        devices: vec![
            dev("cloud", 0),
            dev("gw-a", 1),
            dev("gw-b", 1),
            dev("edge-a1", 2),
            dev("edge-a2", 2),
            dev("edge-b1", 2),
        ],
        links: vec![
            link("cloud", "gw-a", 40.0),
            link("cloud", "gw-b", 40.0),
            link("gw-a", "edge-a1", 5.0),
            link("gw-a", "edge-a2", 5.0),
            link("gw-b", "edge-b1", 5.0),
        ],
    })
    .unwrap()
}

#[test]
fn three_level_tree_routes_through_the_common_ancestor() {
    let g = tree();
    let hop = |from: &str, to: &str| route_next_hop(&g, from, to, &LatencyShortestPath).unwrap();
    assert_eq!(hop("edge-a1", "edge-a2"), "gw-a");
    assert_eq!(hop("gw-a", "edge-a2"), "edge-a2");
    assert_eq!(hop("edge-a1", "edge-b1"), "gw-a");
    assert_eq!(hop("gw-a", "edge-b1"), "cloud");
    assert_eq!(hop("cloud", "edge-b1"), "gw-b");
    assert_eq!(hop("edge-b1", "cloud"), "gw-b");
    assert_eq!(hop("cloud", "cloud"), "cloud");

    let sp = shortest_paths(&g, "edge-a1", WeightKind::LatencyMs).unwrap();
    assert_eq!(sp.distance(g.lookup("edge-b1").unwrap()), Some(90.0));
    let path: Vec<&str> = sp
        .path_to(g.lookup("edge-b1").unwrap())
        .unwrap()
        .into_iter()
        .map(|d| g.id(d))
        .collect();
    assert_eq!(path, ["edge-a1", "gw-a", "cloud", "gw-b", "edge-b1"]);
}

#[test]
fn km_weights_are_required_for_distance_routing() {
    let g = tree();
    assert!(shortest_paths(&g, "cloud", WeightKind::DistanceKm).is_err());
    assert!(shortest_paths(&g, "nowhere", WeightKind::LatencyMs).is_err());
}
