use proptest::prelude::*;
use qkdnet_core::controller::routing::{RouteGraph, Selection};
use qkdnet_core::ids::NodeId;

const NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

fn node(i: usize) -> NodeId {
    NodeId::from(NAMES[i])
}

/// All simple paths from `src` to `dst` as node index sequences.
fn simple_paths(adj: &[[Option<f64>; 6]; 6], src: usize, dst: usize) -> Vec<Vec<usize>> {
    fn walk(adj: &[[Option<f64>; 6]; 6], path: &mut Vec<usize>, dst: usize, out: &mut Vec<Vec<usize>>) {
        let v = *path.last().unwrap();
        if v == dst {
            out.push(path.clone());
            return;
        }
        for w in 0..6 {
            if adj[v][w].is_some() && !path.contains(&w) {
                path.push(w);
                walk(adj, path, dst, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(adj, &mut vec![src], dst, &mut out);
    out
}

fn bottleneck(adj: &[[Option<f64>; 6]; 6], p: &[usize]) -> f64 {
    p.windows(2).map(|w| adj[w[0]][w[1]].unwrap()).fold(f64::INFINITY, f64::min)
}

fn oracle(adj: &[[Option<f64>; 6]; 6], src: usize, dst: usize, min_bps: f64) -> Selection {
    if src == dst {
        return Selection::NoPath;
    }
    let all = simple_paths(adj, src, dst);
    if all.is_empty() {
        return Selection::NoPath;
    }
    let mut ok: Vec<&Vec<usize>> = all.iter().filter(|p| bottleneck(adj, p) >= min_bps).collect();
    if ok.is_empty() {
        let best = all.iter().map(|p| bottleneck(adj, p)).fold(0.0, f64::max);
        return Selection::QosInfeasible { best_bps: best };
    }
    // Names sort like indices, so comparing index vectors is lexicographic.
    ok.sort_by(|a, b| {
        a.len().cmp(&b.len()).then(bottleneck(adj, b).total_cmp(&bottleneck(adj, a))).then(a.cmp(b))
    });
    let p = ok[0];
    Selection::Found { nodes: p.iter().map(|&i| node(i)).collect(), bottleneck_bps: bottleneck(adj, p) }
}

fn graph() -> impl Strategy<Value = [[Option<f64>; 6]; 6]> {
    // Rates from a small set so that ties are common.
    proptest::collection::vec(proptest::option::weighted(0.45, prop_oneof![Just(100.0), Just(200.0), Just(300.0), 1.0f64..400.0]), 15)
        .prop_map(|v| {
            let mut adj = [[None; 6]; 6];
            let mut k = 0;
            for i in 0..6 {
                for j in i + 1..6 {
                    adj[i][j] = v[k];
                    adj[j][i] = v[k];
                    k += 1;
                }
            }
            adj
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn select_matches_exhaustive_search(
        adj in graph(),
        src in 0usize..6,
        dst in 0usize..6,
        min in prop_oneof![Just(0.0), Just(150.0), Just(250.0), 0.0f64..450.0],
    ) {
        let mut g = RouteGraph::new();
        for i in 0..6 {
            for j in i + 1..6 {
                if let Some(r) = adj[i][j] {
                    g.add(&node(i), &node(j), r);
                }
            }
        }
        prop_assert_eq!(g.select(&node(src), &node(dst), min), oracle(&adj, src, dst, min));
    }
}

#[test]
fn parallel_rates_accumulate() {
    let mut g = RouteGraph::new();
    g.add(&node(0), &node(1), 100.0);
    g.add(&node(1), &node(0), 50.0);
    assert_eq!(g.rate(&node(0), &node(1)), Some(150.0));
}
