use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::world::WorldGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub nodes: Vec<usize>,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavAction {
    Stop,
    Goto(usize),
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on (distance, node id).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const TIE_EPS: f64 = 1e-12;

/// Dijkstra from `source` over an arbitrary weighted adjacency.
/// Equal-length alternatives resolve to the smaller predecessor id.
pub fn dijkstra<F>(n: usize, source: usize, neighbors: F) -> (Vec<f64>, Vec<Option<usize>>)
where
    F: Fn(usize) -> Vec<(usize, f64)>,
{
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry { dist: 0.0, node: source });
    while let Some(Entry { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for (v, w) in neighbors(u) {
            if done[v] {
                continue;
            }
            let nd = d + w;
            let better = nd < dist[v] - TIE_EPS;
            let tie = (nd - dist[v]).abs() <= TIE_EPS && pred[v].is_some_and(|p| u < p);
            if better || tie {
                dist[v] = nd;
                pred[v] = Some(u);
                heap.push(Entry { dist: nd, node: v });
            }
        }
    }
    (dist, pred)
}

fn world_neighbors(world: &WorldGraph) -> impl Fn(usize) -> Vec<(usize, f64)> + '_ {
    let adj = world.adjacency();
    move |u| adj[u].iter().map(|&v| (v, world.edge_length(u, v))).collect()
}

pub fn shortest_path(world: &WorldGraph, a: usize, b: usize) -> Result<PathResult> {
    let n = world.node_count();
    if a >= n || b >= n {
        return Err(Error::OutOfRange(format!("nodes ({a}, {b}) not in world of {n}")));
    }
    let (dist, pred) = dijkstra(n, a, world_neighbors(world));
    if !dist[b].is_finite() {
        return Err(Error::Unreachable(format!("node {b} from {a}")));
    }
    let mut nodes = vec![b];
    let mut cur = b;
    while cur != a {
        cur = pred[cur].expect("finite distance has a predecessor");
        nodes.push(cur);
    }
    nodes.reverse();
    Ok(PathResult { nodes, length: dist[b] })
}

/// All-pairs geodesic distances, `d[i][j]`.
pub fn geodesic_distances(world: &WorldGraph) -> Vec<Vec<f64>> {
    let n = world.node_count();
    let nb = world_neighbors(world);
    (0..n).map(|s| dijkstra(n, s, &nb).0).collect()
}

pub fn expert_action(world: &WorldGraph, current: usize, goal: usize) -> Result<NavAction> {
    if current == goal {
        return Ok(NavAction::Stop);
    }
    let path = shortest_path(world, current, goal)?;
    Ok(NavAction::Goto(path.nodes[1]))
}
