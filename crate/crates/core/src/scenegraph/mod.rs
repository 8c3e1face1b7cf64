//! Topological scene graph with node embeddings pooled from BEV grids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bevtransform::BevFeature;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::numcore::{ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;
use crate::synthworld::dijkstra;

pub const DEFAULT_NEIGHBORHOOD: usize = 9;
pub const NEIGHBORHOOD_SIZES: [usize; 3] = [4, 9, 16];

/// BEV cells nearest a point, with their centers' offsets from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNeighborhood {
    pub cells: Vec<usize>,
    /// `cell center - point` in meters, `(Δx, Δy)`.
    pub offsets: Vec<[f64; 2]>,
}

impl GridNeighborhood {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Whether `position` lies inside the square perceived by `bev`.
pub fn in_range(bev: &BevFeature, position: Vec3) -> bool {
    let r = bev.config.range;
    (position[0] - bev.ego[0]).abs() <= r && (position[1] - bev.ego[1]).abs() <= r
}

/// The `k` cells whose centers are nearest to `position` in the plane.
/// Equal distances resolve by `(h, w)`.
pub fn grid_neighborhood(bev: &BevFeature, position: Vec3, k: usize) -> Result<GridNeighborhood> {
    let n = bev.config.num_cells();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("neighborhood of {k} cells in a grid of {n}")));
    }
    if !position.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("node position".into()));
    }
    if !in_range(bev, position) {
        return Err(Error::OutOfRange(format!(
            "node at ({:.3}, {:.3}) outside ±{} m of ego ({:.3}, {:.3})",
            position[0], position[1], bev.config.range, bev.ego[0], bev.ego[1]
        )));
    }
    let c2 = bev.cell_size() * bev.cell_size();
    let mut order: Vec<(i64, usize, [f64; 2])> = (0..n)
        .map(|i| {
            let center = bev.cell_center(i);
            let d = [center[0] - position[0], center[1] - position[1]];
            // Quantized so that distances equal up to rounding tie exactly.
            let key = ((d[0] * d[0] + d[1] * d[1]) / c2 * 1e9).round() as i64;
            (key, i, d)
        })
        .collect();
    // Cell index h·W + w orders the same as (h, w).
    order.sort_by_key(|&(key, i, _)| (key, i));
    order.truncate(k);
    Ok(GridNeighborhood { cells: order.iter().map(|e| e.1).collect(), offsets: order.iter().map(|e| e.2).collect() })
}

/// Unweighted mean of the neighborhood's grid vectors.
pub fn node_embedding(bev: &BevFeature, nb: &GridNeighborhood) -> Result<Vec<f64>> {
    if nb.is_empty() {
        return Err(Error::InvalidArgument("empty neighborhood".into()));
    }
    let d = bev.grid.cols();
    let mut out = vec![0.0; d];
    for &i in &nb.cells {
        if i >= bev.grid.rows() {
            return Err(Error::OutOfRange(format!("cell {i} of {}", bev.grid.rows())));
        }
        for (o, v) in out.iter_mut().zip(bev.grid.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / nb.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    /// Sum of all observed embeddings; the embedding is `sum / count`.
    sum: Vec<f64>,
    pub count: usize,
    pub visited: bool,
    pub position: Vec3,
}

impl GraphNode {
    pub fn embedding(&self) -> Vec<f64> {
        let inv = 1.0 / self.count as f64;
        self.sum.iter().map(|v| v * inv).collect()
    }
}

/// Candidate skipped because it lay outside the perceived square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCandidate {
    pub node: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: usize,
    pub count: usize,
    pub visited: bool,
    pub position: Vec3,
    pub embedding_norm: f64,
}

/// Serializable summary for traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub current: Option<usize>,
    pub nodes: Vec<NodeSnapshot>,
    pub edges: Vec<(usize, usize)>,
}

/// Nodes seen so far in an episode plus a learned stop node.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    nodes: BTreeMap<usize, GraphNode>,
    /// Undirected, stored as `(min, max)`.
    edges: BTreeSet<(usize, usize)>,
    current: Option<usize>,
    pub stop: ParamId,
    pub neighborhood: usize,
}

/// Registers the stop-node embedding parameter.
pub fn register_stop_embedding(store: &mut ParamStore, name: &str, dim: usize, rng: &mut SplitMix64) -> Result<ParamId> {
    store.register_uniform(name, &[dim], 1.0 / (dim as f64).sqrt(), rng)
}

impl SceneGraph {
    pub fn new(stop: ParamId, neighborhood: usize) -> Self {
        Self { nodes: BTreeMap::new(), edges: BTreeSet::new(), current: None, stop, neighborhood }
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.get(&id)
    }

    /// Node ids in ascending order; this is the row order of
    /// [`SceneGraph::embeddings`].
    pub fn node_ids(&self) -> Vec<usize> {
        self.nodes.keys().copied().collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| if a == id { Some(b) } else if b == id { Some(a) } else { None })
            .collect()
    }

    /// Node embeddings in id order with the stop embedding as the last row.
    pub fn embeddings(&self, store: &ParamStore) -> Result<Tensor> {
        let stop = store.value(self.stop).data();
        let mut rows: Vec<Vec<f64>> = self.nodes.values().map(GraphNode::embedding).collect();
        if let Some(r) = rows.first() {
            if r.len() != stop.len() {
                return Err(Error::shape("scene_graph", format!("node dim {} vs stop dim {}", r.len(), stop.len())));
            }
        }
        rows.push(stop.to_vec());
        Tensor::from_rows(&rows)
    }

    fn observe(&mut self, id: usize, position: Vec3, embedding: Vec<f64>) {
        match self.nodes.get_mut(&id) {
            Some(node) => {
                for (s, v) in node.sum.iter_mut().zip(&embedding) {
                    *s += v;
                }
                node.count += 1;
                node.position = position;
            }
            None => {
                self.nodes.insert(id, GraphNode { sum: embedding, count: 1, visited: false, position });
            }
        }
    }

    /// Records the BEV observed at `current`: the current node and every
    /// in-range candidate get one more embedding observation, the current
    /// node is marked visited and edges to the candidates are added.
    pub fn update(
        &mut self,
        bev: &BevFeature,
        current: usize,
        current_position: Vec3,
        candidates: &[(usize, Vec3)],
    ) -> Result<Vec<SkippedCandidate>> {
        let dx = current_position[0] - bev.ego[0];
        let dy = current_position[1] - bev.ego[1];
        if dx.hypot(dy) > 1e-9 {
            return Err(Error::InvalidArgument(format!("node {current} is not at the BEV ego position")));
        }
        bev.grid.ensure_finite("bev grid")?;
        let nb = grid_neighborhood(bev, current_position, self.neighborhood)?;
        let emb = node_embedding(bev, &nb)?;
        self.observe(current, current_position, emb);
        self.nodes.get_mut(&current).expect("just observed").visited = true;
        self.current = Some(current);
        let mut skipped = Vec::new();
        for &(id, position) in candidates {
            if id == current {
                continue;
            }
            if !in_range(bev, position) {
                skipped.push(SkippedCandidate { node: id, position });
                continue;
            }
            let nb = grid_neighborhood(bev, position, self.neighborhood)?;
            self.observe(id, position, node_embedding(bev, &nb)?);
            self.edges.insert((id.min(current), id.max(current)));
        }
        Ok(skipped)
    }

    /// Shortest route from `from` to `to` whose intermediate nodes are all
    /// visited; edges weigh the planar distance between node positions.
    pub fn route(&self, from: usize, to: usize) -> Result<Vec<usize>> {
        if !self.nodes.contains_key(&from) || !self.nodes.contains_key(&to) {
            return Err(Error::OutOfRange(format!("route {from} → {to} over unknown nodes")));
        }
        let ids = self.node_ids();
        let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let (_, pred) = dijkstra(ids.len(), index[&from], |u| {
            let id = ids[u];
            if id != from && !self.nodes[&id].visited {
                return Vec::new();
            }
            let p = self.nodes[&id].position;
            self.neighbors(id)
                .into_iter()
                .map(|v| {
                    let q = self.nodes[&v].position;
                    (index[&v], (p[0] - q[0]).hypot(p[1] - q[1]))
                })
                .collect()
        });
        let mut path = vec![to];
        let mut at = index[&to];
        while ids[at] != from {
            at = pred[at].ok_or_else(|| Error::Unreachable(format!("node {to} from {from} in the known graph")))?;
            path.push(ids[at]);
        }
        path.reverse();
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.current {
            if !self.nodes.get(&c).is_some_and(|n| n.visited) {
                return Err(Error::InvalidArgument(format!("current node {c} not visited")));
            }
        }
        for (id, n) in &self.nodes {
            if n.count == 0 {
                return Err(Error::InvalidArgument(format!("node {id} has no observation")));
            }
            if !n.sum.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of node {id}")));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            current: self.current,
            nodes: self
                .nodes
                .iter()
                .map(|(&id, n)| NodeSnapshot {
                    id,
                    count: n.count,
                    visited: n.visited,
                    position: n.position,
                    embedding_norm: n.embedding().iter().map(|v| v * v).sum::<f64>().sqrt(),
                })
                .collect(),
            edges: self.edges.iter().copied().collect(),
        }
    }
}
