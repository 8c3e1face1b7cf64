use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_intersection, CameraIntrinsics, OrientedBox3D, Pose, Vec3};
use crate::rng::SplitMix64;

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Distance between neighbouring room centers on the layout lattice: four
/// default BEV cell pitches, so room-to-corridor moves are two whole cells.
pub const LATTICE_SPACING: f64 = 40.0 / 11.0;
const POSITION_JITTER: f64 = 0.05;
const YAW_JITTER: f64 = 0.15;
const EXTENT_JITTER: f64 = 0.05;
const EXTRA_EDGE_PROB: f64 = 0.3;

pub const MIN_EDGE_LENGTH: f64 = 1.5;
pub const MAX_EDGE_LENGTH: f64 = 3.5;
pub const MAX_OBJECT_NODE_DISTANCE: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct CategorySpec {
    pub name: &'static str,
    /// Length, width, height in meters.
    pub extent: Vec3,
}

pub const CATEGORIES: [CategorySpec; 8] = [
    CategorySpec { name: "bed", extent: [2.0, 1.5, 0.5] },
    CategorySpec { name: "sofa", extent: [1.9, 0.9, 0.8] },
    CategorySpec { name: "table", extent: [1.4, 0.9, 0.75] },
    CategorySpec { name: "wardrobe", extent: [1.2, 0.6, 2.0] },
    CategorySpec { name: "bookshelf", extent: [1.2, 0.5, 1.8] },
    CategorySpec { name: "desk", extent: [1.3, 0.7, 0.75] },
    CategorySpec { name: "plant", extent: [0.8, 0.8, 1.2] },
    CategorySpec { name: "fridge", extent: [0.9, 0.8, 1.8] },
];

pub const NUM_CATEGORIES: usize = CATEGORIES.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Kitchen,
    Bedroom,
    Bathroom,
    Livingroom,
    Office,
    Diningroom,
    Closet,
    Laundry,
    Hallway,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Kitchen,
        Region::Bedroom,
        Region::Bathroom,
        Region::Livingroom,
        Region::Office,
        Region::Diningroom,
        Region::Closet,
        Region::Laundry,
        Region::Hallway,
    ];

    pub const ROOMS: [Region; 8] = [
        Region::Kitchen,
        Region::Bedroom,
        Region::Bathroom,
        Region::Livingroom,
        Region::Office,
        Region::Diningroom,
        Region::Closet,
        Region::Laundry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Kitchen => "kitchen",
            Region::Bedroom => "bedroom",
            Region::Bathroom => "bathroom",
            Region::Livingroom => "livingroom",
            Region::Office => "office",
            Region::Diningroom => "diningroom",
            Region::Closet => "closet",
            Region::Laundry => "laundry",
            Region::Hallway => "hallway",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
}

impl SizeClass {
    fn room_range(self) -> (usize, usize) {
        match self {
            SizeClass::Small => (4, 5),
            SizeClass::Medium => (6, 8),
        }
    }

    pub fn node_range(self) -> (usize, usize) {
        match self {
            SizeClass::Small => (6, 12),
            SizeClass::Medium => (10, 20),
        }
    }

    fn lattice(self) -> (i64, i64) {
        match self {
            SizeClass::Small => (3, 3),
            SizeClass::Medium => (3, 4),
        }
    }
}

impl std::str::FromStr for SizeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            other => Err(Error::InvalidArgument(format!("unknown size class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub position: Vec3,
}

/// Cameras mounted at every node: `num_views` level cameras with evenly
/// spaced headings, view 0 facing world +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub num_views: usize,
    pub height: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            num_views: 6,
            height: 1.2,
            intrinsics: CameraIntrinsics {
                fx: 8.0,
                fy: 8.0,
                cx: 8.0,
                cy: 8.0,
                width: 16,
                height: 16,
            },
        }
    }
}

impl CameraRig {
    pub fn heading(&self, view: usize) -> f64 {
        2.0 * std::f64::consts::PI * view as f64 / self.num_views as f64
    }

    pub fn pose(&self, node_position: Vec3, view: usize) -> Pose {
        let p = node_position;
        Pose::level([p[0], p[1], p[2] + self.height], self.heading(view))
    }

    pub fn poses(&self, node_position: Vec3) -> Vec<Pose> {
        (0..self.num_views).map(|v| self.pose(node_position, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGraph {
    pub format_version: u32,
    pub seed: u64,
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
    pub objects: Vec<OrientedBox3D>,
    pub regions: BTreeMap<usize, Region>,
    pub camera: CameraRig,
}

fn dist2d(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn dist3(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl WorldGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn position(&self, id: usize) -> Result<Vec3> {
        self.nodes
            .get(id)
            .map(|n| n.position)
            .ok_or_else(|| Error::OutOfRange(format!("node {id} not in world of {} nodes", self.nodes.len())))
    }

    pub fn region(&self, id: usize) -> Region {
        self.regions.get(&id).copied().unwrap_or(Region::Hallway)
    }

    /// Sorted neighbour lists indexed by node id.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![BTreeSet::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    pub fn edge_length(&self, a: usize, b: usize) -> f64 {
        dist3(self.nodes[a].position, self.nodes[b].position)
    }

    /// Objects whose centers lie within `radius` (horizontal distance) of a node.
    pub fn objects_near(&self, id: usize, radius: f64) -> Vec<usize> {
        let p = self.nodes[id].position;
        (0..self.objects.len())
            .filter(|&i| dist2d(self.objects[i].center, p) <= radius)
            .collect()
    }

    pub fn category_count(&self, category: usize) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::InvalidArgument("world has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::InvalidArgument(format!("node at index {i} has id {}", node.id)));
            }
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidArgument(format!("bad edge ({a}, {b})")));
            }
            let len = self.edge_length(a, b);
            if !(MIN_EDGE_LENGTH..=MAX_EDGE_LENGTH).contains(&len) {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) has length {len:.3}")));
            }
        }
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("world graph is disconnected".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.category >= NUM_CATEGORIES {
                return Err(Error::InvalidArgument(format!("object {i} has category {}", o.category)));
            }
            let near = self.nodes.iter().any(|nd| dist2d(nd.position, o.center) <= MAX_OBJECT_NODE_DISTANCE);
            if !near {
                return Err(Error::InvalidArgument(format!("object {i} is farther than 5 m from every node")));
            }
        }
        self.camera.intrinsics.validate()?;
        if self.camera.num_views == 0 {
            return Err(Error::InvalidArgument("camera rig has no views".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: WorldGraph = serde_json::from_str(text)?;
        if w.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported world format {}", w.format_version)));
        }
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const LAYOUT_STREAM: u64 = 1;
const OBJECT_STREAM: u64 = 2;

/// Deterministic world for a seed: rooms on a lattice, one node per room and
/// one corridor node on every room-to-room connection.
pub fn generate_world(seed: u64, size: SizeClass) -> WorldGraph {
    let mut rng = SplitMix64::derive(seed, LAYOUT_STREAM);
    let (lo, hi) = size.room_range();
    let room_count = rng.range_inclusive(lo, hi);
    let (rows, cols) = size.lattice();
    let (_, max_nodes) = size.node_range();

    // Grow a connected set of lattice cells, recording the tree edge used to
    // attach each new cell.
    let mut cells: Vec<(i64, i64)> = vec![(rng.below(rows as usize) as i64, rng.below(cols as usize) as i64)];
    let mut connections: Vec<(usize, usize)> = Vec::new();
    while cells.len() < room_count {
        let mut frontier: BTreeSet<(i64, i64)> = BTreeSet::new();
        for &(r, c) in &cells {
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let nb = (r + dr, c + dc);
                if nb.0 >= 0 && nb.0 < rows && nb.1 >= 0 && nb.1 < cols && !cells.contains(&nb) {
                    frontier.insert(nb);
                }
            }
        }
        let frontier: Vec<_> = frontier.into_iter().collect();
        let next = frontier[rng.below(frontier.len())];
        let attach: Vec<usize> = (0..cells.len())
            .filter(|&i| (cells[i].0 - next.0).abs() + (cells[i].1 - next.1).abs() == 1)
            .collect();
        let parent = attach[rng.below(attach.len())];
        cells.push(next);
        connections.push((parent, cells.len() - 1));
    }
    let mut extra: Vec<(usize, usize)> = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let adjacent = (cells[i].0 - cells[j].0).abs() + (cells[i].1 - cells[j].1).abs() == 1;
            if adjacent && !connections.contains(&(i, j)) && !connections.contains(&(j, i)) {
                extra.push((i, j));
            }
        }
    }
    for pair in extra {
        if room_count + connections.len() < max_nodes && rng.next_f64() < EXTRA_EDGE_PROB {
            connections.push(pair);
        }
    }

    let jitter = |rng: &mut SplitMix64| rng.uniform(-POSITION_JITTER, POSITION_JITTER);
    let mut nodes = Vec::new();
    for &(r, c) in &cells {
        let position = [
            r as f64 * LATTICE_SPACING + jitter(&mut rng),
            c as f64 * LATTICE_SPACING + jitter(&mut rng),
            0.0,
        ];
        nodes.push(Node { id: nodes.len(), position });
    }
    let mut edges = Vec::new();
    for &(a, b) in &connections {
        let (pa, pb) = (nodes[a].position, nodes[b].position);
        let position = [
            (pa[0] + pb[0]) / 2.0 + jitter(&mut rng),
            (pa[1] + pb[1]) / 2.0 + jitter(&mut rng),
            0.0,
        ];
        let id = nodes.len();
        nodes.push(Node { id, position });
        edges.push((a.min(id), a.max(id)));
        edges.push((b.min(id), b.max(id)));
    }

    let mut room_types = Region::ROOMS.to_vec();
    rng.shuffle(&mut room_types);
    let mut regions = BTreeMap::new();
    for id in 0..nodes.len() {
        let region = if id < cells.len() { room_types[id] } else { Region::Hallway };
        regions.insert(id, region);
    }

    let objects = place_objects(seed, &nodes[..cells.len()]);
    let world = WorldGraph {
        format_version: WORLD_FORMAT_VERSION,
        seed,
        nodes,
        edges,
        objects,
        regions,
        camera: CameraRig::default(),
    };
    debug_assert!(world.validate().is_ok());
    world
}

fn place_objects(seed: u64, rooms: &[Node]) -> Vec<OrientedBox3D> {
    let mut rng = SplitMix64::derive(seed, OBJECT_STREAM);
    let mut objects: Vec<OrientedBox3D> = Vec::new();
    let mut used = [false; NUM_CATEGORIES];
    for room in rooms {
        let count = rng.range_inclusive(2, 4);
        let mut placed_here: Vec<OrientedBox3D> = Vec::new();
        for _ in 0..count {
            // Prefer categories not yet present so goal objects tend to be unique.
            let fresh: Vec<usize> = (0..NUM_CATEGORIES)
                .filter(|&c| !used[c] && !placed_here.iter().any(|o| o.category == c))
                .collect();
            let category = if fresh.is_empty() {
                rng.below(NUM_CATEGORIES)
            } else {
                fresh[rng.below(fresh.len())]
            };
            let base = CATEGORIES[category].extent;
            let extent = base.map(|e| e * (1.0 + rng.uniform(-EXTENT_JITTER, EXTENT_JITTER)));
            for _attempt in 0..64 {
                let dx = rng.uniform(-1.4, 1.4);
                let dy = rng.uniform(-1.4, 1.4);
                if (dx * dx + dy * dy).sqrt() < 1.0 {
                    continue;
                }
                let yaw = rng.uniform(-YAW_JITTER, YAW_JITTER);
                let center = [room.position[0] + dx, room.position[1] + dy, extent[2] / 2.0];
                let candidate = OrientedBox3D::new(center, extent, yaw, category).expect("positive extents");
                let padded = OrientedBox3D { extent: [extent[0] + 0.2, extent[1] + 0.2, extent[2]], ..candidate };
                if placed_here.iter().all(|o| footprint_intersection(o, &padded) <= 0.0) {
                    placed_here.push(candidate);
                    used[category] = true;
                    break;
                }
            }
        }
        objects.extend(placed_here);
    }
    objects
}
