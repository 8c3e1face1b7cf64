//! Fixtures shared by the criterion benchmarks in `benches/`.

use bsg::bevtransform::BevFeature;
use bsg::geometry::OrientedBox3D;
use bsg::harness::{new_agent, Agent, RunConfig};
use bsg::numcore::{ParamStore, Tensor};
use bsg::synthworld::{generate_world, SizeClass, WorldGraph};
use bsg::SplitMix64;

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.uniform(0.0, 10.0)).collect())
        .expect("shape matches data")
}

pub fn random_box(rng: &mut SplitMix64) -> OrientedBox3D {
    let center = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), 0.5];
    let extent = [rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), 1.0];
    OrientedBox3D::new(center, extent, rng.uniform(-3.0, 3.0), 0).expect("positive extents")
}

/// A default-size agent with untrained weights, a medium world and the BEV
/// of its first node.
pub struct AgentFixture {
    pub store: ParamStore,
    pub agent: Agent,
    pub world: WorldGraph,
    pub bev: BevFeature,
}

pub fn agent_fixture(seed: u64) -> AgentFixture {
    let cfg = RunConfig { seed, ..RunConfig::default() };
    let (store, agent) = new_agent(&cfg, None).expect("default config is valid");
    let world = generate_world(seed, SizeClass::Medium);
    let pos = world.position(0).expect("node 0 exists");
    let views = bsg::synthworld::render_node_views(&world, 0, cfg.model.dim).expect("renderable");
    let cameras: Vec<_> = world.camera.poses(pos).into_iter().map(|p| (p, world.camera.intrinsics)).collect();
    let (bev, _) = agent.encoder.encode(&store, &views, &cameras, pos, 0).expect("encodable");
    AgentFixture { store, agent, world, bev }
}
