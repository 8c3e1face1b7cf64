use crate::bevtransform::{BevConfig, Camera};
use crate::error::Result;
use crate::geometry::{OrientedBox3D, Vec3};
use crate::numcore::Tensor;
use crate::rng::SplitMix64;
use crate::synthworld::{generate_world, render_node_views, visible_objects, SizeClass, WorldGraph};

/// Multi-view observation at one node with its detection ground truth.
#[derive(Debug, Clone)]
pub struct DetectionScene {
    pub world_seed: u64,
    pub node: usize,
    pub ego: Vec3,
    pub views: Vec<Tensor>,
    pub cameras: Vec<Camera>,
    pub ground_truth: Vec<OrientedBox3D>,
}

impl DetectionScene {
    pub fn name(&self) -> String {
        format!("world{}_node{}", self.world_seed, self.node)
    }
}

/// Objects whose center lies inside the BEV square around the node and is
/// visible from at least one of its cameras.
pub fn scene_ground_truth(world: &WorldGraph, node: usize, bev: &BevConfig) -> Result<Vec<OrientedBox3D>> {
    let ego = world.position(node)?;
    let mut seen = vec![false; world.objects.len()];
    for view in 0..world.camera.num_views {
        for i in visible_objects(world, node, view)? {
            seen[i] = true;
        }
    }
    Ok(world
        .objects
        .iter()
        .zip(seen)
        .filter(|(o, s)| *s && (o.center[0] - ego[0]).abs() <= bev.range && (o.center[1] - ego[1]).abs() <= bev.range)
        .map(|(o, _)| *o)
        .collect())
}

pub fn build_scene(world: &WorldGraph, node: usize, dim: usize, bev: &BevConfig) -> Result<DetectionScene> {
    let ego = world.position(node)?;
    let views = render_node_views(world, node, dim)?;
    let cameras = world.camera.poses(ego).into_iter().map(|p| (p, world.camera.intrinsics)).collect();
    Ok(DetectionScene {
        world_seed: world.seed,
        node,
        ego,
        views,
        cameras,
        ground_truth: scene_ground_truth(world, node, bev)?,
    })
}

/// `count` scenes from fresh worlds seeded off `seed`, each with at most
/// `max_objects` ground-truth boxes.
pub fn generate_scenes(
    seed: u64,
    count: usize,
    max_objects: usize,
    dim: usize,
    bev: &BevConfig,
) -> Result<Vec<DetectionScene>> {
    let mut rng = SplitMix64::derive(seed, 0xde7);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let world_seed = rng.next_u64();
        let size = if rng.next_f64() < 0.5 { SizeClass::Small } else { SizeClass::Medium };
        let world = generate_world(world_seed, size);
        let node = rng.below(world.node_count());
        let gt = scene_ground_truth(&world, node, bev)?;
        if gt.len() > max_objects {
            continue;
        }
        out.push(build_scene(&world, node, dim, bev)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_is_in_range_and_bounded() {
        let bev = BevConfig::default();
        let scenes = generate_scenes(5, 10, 8, 32, &bev).unwrap();
        assert_eq!(scenes.len(), 10);
        let mut total = 0;
        for s in &scenes {
            assert!(s.ground_truth.len() <= 8);
            assert_eq!(s.views.len(), 6);
            for g in &s.ground_truth {
                assert!((g.center[0] - s.ego[0]).abs() <= 5.0);
                assert!((g.center[1] - s.ego[1]).abs() <= 5.0);
            }
            total += s.ground_truth.len();
        }
        assert!(total > 0);
    }

    #[test]
    fn deterministic() {
        let bev = BevConfig::default();
        let a = generate_scenes(9, 3, 8, 8, &bev).unwrap();
        let b = generate_scenes(9, 3, 8, 8, &bev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name(), y.name());
            assert_eq!(x.ground_truth, y.ground_truth);
            assert_eq!(x.views, y.views);
        }
    }
}
