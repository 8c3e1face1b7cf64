use super::world::{WorldGraph, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::geometry::{project_point, frustum_visible, Projection};
use crate::numcore::Tensor;
use crate::rng::SplitMix64;

pub const SPLAT_SIGMA: f64 = 1.5;
const EMBEDDING_SEED: u64 = 0x5EED_CA7E_6021;

/// Unit-norm embedding of a category in channels `0..dim-1`; the last
/// channel is reserved for background and is zero here.
pub fn category_embedding(category: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2, "feature dim must leave room for the background channel");
    let mut rng = SplitMix64::derive(EMBEDDING_SEED, category as u64);
    let mut e: Vec<f64> = (0..dim - 1).map(|_| rng.normal()).collect();
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    e.iter_mut().for_each(|x| *x /= norm);
    e.push(0.0);
    e
}

/// Objects whose centers are visible from a node's camera `view`.
pub fn visible_objects(world: &WorldGraph, node: usize, view: usize) -> Result<Vec<usize>> {
    let pos = world.position(node)?;
    if view >= world.camera.num_views {
        return Err(Error::OutOfRange(format!("view {view} of {}", world.camera.num_views)));
    }
    let pose = world.camera.pose(pos, view);
    let k = &world.camera.intrinsics;
    Ok((0..world.objects.len())
        .filter(|&i| frustum_visible(world.objects[i].center, &pose, k))
        .collect())
}

/// Synthetic `[Hc, Wc, dim]` feature map for one camera.
///
/// Every visible object adds its category embedding with a Gaussian
/// footprint around the projected center, scaled by `1 / (1 + depth)`. The
/// last channel holds `1 - min(1, Σ footprint)` as background.
pub fn render_view_features(world: &WorldGraph, node: usize, view: usize, dim: usize) -> Result<Tensor> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("feature dim {dim} < 2")));
    }
    let visible = visible_objects(world, node, view)?;
    let pos = world.position(node)?;
    let pose = world.camera.pose(pos, view);
    let k = world.camera.intrinsics;
    let (h, w) = (k.height, k.width);
    let mut out = Tensor::zeros(&[h, w, dim]);
    let mut coverage = vec![0.0; h * w];
    let embeddings: Vec<Vec<f64>> = (0..NUM_CATEGORIES).map(|c| category_embedding(c, dim)).collect();
    let data = out.data_mut();
    for i in visible {
        let obj = &world.objects[i];
        let Projection::Image { u, v, depth } = project_point(obj.center, &pose, &k) else {
            continue;
        };
        let magnitude = 1.0 / (1.0 + depth);
        let emb = &embeddings[obj.category];
        for row in 0..h {
            for col in 0..w {
                let d2 = (col as f64 - u).powi(2) + (row as f64 - v).powi(2);
                let g = (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                let pix = row * w + col;
                coverage[pix] += g;
                let cell = &mut data[pix * dim..(pix + 1) * dim - 1];
                for (x, e) in cell.iter_mut().zip(emb) {
                    *x += g * magnitude * e;
                }
            }
        }
    }
    for (pix, c) in coverage.iter().enumerate() {
        data[pix * dim + dim - 1] = 1.0 - c.min(1.0);
    }
    Ok(out)
}

/// All views of a node, in view order.
pub fn render_node_views(world: &WorldGraph, node: usize, dim: usize) -> Result<Vec<Tensor>> {
    (0..world.camera.num_views)
        .map(|v| render_view_features(world, node, v, dim))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox3D;
    use crate::synthworld::world::{generate_world, CameraRig, Node, SizeClass, WORLD_FORMAT_VERSION};
    use std::collections::BTreeMap;

    fn lone_node(objects: Vec<OrientedBox3D>) -> WorldGraph {
        WorldGraph {
            format_version: WORLD_FORMAT_VERSION,
            seed: 0,
            nodes: vec![Node { id: 0, position: [0.0; 3] }],
            edges: vec![],
            objects,
            regions: BTreeMap::new(),
            camera: CameraRig::default(),
        }
    }

    fn on_axis(distance: f64) -> OrientedBox3D {
        // View 0 looks along +x from height 1.2.
        OrientedBox3D::new([distance, 0.0, 1.2], [0.5, 0.5, 0.5], 0.0, 3).unwrap()
    }

    #[test]
    fn empty_room_is_background() {
        let m = render_view_features(&lone_node(vec![]), 0, 0, 8).unwrap();
        for pix in m.data().chunks(8) {
            assert_eq!(pix, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn on_axis_object_peaks_at_principal_point() {
        let m = render_view_features(&lone_node(vec![on_axis(2.0)]), 0, 0, 16).unwrap();
        let emb = category_embedding(3, 16);
        let energy = |pix: usize| {
            m.data()[pix * 16..pix * 16 + 15]
                .iter()
                .zip(&emb)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let best = (0..256).max_by(|&a, &b| energy(a).total_cmp(&energy(b))).unwrap();
        assert_eq!(best, 8 * 16 + 8);
        assert!((energy(best) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn magnitude_falls_off_with_depth() {
        let d = 2.0;
        let near = render_view_features(&lone_node(vec![on_axis(d)]), 0, 0, 16).unwrap();
        let far = render_view_features(&lone_node(vec![on_axis(d + 1.0)]), 0, 0, 16).unwrap();
        let pix = (8 * 16 + 8) * 16;
        for c in 0..15 {
            let (a, b) = (near.data()[pix + c], far.data()[pix + c]);
            if a.abs() > 1e-9 {
                assert!((b / a - (1.0 + d) / (2.0 + d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_fixed() {
        for c in 0..NUM_CATEGORIES {
            let e = category_embedding(c, 32);
            let n: f64 = e.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(e[31], 0.0);
            assert_eq!(e, category_embedding(c, 32));
        }
    }

    #[test]
    fn energy_only_in_views_that_see_the_object() {
        let w = generate_world(4, SizeClass::Small);
        for node in 0..w.node_count() {
            for view in 0..w.camera.num_views {
                let vis = visible_objects(&w, node, view).unwrap();
                let m = render_view_features(&w, node, view, 32).unwrap();
                let energy: f64 = m
                    .data()
                    .chunks(32)
                    .map(|p| p[..31].iter().map(|x| x * x).sum::<f64>())
                    .sum();
                assert_eq!(vis.is_empty(), energy == 0.0);
            }
        }
        assert!(render_view_features(&w, 0, 6, 32).is_err());
        assert!(render_view_features(&w, 99, 0, 32).is_err());
    }
}
