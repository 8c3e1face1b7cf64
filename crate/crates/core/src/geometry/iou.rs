use super::boxes::OrientedBox3D;

/// On-edge classification tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-9;

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland-Hodgman clip of `subject` against a convex counter-clockwise
/// `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            let (cur_in, prev_in) = (sc >= -CLIP_EPS, sp >= -CLIP_EPS);
            if cur_in != prev_in {
                let t = sp / (sp - sc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Footprint overlap area. Both clip orders are averaged so the result is
/// exactly symmetric in its arguments.
pub fn footprint_intersection(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (fa, fb) = (a.footprint(), b.footprint());
    let ab = polygon_area(&clip_convex(&fa, &fb));
    let ba = polygon_area(&clip_convex(&fb, &fa));
    ((ab + ba) / 2.0).max(0.0)
}

pub fn rotated_iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = footprint_intersection(a, b);
    let union = a.extent[0] * a.extent[1] + b.extent[0] * b.extent[1] - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = footprint_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
