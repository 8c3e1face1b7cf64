use bsg::geometry::{CameraIntrinsics, OrientedBox3D, Pose};
use bsg::SplitMix64;

type V3 = [f64; 3];

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Frustum membership from the four side planes (spanned by corner rays)
/// plus the near plane, without going through pixel coordinates.
pub fn frustum_halfspace(p: V3, pose: &Pose, k: &CameraIntrinsics) -> bool {
    let c = pose.translation();
    let (r, d, f) = (pose.axis(0), pose.axis(1), pose.axis(2));
    let ray = |u: f64, v: f64| -> V3 {
        let a = (u - k.cx) / k.fx;
        let b = (v - k.cy) / k.fy;
        [0, 1, 2].map(|i| a * r[i] + b * d[i] + f[i])
    };
    let (w, h) = (k.width as f64, k.height as f64);
    let corners = [ray(0.0, 0.0), ray(w, 0.0), ray(w, h), ray(0.0, h)];
    let rel = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    if dot(rel, f) <= 1e-6 {
        return false;
    }
    let inside_ref = ray(k.cx, k.cy);
    for i in 0..4 {
        let mut n = cross(corners[i], corners[(i + 1) % 4]);
        if dot(n, inside_ref) < 0.0 {
            n = n.map(|x| -x);
        }
        if dot(n, rel) < 0.0 {
            return false;
        }
    }
    true
}

fn inside_footprint(b: &OrientedBox3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.extent[0] / 2.0 && ly.abs() <= b.extent[1] / 2.0
}

/// Monte-Carlo BEV IoU with uniform samples over the bounding box of both
/// footprints.
pub fn monte_carlo_bev_iou(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, seed: u64) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in a.footprint().iter().chain(b.footprint().iter()) {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let mut rng = SplitMix64::new(seed);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.uniform(lo[0], hi[0]);
        let y = rng.uniform(lo[1], hi[1]);
        let (ia, ib) = (inside_footprint(a, x, y), inside_footprint(b, x, y));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_box(rng: &mut SplitMix64, spread: f64) -> OrientedBox3D {
    OrientedBox3D::new(
        [rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(0.0, 1.0)],
        [rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.3, 1.5)],
        rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
        0,
    )
    .unwrap()
}

pub fn random_camera(rng: &mut SplitMix64) -> (Pose, CameraIntrinsics) {
    // Random orthonormal frame from a normalized random quaternion.
    let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let rot = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let pose = Pose::new(rot, [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)]).unwrap();
    let width = 8 + rng.below(60);
    let height = 8 + rng.below(60);
    let k = CameraIntrinsics::new(
        rng.uniform(3.0, 60.0),
        rng.uniform(3.0, 60.0),
        rng.uniform(0.2, 0.8) * width as f64,
        rng.uniform(0.2, 0.8) * height as f64,
        width,
        height,
    )
    .unwrap();
    (pose, k)
}

/// Minimum total cost over every injective row-to-column assignment, by
/// exhaustive enumeration.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; cols])
}

/// DTW as the minimum over every monotone warping path from the first pair
/// to the last, enumerated explicitly (no memoization).
pub fn dtw_all_alignments(q: &[V3], r: &[V3]) -> f64 {
    fn d(a: V3, b: V3) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
    fn walk(q: &[V3], r: &[V3], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + d(q[i], r[j]);
        if i + 1 == q.len() && j + 1 == r.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < q.len() {
            walk(q, r, i + 1, j, acc, best);
        }
        if j + 1 < r.len() {
            walk(q, r, i, j + 1, acc, best);
        }
        if i + 1 < q.len() && j + 1 < r.len() {
            walk(q, r, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    if !q.is_empty() && !r.is_empty() {
        walk(q, r, 0, 0, 0.0, &mut best);
    }
    best
}
