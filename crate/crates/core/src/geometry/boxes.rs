use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use super::camera::Vec3;
use crate::error::{Error, Result};

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Smallest absolute difference between two yaws modulo π.
pub fn yaw_distance_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub center: Vec3,
    /// Length along the heading, width across it, height.
    pub extent: Vec3,
    pub yaw: f64,
    pub category: usize,
}

impl OrientedBox3D {
    pub fn new(center: Vec3, extent: Vec3, yaw: f64, category: usize) -> Result<Self> {
        if extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument(format!("box extents must be positive, got {extent:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::NonFinite("box center or yaw".into()));
        }
        Ok(Self {
            center,
            extent,
            yaw: wrap_angle(yaw),
            category,
        })
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.extent[0] / 2.0, self.extent[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = self.extent[2] / 2.0;
        (self.center[2] - h, self.center[2] + h)
    }

    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }

    pub fn aabb(&self) -> AxisAlignedBox3D {
        let fp = self.footprint();
        let (z0, z1) = self.z_range();
        let mut min = [f64::INFINITY, f64::INFINITY, z0];
        let mut max = [f64::NEG_INFINITY, f64::NEG_INFINITY, z1];
        for p in fp {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        AxisAlignedBox3D { min, max }
    }

    /// The 8 corners, bottom face first.
    pub fn corners(&self) -> Vec<Vec3> {
        let (z0, z1) = self.z_range();
        let fp = self.footprint();
        [z0, z1]
            .iter()
            .flat_map(|&z| fp.iter().map(move |p| [p[0], p[1], z]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox3D {
    pub min: Vec3,
    pub max: Vec3,
}

impl AxisAlignedBox3D {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::InvalidArgument(format!("aabb min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Relative eigenvalue gap below which the x-y covariance counts as
/// isotropic and the principal axis is not defined by PCA alone.
const ISOTROPY_TOL: f64 = 1e-9;

fn spans(points: &[Vec3], yaw: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = yaw.sin_cos();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        let a = c * p[0] + s * p[1];
        let b = -s * p[0] + c * p[1];
        lo[0] = lo[0].min(a);
        hi[0] = hi[0].max(a);
        lo[1] = lo[1].min(b);
        hi[1] = hi[1].max(b);
    }
    (lo, hi)
}

fn convex_hull(points: &[Vec3]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle orientation over hull edge directions,
/// reduced to (-π/4, π/4].
fn min_area_yaw(points: &[Vec3]) -> f64 {
    let hull = convex_hull(points);
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let mut yaw = (b[1] - a[1]).atan2(b[0] - a[0]).rem_euclid(FRAC_PI_2);
        if yaw > FRAC_PI_4 {
            yaw -= FRAC_PI_2;
        }
        let (lo, hi) = spans(points, yaw);
        let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        if area < best.0 - 1e-12 {
            best = (area, yaw);
        }
    }
    best.1
}

/// Fit a gravity-aligned box: yaw from the first principal component of the
/// centered x-y coordinates, extents from spans in the rotated frame.
///
/// When the x-y covariance is isotropic (e.g. square footprints) PCA gives no
/// preferred axis; the orientation of the minimum-area enclosing rectangle is
/// used instead.
pub fn fit_obb_pca(points: &[Vec3], category: usize) -> Result<OrientedBox3D> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("obb input points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let mean = (sxx + syy) / 2.0;
    let radius = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    if l1 <= 0.0 || l2 <= 1e-12 * l1 {
        return Err(Error::Degenerate("x-y covariance is rank deficient".into()));
    }
    let yaw = if radius <= ISOTROPY_TOL * mean {
        min_area_yaw(points)
    } else {
        // In (-π/2, π/2]: the axis direction already has x >= 0 (tie: y > 0).
        0.5 * (2.0 * sxy).atan2(sxx - syy)
    };
    let (lo, hi) = spans(points, yaw);
    let z0 = points.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let z1 = points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = ((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0);
    let (s, c) = yaw.sin_cos();
    let center = [c * a - s * b, s * a + c * b, (z0 + z1) / 2.0];
    let extent = [hi[0] - lo[0], hi[1] - lo[1], z1 - z0];
    if extent[2] <= 0.0 {
        return Err(Error::Degenerate("points have no vertical extent".into()));
    }
    OrientedBox3D::new(center, extent, yaw, category)
}
