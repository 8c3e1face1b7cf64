use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rigid camera-to-world transform.
///
/// Columns of `rotation` are the camera axes (x right, y down, z forward)
/// expressed in world coordinates; `translation` is the camera center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr - expect).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        let col = |j: usize| [rotation[0][j], rotation[1][j], rotation[2][j]];
        let det = dot3(col(0), cross3(col(1), col(2)));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("rotation determinant {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Level camera at `position` looking along world heading `yaw` (radians
    /// from +x towards +y), with the image y axis pointing down.
    pub fn level(position: Vec3, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let forward = [c, s, 0.0];
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self {
            rotation,
            translation: position,
        }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Camera axis `j` (0 right, 1 down, 2 forward) in world coordinates.
    pub fn axis(&self, j: usize) -> Vec3 {
        [self.rotation[0][j], self.rotation[1][j], self.rotation[2][j]]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.translation);
        [dot3(self.axis(0), d), dot3(self.axis(1), d), dot3(self.axis(2), d)]
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        let mut out = self.translation;
        for (j, &pj) in p.iter().enumerate() {
            let a = self.axis(j);
            for i in 0..3 {
                out[i] += a[i] * pj;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// Depth at or below this is treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Image { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

pub fn project_point(p_world: Vec3, pose: &Pose, k: &CameraIntrinsics) -> Projection {
    let [x, y, z] = pose.world_to_camera(p_world);
    if z <= MIN_DEPTH {
        return Projection::BehindCamera;
    }
    Projection::Image {
        u: k.fx * x / z + k.cx,
        v: k.fy * y / z + k.cy,
        depth: z,
    }
}

/// Center-visibility test: the point projects inside the image in front of
/// the camera. Occlusion by other geometry is not modelled.
pub fn frustum_visible(p_world: Vec3, pose: &Pose, k: &CameraIntrinsics) -> bool {
    match project_point(p_world, pose, k) {
        Projection::Image { u, v, .. } => {
            u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64
        }
        Projection::BehindCamera => false,
    }
}
