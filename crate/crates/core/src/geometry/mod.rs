//! Frames, pinhole projection, oriented boxes and their overlap.

mod boxes;
mod camera;
mod iou;
mod sample;

pub use boxes::{fit_obb_pca, wrap_angle, yaw_distance_mod_pi, AxisAlignedBox3D, OrientedBox3D};
pub use camera::{frustum_visible, project_point, CameraIntrinsics, Pose, Projection, Vec3, MIN_DEPTH};
pub use iou::{clip_convex, footprint_intersection, iou_3d, polygon_area, rotated_iou_bev};
pub use sample::{bilinear_sample, bilinear_taps};
