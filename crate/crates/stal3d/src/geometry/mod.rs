//! Rotated-3D-box mathematics: footprints, IoU, and anchor-relative
//! target encoding. All values are immutable after construction and every
//! function here is pure.

mod box3d;
mod iou;
mod target;

pub use box3d::{normalize_yaw, Box3D};
pub use iou::{bev_intersection_area, clip_convex, iou_3d, iou_bev, iou_matrix, polygon_area, AREA_EPSILON};
pub use target::{decode, encode, RegressionTarget};
