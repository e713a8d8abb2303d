//! Rotated-box overlap: convex polygon clipping in the ground plane plus
//! a vertical interval for the 3D case.

use super::box3d::Box3D;

/// Intersection areas below this are treated as zero.
pub const AREA_EPSILON: f64 = 1e-12;

/// Signed polygon area via the shoelace formula (positive for
/// counter-clockwise winding).
pub fn polygon_area(points: &[[f64; 2]]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..points.len() {
        let [x0, y0] = points[i];
        let [x1, y1] = points[(i + 1) % points.len()];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice
}

/// Sutherland-Hodgman clip of a convex `subject` polygon against a convex
/// counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        // Inside = on the left of edge a->b (clip polygon is CCW).
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(edge_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(edge_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn edge_intersection(p0: [f64; 2], p1: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-300 {
        return p0;
    }
    let t = ((a[0] - p0[0]) * d2[1] - (a[1] - p0[1]) * d2[0]) / denom;
    [p0[0] + t * d1[0], p0[1] + t * d1[1]]
}

/// Two footprints cannot intersect when their centers are farther apart
/// than the sum of the footprint circumradii. Exact, and much cheaper
/// than clipping for the far-apart pairs that dominate dense matching.
#[inline]
fn beyond_circumradii(a: &Box3D, b: &Box3D) -> bool {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = 0.5 * (a.l * a.l + a.w * a.w).sqrt();
    let rb = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
    dx * dx + dy * dy > (ra + rb) * (ra + rb)
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if beyond_circumradii(a, b) {
        return 0.0;
    }
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&clipped).abs();
    if area < AREA_EPSILON {
        0.0
    } else {
        area
    }
}

/// Bird's-eye-view IoU of the two rotated footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Full 3D IoU: footprint intersection times vertical overlap over the
/// volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let [alo, ahi] = a.z_range();
    let [blo, bhi] = b.z_range();
    let dz = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter < AREA_EPSILON {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Pairwise 3D IoU matrix, `memory.len() x current.len()`. Either side may
/// be empty, producing a degenerate matrix.
pub fn iou_matrix(memory: &[Box3D], current: &[Box3D]) -> Vec<Vec<f64>> {
    memory
        .iter()
        .map(|m| current.iter().map(|c| iou_3d(m, c)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, RngSampling};
    use std::f64::consts::PI;

    fn square(cx: f64, cy: f64, side: f64) -> Box3D {
        Box3D::new(cx, cy, 0.5, side, side, 1.0, 0.0, 0).unwrap()
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = Box3D::new(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.4, 0).unwrap();
        assert!((iou_bev(&b, &b) - 1.0).abs() < 1e-9);
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn far_apart_boxes_have_zero_iou() {
        let a = square(0.0, 0.0, 2.0);
        let b = square(100.0, 0.0, 2.0);
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn offset_squares_give_one_third() {
        // Two 2x2 squares offset by (1, 0): overlap 2, union 6.
        let a = square(0.0, 0.0, 2.0);
        let b = square(1.0, 0.0, 2.0);
        assert!((iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn offset_unit_cubes_give_one_third() {
        let a = Box3D::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        let b = Box3D::new(0.5, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_z_ranges_give_zero() {
        let a = Box3D::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        let b = Box3D::new(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn matrix_shapes_and_trivial_values() {
        let b = square(0.0, 0.0, 2.0);
        let far = square(50.0, 0.0, 2.0);
        assert!(iou_matrix(&[], &[b.clone()]).is_empty());
        let m = iou_matrix(&[b.clone()], &[]);
        assert_eq!(m.len(), 1);
        assert!(m[0].is_empty());
        let m = iou_matrix(&[b.clone()], &[b.clone()]);
        assert!((m[0][0] - 1.0).abs() < 1e-9);
        let m = iou_matrix(&[b.clone(), far.clone()], &[b, far]);
        assert!((m[0][0] - 1.0).abs() < 1e-9);
        assert!((m[1][1] - 1.0).abs() < 1e-9);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][0], 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_rotation_invariant() {
        let mut rng = stream(&[900]);
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Box3D::new(
                    rng.uniform(-3.0, 3.0),
                    rng.uniform(-3.0, 3.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(0.5, 5.0),
                    rng.uniform(0.5, 5.0),
                    rng.uniform(0.5, 3.0),
                    rng.uniform(-PI, PI),
                    0,
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = iou_3d(&a, &b);
            let ba = iou_3d(&b, &a);
            assert!((ab - ba).abs() < 1e-12, "symmetry violated: {ab} vs {ba}");
            assert!((0.0..=1.0).contains(&ab));

            // Rotating both about the origin by a common angle preserves BEV IoU.
            let phi = rng.uniform(-PI, PI);
            let rot = |b: &Box3D| {
                let (s, c) = phi.sin_cos();
                Box3D::new(
                    c * b.cx - s * b.cy,
                    s * b.cx + c * b.cy,
                    b.cz,
                    b.l,
                    b.w,
                    b.h,
                    b.yaw + phi,
                    b.class_id,
                )
                .unwrap()
            };
            let before = iou_bev(&a, &b);
            let after = iou_bev(&rot(&a), &rot(&b));
            assert!(
                (before - after).abs() < 1e-6,
                "rotation invariance violated: {before} vs {after}"
            );
        }
    }

    #[test]
    fn rotated_square_overlap_against_diamond() {
        // A unit square and the same square rotated 45 degrees share the
        // regular octagon; its area is 2*(sqrt(2)-1).
        let a = Box3D::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0, 0).unwrap();
        let b = Box3D::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, PI / 4.0, 0).unwrap();
        let inter = bev_intersection_area(&a, &b);
        let expected = 2.0 * (2f64.sqrt() - 1.0);
        assert!((inter - expected).abs() < 1e-9, "octagon area {inter} vs {expected}");
    }
}
