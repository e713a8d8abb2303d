//! Shared test oracles, independent of the implementation paths they
//! check: Monte-Carlo volume overlap, analytic axis-aligned rectangle
//! IoU, and central finite differences.

use rand::Rng;
use stal3d::geometry::Box3D;
use stal3d::rng::stream;

/// Monte-Carlo 3D IoU: sample points uniformly inside `a`, estimate the
/// fraction falling inside `b`, and convert to IoU through the exact box
/// volumes.
pub fn mc_iou_3d(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let mut rng = stream(&[seed, 0x3d10]);
    let mut hits = 0usize;
    for _ in 0..samples {
        let local = [
            (rng.gen::<f64>() - 0.5) * a.l,
            (rng.gen::<f64>() - 0.5) * a.w,
            (rng.gen::<f64>() - 0.5) * a.h,
        ];
        let p = a.to_world(local);
        if contains(b, p) {
            hits += 1;
        }
    }
    let inter = a.volume() * hits as f64 / samples as f64;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn contains(b: &Box3D, p: [f64; 3]) -> bool {
    let q = b.to_local(p);
    q[0].abs() <= 0.5 * b.l && q[1].abs() <= 0.5 * b.w && q[2].abs() <= 0.5 * b.h
}

/// Exact IoU of two axis-aligned rectangles given as center + extent.
pub fn axis_aligned_rect_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax, ay, al, aw) = a;
    let (bx, by, bl, bw) = b;
    let ix = ((ax + 0.5 * al).min(bx + 0.5 * bl) - (ax - 0.5 * al).max(bx - 0.5 * bl)).max(0.0);
    let iy = ((ay + 0.5 * aw).min(by + 0.5 * bw) - (ay - 0.5 * aw).max(by - 0.5 * bw)).max(0.0);
    let inter = ix * iy;
    let union = al * aw + bl * bw - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Central finite differences of a scalar function.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let hi = f(&buf);
        buf[i] = orig - step;
        let lo = f(&buf);
        buf[i] = orig;
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Relative-tolerance comparison with a small absolute floor for values
/// near zero.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = rel * a.abs().max(n.abs()) + floor;
        assert!(
            (a - n).abs() <= tol,
            "{what}[{i}]: analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}

/// A random valid box with moderate extents near the origin.
pub fn random_box(rng: &mut rand_chacha::ChaCha8Rng) -> Box3D {
    Box3D::new(
        rng.gen::<f64>() * 6.0 - 3.0,
        rng.gen::<f64>() * 6.0 - 3.0,
        rng.gen::<f64>() * 2.0 - 1.0,
        0.5 + rng.gen::<f64>() * 4.5,
        0.5 + rng.gen::<f64>() * 4.5,
        0.5 + rng.gen::<f64>() * 2.5,
        (rng.gen::<f64>() - 0.5) * 2.0 * std::f64::consts::PI,
        0,
    )
    .expect("random box parameters are valid")
}
