//! Anchor-relative box-target encoding and its inverse.
//!
//! Offsets are normalized by the anchor's footprint diagonal (height for z),
//! dimensions are log-ratios, and the heading is encoded as the sine of the
//! yaw difference. The sine leaves a direction ambiguity that the detector's
//! direction classifier resolves at decode time.

use serde::{Deserialize, Serialize};

use super::box3d::Box3D;
use crate::error::GeometryError;

/// Encoded regression target. When `scale_filtered` is set the dimension
/// components are zeroed and excluded from every loss sum; decoding then
/// falls back to the anchor's dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub x_t: f64,
    pub y_t: f64,
    pub z_t: f64,
    pub l_t: f64,
    pub w_t: f64,
    pub h_t: f64,
    pub theta_t: f64,
    pub scale_filtered: bool,
}

impl RegressionTarget {
    pub const ZERO: Self = Self {
        x_t: 0.0,
        y_t: 0.0,
        z_t: 0.0,
        l_t: 0.0,
        w_t: 0.0,
        h_t: 0.0,
        theta_t: 0.0,
        scale_filtered: false,
    };

    /// Components in channel order `(x, y, z, l, w, h, theta)`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.x_t, self.y_t, self.z_t, self.l_t, self.w_t, self.h_t, self.theta_t]
    }

    pub fn from_array(a: [f64; 7], scale_filtered: bool) -> Self {
        Self {
            x_t: a[0],
            y_t: a[1],
            z_t: a[2],
            l_t: a[3],
            w_t: a[4],
            h_t: a[5],
            theta_t: a[6],
            scale_filtered,
        }
    }

    /// Zero the dimension components and mark them excluded. Idempotent.
    pub fn filter_scale(mut self) -> Self {
        self.l_t = 0.0;
        self.w_t = 0.0;
        self.h_t = 0.0;
        self.scale_filtered = true;
        self
    }
}

fn anchor_diagonal(anchor: &Box3D) -> Result<f64, GeometryError> {
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    if d <= 0.0 || !d.is_finite() {
        return Err(GeometryError::DegenerateAnchor(d));
    }
    Ok(d)
}

/// Encode a ground-truth box relative to an anchor.
pub fn encode(gt: &Box3D, anchor: &Box3D) -> Result<RegressionTarget, GeometryError> {
    let d = anchor_diagonal(anchor)?;
    Ok(RegressionTarget {
        x_t: (gt.cx - anchor.cx) / d,
        y_t: (gt.cy - anchor.cy) / d,
        z_t: (gt.cz - anchor.cz) / anchor.h,
        l_t: (gt.l / anchor.l).ln(),
        w_t: (gt.w / anchor.w).ln(),
        h_t: (gt.h / anchor.h).ln(),
        theta_t: (gt.yaw - anchor.yaw).sin(),
        scale_filtered: false,
    })
}

/// Invert [`encode`]. The recovered yaw is the principal value
/// `anchor.yaw + asin(theta_t)`; callers holding a direction bin add pi
/// when the opposite bin wins. Scale-filtered targets decode to the
/// anchor's dimensions.
pub fn decode(t: &RegressionTarget, anchor: &Box3D) -> Box3D {
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    // Log-ratio exponents are capped so a diverged prediction still
    // decodes to a finite (if absurd) box instead of overflowing.
    let ratio = |x: f64| x.clamp(-60.0, 60.0).exp();
    let (l, w, h) = if t.scale_filtered {
        (anchor.l, anchor.w, anchor.h)
    } else {
        (
            anchor.l * ratio(t.l_t),
            anchor.w * ratio(t.w_t),
            anchor.h * ratio(t.h_t),
        )
    };
    let yaw = anchor.yaw + t.theta_t.clamp(-1.0, 1.0).asin();
    Box3D::new(
        anchor.cx + t.x_t * d,
        anchor.cy + t.y_t * d,
        anchor.cz + t.z_t * anchor.h,
        l,
        w,
        h,
        yaw,
        anchor.class_id,
    )
    .expect("decoded box is valid for any finite target")
}
