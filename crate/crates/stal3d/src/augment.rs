//! Random object scaling: per-box anisotropic rescaling of the points
//! inside each labeled box, together with the label's dimensions.
//!
//! Each interior point is mapped into the box frame, scaled componentwise
//! by a per-box draw `(r_l, r_w, r_h)`, and mapped back. Points outside
//! every box are untouched. A point inside several boxes belongs to the
//! box whose center is nearest (lowest index on ties).

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::Box3D;
use crate::rng::{stream, RngSampling};

/// Closed scaling intervals per box axis; each contains 1.0 by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleRange {
    pub r_l: [f64; 2],
    pub r_w: [f64; 2],
    pub r_h: [f64; 2],
}

impl Default for ScaleRange {
    fn default() -> Self {
        Self {
            r_l: [0.8, 1.2],
            r_w: [0.8, 1.2],
            r_h: [0.8, 1.2],
        }
    }
}

impl ScaleRange {
    /// Degenerate range that never changes anything.
    pub fn identity() -> Self {
        Self {
            r_l: [1.0, 1.0],
            r_w: [1.0, 1.0],
            r_h: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, [lo, hi]) in [("r_l", self.r_l), ("r_w", self.r_w), ("r_h", self.r_h)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(ConfigError::Invalid(format!(
                    "scale range {name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

const MEMBERSHIP_SLACK: f64 = 1e-9;

/// Apply random object scaling. Deterministic given `seed`; preserves the
/// point count exactly; background points are returned bit-identical.
pub fn ros_transform(
    points: &[[f64; 3]],
    labels: &[Box3D],
    range: &ScaleRange,
    seed: u64,
) -> (Vec<[f64; 3]>, Vec<Box3D>) {
    let mut rng = stream(&[seed, 0x526f53]);
    let draws: Vec<[f64; 3]> = labels
        .iter()
        .map(|_| {
            [
                rng.uniform(range.r_l[0], range.r_l[1]),
                rng.uniform(range.r_w[0], range.r_w[1]),
                rng.uniform(range.r_h[0], range.r_h[1]),
            ]
        })
        .collect();

    let mut out_points = points.to_vec();
    for p in &mut out_points {
        let mut owner: Option<(f64, usize)> = None;
        for (b, label) in labels.iter().enumerate() {
            if label.contains(*p, MEMBERSHIP_SLACK) {
                let d2 = (p[0] - label.cx).powi(2)
                    + (p[1] - label.cy).powi(2)
                    + (p[2] - label.cz).powi(2);
                let candidate = (d2, b);
                let better = match owner {
                    None => true,
                    Some(best) => candidate < best,
                };
                if better {
                    owner = Some(candidate);
                }
            }
        }
        if let Some((_, b)) = owner {
            let [rl, rw, rh] = draws[b];
            if rl == 1.0 && rw == 1.0 && rh == 1.0 {
                continue;
            }
            let label = &labels[b];
            let local = label.to_local(*p);
            *p = label.to_world([rl * local[0], rw * local[1], rh * local[2]]);
        }
    }

    let out_labels = labels
        .iter()
        .zip(&draws)
        .map(|(label, [rl, rw, rh])| {
            if *rl == 1.0 && *rw == 1.0 && *rh == 1.0 {
                return label.clone();
            }
            let mut scaled = label.clone();
            scaled.l = label.l * rl;
            scaled.w = label.w * rw;
            scaled.h = label.h * rh;
            scaled
        })
        .collect();

    (out_points, out_labels)
}
