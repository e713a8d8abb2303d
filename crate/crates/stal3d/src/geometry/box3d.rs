//! Oriented 3D bounding boxes rotating about the z axis.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = yaw % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

/// An oriented box: center `(cx, cy, cz)` in meters, extents `(l, w, h)`
/// along its local axes, yaw about z in `(-pi, pi]`, a class id, and an
/// optional detection score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box3D {
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        l: f64,
        w: f64,
        h: f64,
        yaw: f64,
        class_id: usize,
    ) -> Result<Self, GeometryError> {
        for (v, field) in [
            (cx, "cx"),
            (cy, "cy"),
            (cz, "cz"),
            (l, "l"),
            (w, "w"),
            (h, "h"),
            (yaw, "yaw"),
        ] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite { field });
            }
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::NonPositiveDims { l, w, h });
        }
        Ok(Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
            class_id,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::ScoreOutOfRange(score));
        }
        self.score = Some(score);
        Ok(self)
    }

    /// Detection score, defaulting to 1.0 for ground-truth boxes.
    pub fn score_or_one(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }

    /// Corners of the yaw-rotated `l x w` footprint, counter-clockwise,
    /// starting at the (+l/2, +w/2) local corner.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// Vertical extent `[z_lo, z_hi]`.
    pub fn z_range(&self) -> [f64; 2] {
        [self.cz - 0.5 * self.h, self.cz + 0.5 * self.h]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Map a world point into the box frame: x along length, y along
    /// width, z up, origin at the box center.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Inverse of [`to_local`](Self::to_local).
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    /// Point membership against the box's own extent, with a small slack so
    /// points lying exactly on a face count as inside.
    pub fn contains(&self, p: [f64; 3], slack: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.l + slack
            && q[1].abs() <= 0.5 * self.w + slack
            && q[2].abs() <= 0.5 * self.h + slack
    }

    /// CSV row in the column order `cx,cy,cz,l,w,h,yaw,class_id,score`.
    pub fn to_csv_row(&self) -> String {
        match self.score {
            Some(s) => format!(
                "{},{},{},{},{},{},{},{},{}",
                self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.class_id, s
            ),
            None => format!(
                "{},{},{},{},{},{},{},{},",
                self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.class_id
            ),
        }
    }

    pub fn from_csv_row(row: &str) -> Result<Self, GeometryError> {
        let fields: Vec<&str> = row.trim().split(',').collect();
        let parse = |i: usize| -> f64 { fields.get(i).and_then(|s| s.trim().parse().ok()).unwrap_or(f64::NAN) };
        let class_id = fields
            .get(7)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .unwrap_or(0);
        let b = Box3D::new(
            parse(0),
            parse(1),
            parse(2),
            parse(3),
            parse(4),
            parse(5),
            parse(6),
            class_id,
        )?;
        match fields.get(8).map(|s| s.trim()).filter(|s| !s.is_empty()) {
            Some(s) => {
                let score: f64 = s.parse().map_err(|_| GeometryError::NonFinite { field: "score" })?;
                b.with_score(score)
            }
            None => Ok(b),
        }
    }
}
