//! Point-cloud pillarization onto a bird's-eye-view grid.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

/// Square BEV coverage: `cells x cells` over `[-range_m, range_m]^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub cells: usize,
    pub range_m: f64,
}

impl GridConfig {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.range_m / self.cells as f64
    }

    /// Cell index along one axis. Points exactly on an interior boundary
    /// go to the lower-index cell; the extreme edges stay in range.
    pub fn bin(&self, coord: f64) -> Option<usize> {
        let u = (coord + self.range_m) / self.cell_size();
        let n = self.cells as f64;
        if !(0.0..=n).contains(&u) {
            return None;
        }
        if u == 0.0 {
            return Some(0);
        }
        if u.fract() == 0.0 {
            return Some(u as usize - 1);
        }
        Some(u as usize)
    }

    /// Metric center of a cell (row indexes y, column indexes x).
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let cs = self.cell_size();
        [
            -self.range_m + (col as f64 + 0.5) * cs,
            -self.range_m + (row as f64 + 0.5) * cs,
        ]
    }
}

/// Per-cell features: point count, max height, a mean-intensity
/// placeholder (points carry no intensity, so it stays zero), and the
/// mean in-cell point offset. The offset channels preserve sub-cell
/// geometry that plain occupancy counts destroy; without them the
/// regression head cannot localize better than the cell pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    pub count: Vec<f64>,
    pub max_z: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Mean point offset from the cell center, in units of half a cell.
    pub mean_dx: Vec<f64>,
    pub mean_dy: Vec<f64>,
    /// Points outside the configured range, dropped during binning.
    pub dropped_points: usize,
}

/// Deterministic binning of a point cloud.
pub fn pillarize(points: &[[f64; 3]], cfg: &GridConfig) -> BevGrid {
    let n = cfg.cells * cfg.cells;
    let mut grid = BevGrid {
        h: cfg.cells,
        w: cfg.cells,
        count: vec![0.0; n],
        max_z: vec![0.0; n],
        intensity: vec![0.0; n],
        mean_dx: vec![0.0; n],
        mean_dy: vec![0.0; n],
        dropped_points: 0,
    };
    for p in points {
        let (col, row) = match (cfg.bin(p[0]), cfg.bin(p[1])) {
            (Some(c), Some(r)) => (c, r),
            _ => {
                grid.dropped_points += 1;
                continue;
            }
        };
        let idx = row * cfg.cells + col;
        grid.count[idx] += 1.0;
        if grid.count[idx] == 1.0 || p[2] > grid.max_z[idx] {
            grid.max_z[idx] = p[2];
        }
        let [cx, cy] = cfg.cell_center(row, col);
        grid.mean_dx[idx] += p[0] - cx;
        grid.mean_dy[idx] += p[1] - cy;
    }
    let half = 0.5 * cfg.cell_size();
    for i in 0..n {
        if grid.count[i] > 0.0 {
            grid.mean_dx[i] /= grid.count[i] * half;
            grid.mean_dy[i] /= grid.count[i] * half;
        }
    }
    grid
}

impl BevGrid {
    /// Network input `(H, W, 5)`: compressed count, max height,
    /// intensity, mean in-cell offsets.
    pub fn input_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.count.len() * 5);
        for i in 0..self.count.len() {
            data.push(self.count[i].ln_1p());
            data.push(self.max_z[i]);
            data.push(self.intensity[i]);
            data.push(self.mean_dx[i]);
            data.push(self.mean_dy[i]);
        }
        Tensor::new(vec![self.h, self.w, 5], data)
    }
}
