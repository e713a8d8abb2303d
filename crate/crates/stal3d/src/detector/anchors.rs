//! Dense anchor layout and anchor-to-label assignment.

use serde::{Deserialize, Serialize};

use super::grid::GridConfig;
use crate::geometry::{encode, iou_bev, Box3D, RegressionTarget};

/// Canonical box prior for one class plus its matching thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub l: f64,
    pub w: f64,
    pub h: f64,
    /// Anchor center height above the ground plane.
    pub z: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

/// Anchors laid out densely over the grid: for every cell, every class,
/// and every direction bin, one prior box at the cell center. Flat index
/// order is `((row * W + col) * C + class) * N_dir + dir`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub grid: GridConfig,
    pub priors: Vec<AnchorPrior>,
    pub n_dir: usize,
    boxes: Vec<Box3D>,
}

impl AnchorSet {
    pub fn new(grid: GridConfig, priors: Vec<AnchorPrior>, n_dir: usize) -> Self {
        assert!(n_dir >= 1);
        for p in &priors {
            assert!(p.l > 0.0 && p.w > 0.0 && p.h > 0.0, "anchor dims must be positive");
        }
        let mut boxes = Vec::with_capacity(grid.cells * grid.cells * priors.len() * n_dir);
        for row in 0..grid.cells {
            for col in 0..grid.cells {
                let [cx, cy] = grid.cell_center(row, col);
                for (class_id, p) in priors.iter().enumerate() {
                    for d in 0..n_dir {
                        let yaw = d as f64 * std::f64::consts::PI / n_dir as f64;
                        boxes.push(
                            Box3D::new(cx, cy, p.z, p.l, p.w, p.h, yaw, class_id)
                                .expect("anchor priors are valid boxes"),
                        );
                    }
                }
            }
        }
        Self {
            grid,
            priors,
            n_dir,
            boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    /// Anchors per cell, `C * N_dir`.
    pub fn per_cell(&self) -> usize {
        self.priors.len() * self.n_dir
    }

    pub fn boxes(&self) -> &[Box3D] {
        &self.boxes
    }

    pub fn get(&self, flat: usize) -> &Box3D {
        &self.boxes[flat]
    }

    pub fn flat_index(&self, row: usize, col: usize, class: usize, dir: usize) -> usize {
        ((row * self.grid.cells + col) * self.num_classes() + class) * self.n_dir + dir
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn unflatten(&self, flat: usize) -> (usize, usize, usize, usize) {
        let d = flat % self.n_dir;
        let rest = flat / self.n_dir;
        let c = rest % self.num_classes();
        let cell = rest / self.num_classes();
        (cell / self.grid.cells, cell % self.grid.cells, c, d)
    }
}

/// Per-anchor training target.
#[derive(Debug, Clone, PartialEq)]
pub enum AnchorAssignment {
    Positive {
        label: usize,
        target: RegressionTarget,
        dir_bin: usize,
    },
    Negative,
    Ignore,
}

/// Match labels to anchors: an anchor is positive when its best
/// same-class BEV IoU clears the class positive threshold, negative when
/// below the negative threshold, ignored in between. Every label also
/// claims its single best anchor, so no label trains with zero
/// positives; claim ties resolve by smaller center distance, then lower
/// anchor index (distance matters when a small object overlaps no anchor
/// at all and every IoU ties at zero).
pub fn assign_targets(labels: &[Box3D], anchors: &AnchorSet) -> Vec<AnchorAssignment> {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_label = vec![usize::MAX; n];
    // Per label: (iou, negated distance squared, anchor index).
    let mut label_best: Vec<(f64, f64, usize)> = vec![(-1.0, f64::NEG_INFINITY, usize::MAX); labels.len()];

    for (a, anchor) in anchors.boxes().iter().enumerate() {
        for (l, label) in labels.iter().enumerate() {
            if label.class_id != anchor.class_id {
                continue;
            }
            let v = iou_bev(anchor, label);
            // Strict improvement keeps the lower index on ties, both ways.
            if v > best_iou[a] {
                best_iou[a] = v;
                best_label[a] = l;
            }
            let d2 = (anchor.cx - label.cx).powi(2) + (anchor.cy - label.cy).powi(2);
            if (v, -d2) > (label_best[l].0, label_best[l].1) {
                label_best[l] = (v, -d2, a);
            }
        }
    }

    let mut out: Vec<AnchorAssignment> = (0..n)
        .map(|a| {
            let anchor = anchors.get(a);
            let prior = &anchors.priors[anchor.class_id];
            if best_label[a] != usize::MAX && best_iou[a] >= prior.pos_iou {
                positive(labels, best_label[a], anchor, anchors.n_dir)
            } else if best_iou[a] < prior.neg_iou {
                AnchorAssignment::Negative
            } else {
                AnchorAssignment::Ignore
            }
        })
        .collect();

    // Forced claims: each label's best anchor becomes positive for it.
    // A contested anchor keeps the higher-IoU label (lower index on ties).
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; n];
    for (l, &(iou, _, a)) in label_best.iter().enumerate() {
        if a == usize::MAX {
            continue;
        }
        let better = match claim[a] {
            None => true,
            Some((existing, _)) => iou > existing,
        };
        if better {
            claim[a] = Some((iou, l));
        }
    }
    for (a, c) in claim.iter().enumerate() {
        if let Some((_, l)) = c {
            out[a] = positive(labels, *l, anchors.get(a), anchors.n_dir);
        }
    }
    out
}

fn positive(labels: &[Box3D], l: usize, anchor: &Box3D, n_dir: usize) -> AnchorAssignment {
    let label = &labels[l];
    let target = encode(label, anchor).expect("anchors have positive dims");
    let delta = label.yaw - anchor.yaw;
    let dir_bin = if delta.cos() >= 0.0 { 0 } else { 1 % n_dir };
    AnchorAssignment::Positive {
        label: l,
        target,
        dir_bin,
    }
}
