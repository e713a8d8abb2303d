//! Pseudo-label generation and memory-bank integration.
//!
//! Each self-training round the current model proposes scored boxes per
//! target scene; the bank reconciles them with what it already holds via
//! a 3D IoU matching at threshold 0.1, keeping whichever of the matched
//! pair scores higher. Bank boxes that stop matching move into a bounded
//! FIFO buffer and are re-offered for matching in later rounds until the
//! buffer evicts them. Unmatched fresh proposals enter the bank directly.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::detector::{predict, AnchorSet, DetectorConfig};
use crate::error::{AutogradError, DatasetError};
use crate::geometry::{iou_matrix, Box3D};

/// Matching threshold on 3D IoU.
pub const MATCH_IOU: f64 = 0.1;

/// Scored proposals for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub scene: usize,
    pub boxes: Vec<Box3D>,
}

/// Per-scene bank entry: the current pseudo labels plus the buffer queue
/// of temporarily unmatched boxes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub boxes: Vec<Box3D>,
    pub buffer: VecDeque<Box3D>,
}

/// What one integration pass did; drives the churn-based early stop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IntegrateStats {
    pub kept_memory: usize,
    pub replaced_by_current: usize,
    pub moved_to_buffer: usize,
    pub revived_from_buffer: usize,
    pub appended_new: usize,
    pub evicted: usize,
}

impl IntegrateStats {
    /// Fraction of the resulting bank that changed this round.
    pub fn churn(&self, bank_size: usize) -> f64 {
        if bank_size == 0 {
            return 0.0;
        }
        (self.replaced_by_current + self.appended_new + self.moved_to_buffer) as f64
            / bank_size as f64
    }
}

/// The pseudo-label store, keyed by scene id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBank {
    entries: BTreeMap<usize, BankEntry>,
    pub round: u64,
    pub buffer_capacity: usize,
    /// Snapshot requests against unknown scenes (kept as a counter, the
    /// caller decides whether to warn).
    pub unknown_snapshots: u64,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            round: 0,
            buffer_capacity: 64,
            unknown_snapshots: 0,
        }
    }
}

impl MemoryBank {
    pub fn new(buffer_capacity: usize) -> Self {
        Self {
            buffer_capacity,
            ..Default::default()
        }
    }

    pub fn entry(&self, scene: usize) -> Option<&BankEntry> {
        self.entries.get(&scene)
    }

    pub fn scenes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn total_boxes(&self) -> usize {
        self.entries.values().map(|e| e.boxes.len()).sum()
    }

    /// Integrate one scene's fresh proposals. Pure in (current, entry):
    /// every rule, including tie-breaks, is deterministic.
    pub fn integrate(&mut self, current: PseudoLabelSet) -> IntegrateStats {
        let mut stats = IntegrateStats::default();
        let entry = self.entries.entry(current.scene).or_default();

        if entry.boxes.is_empty() && entry.buffer.is_empty() {
            // First round for this scene: adopt the proposals verbatim.
            stats.appended_new = current.boxes.len();
            entry.boxes = current.boxes;
            return stats;
        }

        // Memory rows: bank boxes first, then buffered boxes re-offered
        // for matching before any eviction.
        let bank_len = entry.boxes.len();
        let memory: Vec<Box3D> = entry
            .boxes
            .iter()
            .chain(entry.buffer.iter())
            .cloned()
            .collect();
        let matrix = iou_matrix(&memory, &current.boxes);
        let mut consumed = vec![false; current.boxes.len()];
        let mut new_boxes: Vec<Box3D> = Vec::with_capacity(memory.len());
        let mut new_buffer: VecDeque<Box3D> = VecDeque::new();

        for (e, mem_box) in memory.iter().enumerate() {
            let from_buffer = e >= bank_len;
            // Best current match: highest IoU, lowest index on ties.
            let mut best: Option<(f64, usize)> = None;
            for (f, &v) in matrix[e].iter().enumerate() {
                let better = match best {
                    None => true,
                    Some((bv, _)) => v > bv,
                };
                if better {
                    best = Some((v, f));
                }
            }
            match best {
                Some((iou, f)) if iou >= MATCH_IOU => {
                    consumed[f] = true;
                    let cur_box = &current.boxes[f];
                    // Higher score wins; the memory box stays on ties.
                    let keep_memory = mem_box.score_or_one() >= cur_box.score_or_one();
                    let winner = if keep_memory { mem_box.clone() } else { cur_box.clone() };
                    if from_buffer {
                        stats.revived_from_buffer += 1;
                    } else if keep_memory {
                        stats.kept_memory += 1;
                    } else {
                        stats.replaced_by_current += 1;
                    }
                    new_boxes.push(winner);
                }
                _ => {
                    if from_buffer {
                        // Still unmatched: stays queued in arrival order.
                        new_buffer.push_back(mem_box.clone());
                    } else {
                        stats.moved_to_buffer += 1;
                        new_buffer.push_back(mem_box.clone());
                    }
                }
            }
        }

        for (f, cur_box) in current.boxes.iter().enumerate() {
            if !consumed[f] {
                stats.appended_new += 1;
                new_boxes.push(cur_box.clone());
            }
        }

        while new_buffer.len() > self.buffer_capacity {
            new_buffer.pop_front();
            stats.evicted += 1;
        }

        entry.boxes = new_boxes;
        entry.buffer = new_buffer;
        stats
    }

    /// Training labels for a scene: the bank's boxes, never the buffer.
    /// Unknown scenes return an empty set and bump the warning counter.
    pub fn snapshot(&mut self, scene: usize) -> Vec<Box3D> {
        match self.entries.get(&scene) {
            Some(e) => e.boxes.clone(),
            None => {
                self.unknown_snapshots += 1;
                Vec::new()
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DatasetError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let body = serde_json::to_string_pretty(self).expect("bank serializes");
        std::fs::write(path, body).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, DatasetError> {
        let body = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&body).map_err(|e| DatasetError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Run the detector on one scene and keep detections whose rectified
/// score clears `phi` (inclusive).
pub fn generate(
    store: &ParamStore,
    points: &[[f64; 3]],
    scene: usize,
    cfg: &DetectorConfig,
    anchors: &AnchorSet,
    nms_iou: f64,
    phi: f64,
) -> Result<PseudoLabelSet, AutogradError> {
    let boxes = predict(store, points, cfg, anchors, nms_iou, phi)?;
    Ok(PseudoLabelSet { scene, boxes })
}

/// Keep boxes scoring at or above `phi`; the score boundary is inclusive.
pub fn filter_by_score(boxes: Vec<Box3D>, phi: f64) -> Vec<Box3D> {
    boxes
        .into_iter()
        .filter(|b| b.score_or_one() >= phi)
        .collect()
}
