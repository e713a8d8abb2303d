//! The tiny BEV detector: a three-layer convolutional backbone over the
//! pillarized grid and four 1x1 heads (classification, box regression,
//! direction, IoU prediction). The backbone's output feature map is
//! exposed for the adversarial module.

use serde::{Deserialize, Serialize};

use super::anchors::{AnchorPrior, AnchorSet};
use super::grid::{BevGrid, GridConfig};
use crate::autograd::{ParamLeaves, ParamStore, Tape, Tensor, TensorId};
use crate::error::AutogradError;
use crate::rng::{stream, RngSampling};

pub const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub grid: GridConfig,
    pub anchors: Vec<AnchorPrior>,
    pub n_dir: usize,
    /// Backbone width.
    pub channels: usize,
}

impl DetectorConfig {
    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    /// Anchors per cell, `C * N_dir`.
    pub fn per_cell(&self) -> usize {
        self.num_classes() * self.n_dir
    }

    pub fn anchor_set(&self) -> AnchorSet {
        AnchorSet::new(self.grid.clone(), self.anchors.clone(), self.n_dir)
    }

    /// Desk-scale default: three classes on a 16x16 grid.
    pub fn small(cells: usize, range_m: f64) -> Self {
        Self {
            grid: GridConfig { cells, range_m },
            anchors: vec![
                AnchorPrior {
                    l: 4.0,
                    w: 1.8,
                    h: 1.6,
                    z: 0.8,
                    pos_iou: 0.6,
                    neg_iou: 0.45,
                },
                AnchorPrior {
                    l: 0.9,
                    w: 0.8,
                    h: 1.7,
                    z: 0.85,
                    pos_iou: 0.5,
                    neg_iou: 0.35,
                },
                AnchorPrior {
                    l: 1.8,
                    w: 0.7,
                    h: 1.5,
                    z: 0.75,
                    pos_iou: 0.5,
                    neg_iou: 0.35,
                },
            ],
            n_dir: 2,
            channels: 32,
        }
    }
}

/// Differentiable head outputs for one scene, all living on the caller's
/// tape. `iou` is already sigmoid-squashed into `[0, 1]`.
pub struct DetectorOutputs {
    pub cls: TensorId,
    pub reg: TensorId,
    pub dir: TensorId,
    pub iou: TensorId,
    pub features: TensorId,
}

const BACKBONE_LAYERS: [&str; 3] = ["backbone.conv1", "backbone.conv2", "backbone.conv3"];
const HEADS: [&str; 4] = ["head.cls", "head.reg", "head.dir", "head.iou"];

/// Initialize detector parameters (uniform He-style fan-in scaling). The
/// classification bias starts strongly negative so early focal loss is
/// dominated by true positives rather than a sea of background logits.
pub fn init_detector_params(store: &mut ParamStore, cfg: &DetectorConfig, seed: u64) {
    let k = cfg.per_cell();
    let widths: Vec<(String, usize, usize, usize)> = vec![
        (BACKBONE_LAYERS[0].into(), 3, INPUT_CHANNELS, cfg.channels),
        (BACKBONE_LAYERS[1].into(), 3, cfg.channels, cfg.channels),
        (BACKBONE_LAYERS[2].into(), 3, cfg.channels, cfg.channels),
        (HEADS[0].into(), 1, cfg.channels, k),
        (HEADS[1].into(), 1, cfg.channels, k * 7),
        (HEADS[2].into(), 1, cfg.channels, k * cfg.n_dir),
        (HEADS[3].into(), 1, cfg.channels, k),
    ];
    for (i, (name, ksize, cin, cout)) in widths.into_iter().enumerate() {
        let mut rng = stream(&[seed, 0xdecaf, i as u64]);
        let fan_in = (ksize * ksize * cin) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let n = ksize * ksize * cin * cout;
        let w: Vec<f64> = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        store.add(&format!("{name}.weight"), Tensor::new(vec![ksize, ksize, cin, cout], w));
        let bias = if name == "head.cls" {
            // sigmoid(bias) ~ 0.01 foreground prior
            vec![-(99.0f64).ln(); cout]
        } else {
            vec![0.0; cout]
        };
        store.add(&format!("{name}.bias"), Tensor::new(vec![cout], bias));
    }
}

/// Forward pass on an existing tape. Every layer output is checked for
/// non-finite values and the failing layer is named in the error.
pub fn forward(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    grid: &BevGrid,
    cfg: &DetectorConfig,
) -> Result<DetectorOutputs, AutogradError> {
    if grid.h != cfg.grid.cells || grid.w != cfg.grid.cells {
        return Err(AutogradError::InvalidShape {
            op: "detector forward",
            shape: vec![grid.h, grid.w],
            reason: format!("grid does not match configured {0}x{0}", cfg.grid.cells),
        });
    }
    let mut x = tape.constant(grid.input_tensor());
    tape.check_finite(x, "detector input")?;
    for layer in BACKBONE_LAYERS {
        let w = leaves.id(&format!("{layer}.weight"));
        let b = leaves.id(&format!("{layer}.bias"));
        let conv = tape.conv2d(x, w, 1)?;
        let biased = tape.bias_add(conv, b)?;
        x = tape.relu(biased);
        tape.check_finite(x, layer)?;
    }
    let features = x;

    let head = |tape: &mut Tape, name: &str| -> Result<TensorId, AutogradError> {
        let w = leaves.id(&format!("{name}.weight"));
        let b = leaves.id(&format!("{name}.bias"));
        let conv = tape.conv2d(features, w, 0)?;
        let out = tape.bias_add(conv, b)?;
        tape.check_finite(out, name)?;
        Ok(out)
    };
    let cls = head(tape, "head.cls")?;
    let reg = head(tape, "head.reg")?;
    let dir = head(tape, "head.dir")?;
    let iou_logits = head(tape, "head.iou")?;
    let iou = tape.sigmoid(iou_logits);

    Ok(DetectorOutputs {
        cls,
        reg,
        dir,
        iou,
        features,
    })
}

/// Plain-value head outputs for inference and pseudo-label generation.
#[derive(Debug, Clone)]
pub struct RawOutputs {
    pub cls: Tensor,
    pub reg: Tensor,
    pub dir: Tensor,
    pub iou: Tensor,
    pub features: Tensor,
}

/// Run the detector without gradient bookkeeping and lift the results off
/// the tape.
pub fn forward_values(
    store: &ParamStore,
    grid: &BevGrid,
    cfg: &DetectorConfig,
) -> Result<RawOutputs, AutogradError> {
    let mut tape = Tape::new();
    // Inference leaves do not require gradients.
    let mut ids = Vec::new();
    for e in store.entries() {
        ids.push((e.name.clone(), tape.leaf(e.value.clone(), false)));
    }
    let leaves = leaves_from(ids);
    let out = forward(&mut tape, &leaves, grid, cfg)?;
    Ok(RawOutputs {
        cls: tape.value(out.cls).clone(),
        reg: tape.value(out.reg).clone(),
        dir: tape.value(out.dir).clone(),
        iou: tape.value(out.iou).clone(),
        features: tape.value(out.features).clone(),
    })
}

fn leaves_from(ids: Vec<(String, TensorId)>) -> ParamLeaves {
    ParamLeaves::from_pairs(ids)
}
