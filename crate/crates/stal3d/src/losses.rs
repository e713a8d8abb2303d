//! Detection loss terms and their weighted composition.
//!
//! Classification uses a focal loss over all non-ignored anchors,
//! box regression and IoU prediction use smooth-L1, and the direction
//! classifier uses softmax cross-entropy; all are normalized by the
//! positive-anchor count. Scale filtering removes the `(l, w, h)`
//! regression components from the loss so target sizes cannot drift
//! toward the source prior. Per-term routing differs between the source
//! and target domains; by default the target side trains without a
//! classification term.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, TensorId};
use crate::detector::{AnchorAssignment, AnchorSet, DetectorOutputs};
use crate::error::{AutogradError, ConfigError};
use crate::geometry::{decode, iou_bev, Box3D, RegressionTarget};

/// One routable loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Cls,
    Reg,
    RegFiltered,
    Iou,
    Dir,
}

/// Loss weights, focal parameters, and per-domain term routing.
/// `lambda` applies, in order, to: focal classification, regression,
/// IoU prediction, direction classification, and the region-suppressed
/// adversarial term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: [f64; 5],
    pub alpha: f64,
    pub gamma: f64,
    pub source_terms: BTreeSet<LossTerm>,
    pub target_terms: BTreeSet<LossTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0, 2.0, 1.0, 0.2, 1.0],
            alpha: 0.25,
            gamma: 2.0,
            source_terms: BTreeSet::from([LossTerm::Cls, LossTerm::RegFiltered, LossTerm::Iou, LossTerm::Dir]),
            target_terms: BTreeSet::from([LossTerm::RegFiltered, LossTerm::Iou, LossTerm::Dir]),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for l in self.lambda {
            if l < 0.0 || !l.is_finite() {
                return Err(ConfigError::Invalid("loss weights must be nonnegative".into()));
            }
        }
        for (name, set) in [("source", &self.source_terms), ("target", &self.target_terms)] {
            if set.contains(&LossTerm::Reg) && set.contains(&LossTerm::RegFiltered) {
                return Err(ConfigError::Invalid(format!(
                    "{name} routing cannot contain both reg and reg_filtered"
                )));
            }
        }
        Ok(())
    }
}

/// The six source/target routing combinations of the scale-filtering
/// ablation, labelled by their term lists.
pub fn ablation_rows() -> Vec<(&'static str, LossConfig)> {
    use LossTerm::*;
    let base = LossConfig::default();
    let mk = |src: &[LossTerm], tgt: &[LossTerm]| LossConfig {
        source_terms: src.iter().cloned().collect(),
        target_terms: tgt.iter().cloned().collect(),
        ..base.clone()
    };
    vec![
        ("cls+reg+iou | cls+reg+iou", mk(&[Cls, Reg, Iou, Dir], &[Cls, Reg, Iou, Dir])),
        ("cls+iou | cls+reg+iou", mk(&[Cls, Iou, Dir], &[Cls, Reg, Iou, Dir])),
        ("cls+iou | reg+iou", mk(&[Cls, Iou, Dir], &[Reg, Iou, Dir])),
        (
            "cls+s_filter+iou | cls+s_filter+iou",
            mk(&[Cls, RegFiltered, Iou, Dir], &[Cls, RegFiltered, Iou, Dir]),
        ),
        (
            "cls+iou | cls+s_filter+iou",
            mk(&[Cls, Iou, Dir], &[Cls, RegFiltered, Iou, Dir]),
        ),
        (
            "cls+s_filter+iou | s_filter+iou",
            mk(&[Cls, RegFiltered, Iou, Dir], &[RegFiltered, Iou, Dir]),
        ),
    ]
}

const PROB_CLAMP: f64 = 1e-7;

/// Focal map over per-anchor probabilities: positives contribute
/// `-alpha (1-p)^gamma log p`, negatives `-(1-alpha) p^gamma log(1-p)`,
/// ignored anchors contribute nothing.
pub fn focal_loss_map(
    tape: &mut Tape,
    probs: TensorId,
    pos_mask: &Tensor,
    neg_mask: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<TensorId, AutogradError> {
    let shape = tape.shape(probs).to_vec();
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ones = tape.constant(Tensor::full(shape.clone(), 1.0));
    let one_minus = tape.sub(ones, p)?;
    let log_p = tape.log(p);
    let log_om = tape.log(one_minus);
    let om_pow = tape.pow_const(one_minus, gamma);
    let p_pow = tape.pow_const(p, gamma);
    let pos_core = tape.mul(om_pow, log_p)?;
    let pos_term = tape.scale(pos_core, -alpha);
    let neg_core = tape.mul(p_pow, log_om)?;
    let neg_term = tape.scale(neg_core, -(1.0 - alpha));
    let pm = tape.constant(pos_mask.clone());
    let nm = tape.constant(neg_mask.clone());
    let pos_masked = tape.mul(pm, pos_term)?;
    let neg_masked = tape.mul(nm, neg_term)?;
    tape.add(pos_masked, neg_masked)
}

/// Everything the total objective needs from one scene's detection side.
pub struct DetectionTerms {
    pub cls: Option<TensorId>,
    pub reg: Option<TensorId>,
    pub iou: Option<TensorId>,
    pub dir: Option<TensorId>,
    pub n_pos: usize,
    /// Set when a routed regression-side term had no positive anchors.
    pub no_positives: bool,
}

/// Build the routed detection loss terms for one scene on the caller's
/// tape. `labels` are the boxes the assignments refer to.
pub fn detection_terms(
    tape: &mut Tape,
    outputs: &DetectorOutputs,
    assignments: &[AnchorAssignment],
    labels: &[Box3D],
    anchors: &AnchorSet,
    cfg: &LossConfig,
    terms: &BTreeSet<LossTerm>,
) -> Result<DetectionTerms, AutogradError> {
    let n = anchors.len();
    debug_assert_eq!(assignments.len(), n);
    let n_dir = anchors.n_dir;

    let mut pos_mask = vec![0.0; n];
    let mut neg_mask = vec![0.0; n];
    let mut n_pos = 0usize;
    for (i, a) in assignments.iter().enumerate() {
        match a {
            AnchorAssignment::Positive { .. } => {
                pos_mask[i] = 1.0;
                n_pos += 1;
            }
            AnchorAssignment::Negative => neg_mask[i] = 1.0,
            AnchorAssignment::Ignore => {}
        }
    }
    let norm = 1.0 / n_pos.max(1) as f64;
    let flat = |v: Vec<f64>| Tensor::new(vec![n], v);

    let filtered = terms.contains(&LossTerm::RegFiltered);
    let want_reg = filtered || terms.contains(&LossTerm::Reg);

    // Classification: focal over the dense anchor map.
    let cls = if terms.contains(&LossTerm::Cls) {
        let logits = tape.reshape(outputs.cls, vec![n])?;
        let probs = tape.sigmoid(logits);
        let map = focal_loss_map(
            tape,
            probs,
            &flat(pos_mask.clone()),
            &flat(neg_mask.clone()),
            cfg.alpha,
            cfg.gamma,
        )?;
        let total = tape.reduce_sum(map);
        Some(tape.scale(total, norm))
    } else {
        None
    };

    // Regression: smooth-L1 between predicted and encoded targets over
    // positive rows, optionally with the size components masked away.
    let reg = if want_reg {
        let pred = tape.reshape(outputs.reg, vec![n, 7])?;
        let mut target = vec![0.0; n * 7];
        let mut mask = vec![0.0; n * 7];
        for (i, a) in assignments.iter().enumerate() {
            if let AnchorAssignment::Positive { target: t, .. } = a {
                let t = if filtered { t.filter_scale() } else { *t };
                for (j, v) in t.to_array().iter().enumerate() {
                    target[i * 7 + j] = *v;
                }
                for j in 0..7 {
                    let is_size = (3..6).contains(&j);
                    mask[i * 7 + j] = if filtered && is_size { 0.0 } else { 1.0 };
                }
            }
        }
        let target = tape.constant(Tensor::new(vec![n, 7], target));
        let mask = tape.constant(Tensor::new(vec![n, 7], mask));
        let sl = tape.smooth_l1(pred, target)?;
        let masked = tape.mul(sl, mask)?;
        let total = tape.reduce_sum(masked);
        Some(tape.scale(total, norm))
    } else {
        None
    };

    // IoU prediction: smooth-L1 against the measured BEV IoU between the
    // decoded (detached) prediction and its assigned label.
    let iou = if terms.contains(&LossTerm::Iou) {
        let pred = tape.reshape(outputs.iou, vec![n])?;
        let reg_values = tape.data(outputs.reg).to_vec();
        let mut target = vec![0.0; n];
        for (i, a) in assignments.iter().enumerate() {
            if let AnchorAssignment::Positive { label, .. } = a {
                let row = &reg_values[i * 7..(i + 1) * 7];
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(AutogradError::NonFinite {
                        context: format!("regression outputs at anchor {i}"),
                    });
                }
                let t = RegressionTarget::from_array(std::array::from_fn(|j| row[j]), false);
                let decoded = decode(&t, anchors.get(i));
                target[i] = iou_bev(&decoded, &labels[*label]);
            }
        }
        let target = tape.constant(flat(target));
        let mask = tape.constant(flat(pos_mask.clone()));
        let sl = tape.smooth_l1(pred, target)?;
        let masked = tape.mul(sl, mask)?;
        let total = tape.reduce_sum(masked);
        Some(tape.scale(total, norm))
    } else {
        None
    };

    // Direction: softmax cross-entropy over positives.
    let dir = if terms.contains(&LossTerm::Dir) {
        let logits = tape.reshape(outputs.dir, vec![n, n_dir])?;
        let mut bins = vec![0usize; n];
        for (i, a) in assignments.iter().enumerate() {
            if let AnchorAssignment::Positive { dir_bin, .. } = a {
                bins[i] = *dir_bin;
            }
        }
        let ce = tape.softmax_ce_last(logits, &bins)?;
        let mask = tape.constant(flat(pos_mask.clone()));
        let masked = tape.mul(ce, mask)?;
        let total = tape.reduce_sum(masked);
        Some(tape.scale(total, norm))
    } else {
        None
    };

    Ok(DetectionTerms {
        cls,
        reg,
        iou,
        dir,
        n_pos,
        no_positives: n_pos == 0 && (want_reg || terms.contains(&LossTerm::Iou) || terms.contains(&LossTerm::Dir)),
    })
}

/// One contribution to the total objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRow {
    pub term: String,
    pub domain: char,
    pub lambda: f64,
    pub value: f64,
}

/// Ledger of every weighted contribution plus the resulting total.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
    pub total: f64,
}

impl LossReport {
    pub fn value_of(&self, term: &str, domain: char) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.term == term && r.domain == domain)
            .map(|r| r.value)
    }

    pub fn has(&self, term: &str, domain: char) -> bool {
        self.value_of(term, domain).is_some()
    }
}

/// Accumulates weighted loss terms into a scalar total plus the report.
#[derive(Default)]
pub struct TotalLoss {
    parts: Vec<(String, char, f64, TensorId)>,
}

impl TotalLoss {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, term: &str, domain: char, lambda: f64, id: TensorId) {
        self.parts.push((term.to_string(), domain, lambda, id));
    }

    pub fn add_detection(&mut self, terms: &DetectionTerms, domain: char, cfg: &LossConfig) {
        if let Some(id) = terms.cls {
            self.add("cls", domain, cfg.lambda[0], id);
        }
        if let Some(id) = terms.reg {
            self.add("reg", domain, cfg.lambda[1], id);
        }
        if let Some(id) = terms.iou {
            self.add("iou", domain, cfg.lambda[2], id);
        }
        if let Some(id) = terms.dir {
            self.add("dir", domain, cfg.lambda[3], id);
        }
    }

    /// Weighted sum of every registred part.
    pub fn finish(self, tape: &mut Tape) -> Result<(TensorId, LossReport), AutogradError> {
        let mut acc = tape.scalar(0.0);
        let mut report = LossReport::default();
        for (term, domain, lambda, id) in self.parts {
            let value = tape.data(id)[0];
            report.rows.push(LossRow {
                term,
                domain,
                lambda,
                value,
            });
            let scaled = tape.scale(id, lambda);
            acc = tape.add(acc, scaled)?;
        }
        report.total = tape.data(acc)[0];
        Ok((acc, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_targets, forward, init_detector_params, DetectorConfig};
    use crate::autograd::ParamStore;

    #[test]
    fn focal_values_match_hand_computation() {
        // p = 0.5, y = 1: 0.25 * 0.25 * ln 2
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1], vec![0.5]), false);
        let map = focal_loss_map(
            &mut tape,
            p,
            &Tensor::new(vec![1], vec![1.0]),
            &Tensor::new(vec![1], vec![0.0]),
            0.25,
            2.0,
        )
        .unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((tape.data(map)[0] - expected).abs() < 1e-12);
        assert!((tape.data(map)[0] - 0.043321698784996581).abs() < 1e-12);

        // p near 1 for a positive: loss ~ 0.
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1], vec![1.0 - 1e-9]), false);
        let map = focal_loss_map(
            &mut tape,
            p,
            &Tensor::new(vec![1], vec![1.0]),
            &Tensor::new(vec![1], vec![0.0]),
            0.25,
            2.0,
        )
        .unwrap();
        assert!(tape.data(map)[0] < 1e-12);
    }

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero_alpha_half() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.8]), false);
        let map = focal_loss_map(
            &mut tape,
            p,
            &Tensor::new(vec![2], vec![1.0, 0.0]),
            &Tensor::new(vec![2], vec![0.0, 1.0]),
            0.5,
            0.0,
        )
        .unwrap();
        let v = tape.data(map);
        assert!((v[0] - 0.5 * -(0.3f64.ln())).abs() < 1e-12);
        assert!((v[1] - 0.5 * -(0.2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_branch_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 3.0]), false);
        let b = tape.leaf(Tensor::zeros(vec![3]), false);
        let sl = tape.smooth_l1(a, b).unwrap();
        let v = tape.data(sl);
        assert!((v[0] - 0.125).abs() < 1e-12); // 0.5 * 0.5^2
        assert!((v[1] - 0.5).abs() < 1e-12); // boundary: |1| - 0.5
        assert!((v[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dir_loss_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]), false);
        let ce = tape.softmax_ce_last(logits, &[0, 1]).unwrap();
        let v = tape.data(ce);
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v[1] - (1.0 + (2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v[1] - 2.1269280110429727).abs() < 1e-12);
    }

    #[test]
    fn default_config_matches_published_weights() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda, [1.0, 2.0, 1.0, 0.2, 1.0]);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.gamma, 2.0);
        assert!(cfg.source_terms.contains(&LossTerm::Cls));
        assert!(!cfg.target_terms.contains(&LossTerm::Cls));
        assert!(cfg.validate().is_ok());

        let mut bad = cfg.clone();
        bad.source_terms.insert(LossTerm::Reg);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_rows_cover_six_routings() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 6);
        for (_, cfg) in &rows {
            cfg.validate().unwrap();
        }
        // The final row is the default routing.
        let last = &rows[5].1;
        let def = LossConfig::default();
        assert_eq!(last.source_terms, def.source_terms);
        assert_eq!(last.target_terms, def.target_terms);
    }

    #[test]
    fn total_loss_weighted_sum_and_ledger() {
        let mut tape = Tape::new();
        let mut tl = TotalLoss::new();
        let one = tape.scalar(1.0);
        for (term, lambda) in [("cls", 1.0), ("reg", 2.0), ("iou", 1.0), ("dir", 0.2), ("rs", 1.0)] {
            tl.add(term, 'S', lambda, one);
        }
        let (total, report) = tl.finish(&mut tape).unwrap();
        assert!((tape.data(total)[0] - 5.2).abs() < 1e-12);
        assert_eq!(report.rows.len(), 5);
        assert!((report.total - 5.2).abs() < 1e-12);
        assert_eq!(report.value_of("rs", 'S'), Some(1.0));

        // Only the adversarial term at its default weight.
        let mut tape = Tape::new();
        let mut tl = TotalLoss::new();
        let one = tape.scalar(1.0);
        tl.add("rs", 'T', 1.0, one);
        let (total, _) = tl.finish(&mut tape).unwrap();
        assert!((tape.data(total)[0] - 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let (total, report) = TotalLoss::new().finish(&mut tape).unwrap();
        assert_eq!(tape.data(total)[0], 0.0);
        assert_eq!(report.total, 0.0);
    }

    fn scene_fixture() -> (DetectorConfig, crate::detector::AnchorSet, Vec<Box3D>, ParamStore) {
        let mut cfg = DetectorConfig::small(4, 8.0);
        cfg.channels = 8;
        let anchors = cfg.anchor_set();
        // A label right on an anchor plus one offset label.
        let a = anchors.get(anchors.flat_index(1, 1, 0, 0)).clone();
        let mut b = anchors.get(anchors.flat_index(2, 3, 0, 0)).clone();
        b.cx -= 0.4;
        b.yaw += 0.3;
        let mut store = ParamStore::new();
        init_detector_params(&mut store, &cfg, 13);
        (cfg, anchors, vec![a, b], store)
    }

    #[test]
    fn perfect_predictions_zero_the_regression_terms() {
        let (cfg, anchors, labels, store) = scene_fixture();
        let assignments = assign_targets(&labels, &anchors);
        let grid = crate::detector::pillarize(&[[0.0, 0.0, 0.5]], &cfg.grid);

        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let outputs = forward(&mut tape, &leaves, &grid, &cfg).unwrap();
        // Replace the network regression output by the exact targets.
        let n = anchors.len();
        let mut exact = vec![0.0; n * 7];
        for (i, a) in assignments.iter().enumerate() {
            if let AnchorAssignment::Positive { target, .. } = a {
                for (j, v) in target.to_array().iter().enumerate() {
                    exact[i * 7 + j] = *v;
                }
            }
        }
        let exact_id = tape.leaf(Tensor::new(vec![4, 4, anchors.per_cell() * 7], exact), true);
        let oracle_outputs = DetectorOutputs {
            cls: outputs.cls,
            reg: exact_id,
            dir: outputs.dir,
            iou: outputs.iou,
            features: outputs.features,
        };
        let cfg_loss = LossConfig {
            source_terms: BTreeSet::from([LossTerm::Reg]),
            ..Default::default()
        };
        let terms = detection_terms(
            &mut tape,
            &oracle_outputs,
            &assignments,
            &labels,
            &anchors,
            &cfg_loss,
            &cfg_loss.source_terms,
        )
        .unwrap();
        assert_eq!(terms.n_pos, 2);
        assert!(tape.data(terms.reg.unwrap())[0] < 1e-18);
    }

    #[test]
    fn filtered_routing_ignores_size_channels() {
        let (cfg, anchors, labels, store) = scene_fixture();
        let assignments = assign_targets(&labels, &anchors);
        let grid = crate::detector::pillarize(&[[0.3, -0.2, 0.6]], &cfg.grid);
        let eval_reg = |perturb_size: bool| -> f64 {
            let mut tape = Tape::new();
            let leaves = store.leaves(&mut tape);
            let outputs = forward(&mut tape, &leaves, &grid, &cfg).unwrap();
            let n = anchors.len();
            let mut data = tape.data(outputs.reg).to_vec();
            if perturb_size {
                for i in 0..n {
                    data[i * 7 + 3] += 5.0;
                    data[i * 7 + 4] -= 2.0;
                    data[i * 7 + 5] += 1.0;
                }
            }
            let replaced = tape.leaf(Tensor::new(vec![4, 4, anchors.per_cell() * 7], data), true);
            let outputs = DetectorOutputs { reg: replaced, ..outputs };
            let cfg_loss = LossConfig::default();
            let terms = detection_terms(
                &mut tape,
                &outputs,
                &assignments,
                &labels,
                &anchors,
                &cfg_loss,
                &cfg_loss.source_terms,
            )
            .unwrap();
            tape.data(terms.reg.unwrap())[0]
        };
        assert_eq!(eval_reg(false), eval_reg(true));
    }

    #[test]
    fn no_positive_anchors_zero_with_flag() {
        let (cfg, anchors, _, store) = scene_fixture();
        let assignments = assign_targets(&[], &anchors);
        let grid = crate::detector::pillarize(&[], &cfg.grid);
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let outputs = forward(&mut tape, &leaves, &grid, &cfg).unwrap();
        let cfg_loss = LossConfig::default();
        let terms = detection_terms(
            &mut tape,
            &outputs,
            &assignments,
            &[],
            &anchors,
            &cfg_loss,
            &cfg_loss.target_terms,
        )
        .unwrap();
        assert!(terms.no_positives);
        assert_eq!(tape.data(terms.reg.unwrap())[0], 0.0);
        assert_eq!(tape.data(terms.iou.unwrap())[0], 0.0);
        assert_eq!(tape.data(terms.dir.unwrap())[0], 0.0);
    }

    #[test]
    fn scale_filter_gradient_is_exactly_zero_on_size_channels() {
        let (cfg, anchors, labels, store) = scene_fixture();
        let assignments = assign_targets(&labels, &anchors);
        let grid = crate::detector::pillarize(&[[0.5, 0.1, 0.4], [-3.0, 2.0, 0.8]], &cfg.grid);

        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let outputs = forward(&mut tape, &leaves, &grid, &cfg).unwrap();
        let cfg_loss = LossConfig::default();
        let mut tl = TotalLoss::new();
        let terms = detection_terms(
            &mut tape,
            &outputs,
            &assignments,
            &labels,
            &anchors,
            &cfg_loss,
            &cfg_loss.source_terms,
        )
        .unwrap();
        tl.add_detection(&terms, 'S', &cfg_loss);
        let (total, report) = tl.finish(&mut tape).unwrap();
        assert!(report.has("cls", 'S') && report.has("reg", 'S'));
        tape.backward(total).unwrap();

        // The dense regression map must carry exactly zero gradient on
        // the (l, w, h) channels of every anchor.
        let g = tape.grad(outputs.reg);
        let n = anchors.len();
        let mut saw_nonzero_pos = false;
        for i in 0..n {
            for j in 3..6 {
                assert_eq!(g[i * 7 + j], 0.0, "size channel ({i}, {j}) leaked gradient");
            }
            for j in [0, 1, 2, 6] {
                if g[i * 7 + j] != 0.0 {
                    saw_nonzero_pos = true;
                }
            }
        }
        assert!(saw_nonzero_pos, "position channels should receive gradient");

        // And the head weights feeding those channels stay untouched.
        let k = anchors.per_cell();
        let wg = tape.grad(leaves.id("head.reg.weight"));
        let channels = cfg.channels;
        for anchor_in_cell in 0..k {
            for j in 3..6 {
                let cout = anchor_in_cell * 7 + j;
                for ci in 0..channels {
                    assert_eq!(wg[ci * (k * 7) + cout], 0.0);
                }
            }
        }
    }
}
