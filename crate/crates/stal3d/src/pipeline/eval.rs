//! Average precision over 40 recall positions, in bird's-eye view and in
//! 3D, plus the closed-gap statistic against source-only and oracle
//! baselines.

use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, RunConfig};
use crate::autograd::ParamStore;
use crate::detector::{predict, AnchorSet, DetectorConfig};
use crate::error::PipelineError;
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::parallel::parallel_map;
use crate::simworld::Dataset;

pub const RECALL_POSITIONS: usize = 40;

/// Per-class evaluation result. AP is `None` when the class has no
/// ground truth, and such classes are excluded from the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap_bev: Option<f64>,
    pub ap_3d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassEval>,
    pub mean_ap_bev: f64,
    pub mean_ap_3d: f64,
    /// `(recall, precision)` samples per class for the 3D matching,
    /// ordered by descending detection score.
    pub pr_curves_3d: Vec<Vec<(f64, f64)>>,
}

/// `(AP_model - AP_source_only) / (AP_oracle - AP_source_only) * 100`;
/// undefined when the denominator vanishes.
pub fn closed_gap(model_ap: f64, source_only_ap: f64, oracle_ap: f64) -> Option<f64> {
    let denom = oracle_ap - source_only_ap;
    if denom == 0.0 {
        return None;
    }
    Some((model_ap - source_only_ap) / denom * 100.0)
}

/// A detection with its scene, used for dataset-wide matching.
#[derive(Debug, Clone)]
pub struct SceneDetection {
    pub scene: usize,
    pub item: Box3D,
}

/// Average precision at 40 equally spaced recall points with
/// precision-envelope interpolation. `matches` lists, in descending
/// score order, whether each detection was a true positive.
pub fn ap_r40(matches: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(matches.len());
    let mut tp = 0usize;
    for (i, is_tp) in matches.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        pr.push((recall, precision));
    }
    let mut total = 0.0;
    for r in 1..=RECALL_POSITIONS {
        let target = r as f64 / RECALL_POSITIONS as f64;
        // Precision envelope: the best precision at any recall >= target.
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= target - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0f64, f64::max);
        total += p;
    }
    total / RECALL_POSITIONS as f64 * 100.0
}

/// Greedy matching of one class's detections at `threshold`, using the
/// supplied IoU kind. Detections must arrive sorted by descending score;
/// each ground-truth box is consumable once.
pub fn greedy_match(
    detections: &[SceneDetection],
    gt_by_scene: &[Vec<Box3D>],
    threshold: f64,
    iou: impl Fn(&Box3D, &Box3D) -> f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt_by_scene.iter().map(|g| vec![false; g.len()]).collect();
    let mut matches = Vec::with_capacity(detections.len());
    for det in detections {
        let gts = &gt_by_scene[det.scene];
        let mut best: Option<(f64, usize)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if used[det.scene][j] {
                continue;
            }
            let v = iou(&det.item, gt);
            let better = match best {
                None => v > 0.0,
                Some((bv, _)) => v > bv,
            };
            if better {
                best = Some((v, j));
            }
        }
        match best {
            Some((v, j)) if v >= threshold => {
                used[det.scene][j] = true;
                matches.push(true);
            }
            _ => matches.push(false),
        }
    }
    matches
}

/// Evaluate a model over a labeled dataset.
pub fn evaluate(
    store: &ParamStore,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<EvalReport, PipelineError> {
    let anchors = cfg.detector.anchor_set();
    let detections = predict_all(store, dataset, &cfg.detector, &anchors, &cfg.eval)?;
    evaluate_detections(&detections, dataset, &cfg.detector, &cfg.eval)
}

/// Run inference over every scene, fanning out across workers.
pub fn predict_all(
    store: &ParamStore,
    dataset: &Dataset,
    det_cfg: &DetectorConfig,
    anchors: &AnchorSet,
    eval_cfg: &EvalConfig,
) -> Result<Vec<Vec<Box3D>>, PipelineError> {
    let results = parallel_map(dataset.len(), |i| {
        predict(
            store,
            dataset.points(i),
            det_cfg,
            anchors,
            eval_cfg.nms_iou,
            eval_cfg.score_thresh,
        )
    });
    results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::from)
}

/// Score detections that were already produced (used by tests that build
/// detection sets directly).
pub fn evaluate_detections(
    detections_per_scene: &[Vec<Box3D>],
    dataset: &Dataset,
    det_cfg: &DetectorConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    let num_classes = det_cfg.num_classes();
    let mut gt_by_class: Vec<Vec<Vec<Box3D>>> =
        vec![vec![Vec::new(); dataset.len()]; num_classes];
    for i in 0..dataset.len() {
        for b in dataset.labels(i)? {
            if b.class_id < num_classes {
                gt_by_class[b.class_id][i].push(b.clone());
            }
        }
    }

    let mut per_class = Vec::with_capacity(num_classes);
    let mut pr_curves_3d = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut dets: Vec<SceneDetection> = Vec::new();
        for (scene, boxes) in detections_per_scene.iter().enumerate() {
            for b in boxes.iter().filter(|b| b.class_id == class) {
                dets.push(SceneDetection {
                    scene,
                    item: b.clone(),
                });
            }
        }
        // Descending score; stable within equal scores.
        dets.sort_by(|a, b| {
            b.item
                .score_or_one()
                .partial_cmp(&a.item.score_or_one())
                .unwrap()
        });
        let num_gt: usize = gt_by_class[class].iter().map(|g| g.len()).sum();
        let threshold = eval_cfg.iou_thresholds[class];
        let m_bev = greedy_match(&dets, &gt_by_class[class], threshold, iou_bev);
        let m_3d = greedy_match(&dets, &gt_by_class[class], threshold, iou_3d);
        let (ap_bev, ap_3d) = if num_gt == 0 {
            (None, None)
        } else {
            (Some(ap_r40(&m_bev, num_gt)), Some(ap_r40(&m_3d, num_gt)))
        };
        // PR samples for reporting.
        let mut curve = Vec::with_capacity(m_3d.len());
        let mut tp = 0usize;
        for (i, hit) in m_3d.iter().enumerate() {
            if *hit {
                tp += 1;
            }
            if num_gt > 0 {
                curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
            }
        }
        pr_curves_3d.push(curve);
        let name = dataset
            .spec
            .classes
            .get(class)
            .map(|c| c.name.clone())
            .unwrap_or_else(|| format!("class{class}"));
        per_class.push(ClassEval {
            class_id: class,
            name,
            num_gt,
            ap_bev,
            ap_3d,
        });
    }

    let mean = |f: fn(&ClassEval) -> Option<f64>| {
        let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(EvalReport {
        mean_ap_bev: mean(|c| c.ap_bev),
        mean_ap_3d: mean(|c| c.ap_3d),
        per_class,
        pr_curves_3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{Dataset, DomainSpec};

    fn tiny_dataset(labels: Vec<Vec<Box3D>>) -> Dataset {
        let spec = DomainSpec::default();
        let points = labels.iter().map(|_| Vec::new()).collect();
        let split = labels.iter().map(|_| crate::simworld::Split::Train).collect();
        Dataset::from_parts(spec, 0, points, Some(labels), split)
    }

    fn car(cx: f64) -> Box3D {
        Box3D::new(cx, 0.0, 0.8, 4.0, 1.8, 1.6, 0.0, 0).unwrap()
    }

    #[test]
    fn closed_gap_formula() {
        // Hand-checks against published adaptation numbers.
        assert!((closed_gap(65.85, 40.66, 59.79).unwrap() - 131.68).abs() < 5e-3);
        assert!((closed_gap(47.99, 40.66, 59.79).unwrap() - 38.32).abs() < 5e-3);
        assert_eq!(closed_gap(50.0, 40.0, 40.0), None);
        assert_eq!(closed_gap(40.0, 40.0, 60.0), Some(0.0));
    }

    #[test]
    fn perfect_detections_score_hundred() {
        let labels = vec![vec![car(0.0), car(10.0)], vec![car(-5.0)]];
        let data = tiny_dataset(labels.clone());
        let dets: Vec<Vec<Box3D>> = labels
            .iter()
            .map(|scene| {
                scene
                    .iter()
                    .map(|b| b.clone().with_score(1.0).unwrap())
                    .collect()
            })
            .collect();
        let det_cfg = DetectorConfig::small(16, 16.0);
        let report = evaluate_detections(&dets, &data, &det_cfg, &EvalConfig::default()).unwrap();
        assert_eq!(report.per_class[0].ap_bev, Some(100.0));
        assert_eq!(report.per_class[0].ap_3d, Some(100.0));
        // Classes without ground truth are excluded from the mean.
        assert!(report.per_class[1].ap_bev.is_none());
        assert_eq!(report.mean_ap_3d, 100.0);
    }

    #[test]
    fn zero_detections_score_zero() {
        let data = tiny_dataset(vec![vec![car(0.0)]]);
        let det_cfg = DetectorConfig::small(16, 16.0);
        let report =
            evaluate_detections(&[Vec::new()], &data, &det_cfg, &EvalConfig::default()).unwrap();
        assert_eq!(report.per_class[0].ap_3d, Some(0.0));
    }

    #[test]
    fn hand_traced_pr_curve_gives_25() {
        // Two ground-truth cars; one true match at score 0.9 and one
        // false positive at score 0.95. Precision reaches 0.5 at recall
        // 0.5, so 20 of the 40 recall points contribute 0.5 each.
        let data = tiny_dataset(vec![vec![car(0.0), car(10.0)]]);
        let dets = vec![vec![
            car(0.0).with_score(0.9).unwrap(),
            car(100.0).with_score(0.95).unwrap(),
        ]];
        let det_cfg = DetectorConfig::small(16, 16.0);
        let report = evaluate_detections(&dets, &data, &det_cfg, &EvalConfig::default()).unwrap();
        assert!((report.per_class[0].ap_3d.unwrap() - 25.0).abs() < 1e-9);
        assert!((report.per_class[0].ap_bev.unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn extra_true_positive_never_hurts_and_trailing_fp_is_free() {
        let mut rng = crate::rng::stream(&[404]);
        use crate::rng::RngSampling;
        for _ in 0..50 {
            let n_gt = 1 + (rng.uniform(0.0, 4.0) as usize);
            let labels: Vec<Box3D> = (0..n_gt).map(|i| car(10.0 * i as f64)).collect();
            let data = tiny_dataset(vec![labels.clone()]);
            let det_cfg = DetectorConfig::small(16, 16.0);

            // A random subset of correct detections plus some FPs.
            let mut dets: Vec<Box3D> = Vec::new();
            for (i, l) in labels.iter().enumerate() {
                if rng.uniform(0.0, 1.0) < 0.6 {
                    dets.push(l.clone().with_score(rng.uniform(0.3, 0.9)).unwrap());
                }
                if rng.uniform(0.0, 1.0) < 0.4 {
                    dets.push(car(1000.0 + 10.0 * i as f64).with_score(rng.uniform(0.3, 0.9)).unwrap());
                }
            }
            let base = evaluate_detections(&[dets.clone()], &data, &det_cfg, &EvalConfig::default())
                .unwrap()
                .per_class[0]
                .ap_3d
                .unwrap();

            // Adding a correct detection never lowers AP.
            let missing: Vec<&Box3D> = labels
                .iter()
                .filter(|l| !dets.iter().any(|d| (d.cx - l.cx).abs() < 1e-9))
                .collect();
            if let Some(extra) = missing.first() {
                let mut more = dets.clone();
                more.push((*extra).clone().with_score(rng.uniform(0.2, 1.0)).unwrap());
                let bumped =
                    evaluate_detections(&[more], &data, &det_cfg, &EvalConfig::default())
                        .unwrap()
                        .per_class[0]
                        .ap_3d
                        .unwrap();
                assert!(
                    bumped >= base - 1e-9,
                    "adding a correct detection lowered AP: {base} -> {bumped}"
                );
            }

            // A false positive below every true-positive score is free.
            let mut with_fp = dets.clone();
            with_fp.push(car(5000.0).with_score(0.01).unwrap());
            let after = evaluate_detections(&[with_fp], &data, &det_cfg, &EvalConfig::default())
                .unwrap()
                .per_class[0]
                .ap_3d
                .unwrap();
            assert!(
                (after - base).abs() < 1e-9,
                "trailing FP changed AP: {base} -> {after}"
            );
        }
    }

    #[test]
    fn greedy_matching_consumes_each_gt_once() {
        let labels = vec![vec![car(0.0)]];
        let data = tiny_dataset(labels);
        let det_cfg = DetectorConfig::small(16, 16.0);
        // Two identical detections on one GT: second one is a FP.
        let dets = vec![vec![
            car(0.0).with_score(0.9).unwrap(),
            car(0.0).with_score(0.8).unwrap(),
        ]];
        let report = evaluate_detections(&dets, &data, &det_cfg, &EvalConfig::default()).unwrap();
        // Recall reaches 1.0 at precision 1/1; envelope keeps precision 1.
        assert_eq!(report.per_class[0].ap_3d, Some(100.0));
        let curve = &report.pr_curves_3d[0];
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0], (1.0, 1.0));
        assert_eq!(curve[1], (1.0, 0.5));
    }
}
