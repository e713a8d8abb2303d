//! The two training stages: supervised source pre-training with random
//! object scaling, and the alternating self-training / adversarial
//! alignment loop on mixed source-target batches.

use std::path::Path;

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use crate::adversarial::{
    adv_loss_map, ca_map, discriminator_forward, frs_map, init_discriminator_params,
    region_partition, rs_loss, DomainSide, Suppression,
};
use crate::augment::ros_transform;
use crate::autograd::{save_checkpoint, OneCycle, ParamStore, Tape, Tensor};
use crate::detector::{assign_targets, forward, init_detector_params, pillarize, AnchorSet};
use crate::error::PipelineError;
use crate::geometry::Box3D;
use crate::losses::{detection_terms, LossReport, LossTerm, TotalLoss};
use crate::parallel::parallel_map;
use crate::pseudolabel::{generate, MemoryBank};
use crate::rng::{mix_key, stream};
use crate::simworld::Dataset;

/// Fresh detector plus discriminator parameters; both stages share one
/// store so checkpoints are uniform across the pipeline.
pub fn init_run_params(cfg: &RunConfig) -> ParamStore {
    let mut store = ParamStore::new();
    init_detector_params(&mut store, &cfg.detector, cfg.seed);
    init_discriminator_params(&mut store, cfg.detector.channels, cfg.seed ^ 0x5eed);
    store
}

/// Per-step CSV log: step, learning rate, total, then one column per
/// term and domain.
#[derive(Debug, Default, Clone)]
pub struct TrainLog {
    pub rows: Vec<String>,
}

const LOG_TERMS: [&str; 5] = ["cls", "reg", "iou", "dir", "rs"];

impl TrainLog {
    pub fn header() -> String {
        let mut cols = vec!["step".to_string(), "lr".to_string(), "total".to_string()];
        for domain in ['S', 'T'] {
            for term in LOG_TERMS {
                cols.push(format!("{term}_{domain}"));
            }
        }
        cols.join(",")
    }

    pub fn push(&mut self, step: u64, lr: f64, report: &LossReport) {
        let mut cols = vec![step.to_string(), format!("{lr}"), format!("{}", report.total)];
        for domain in ['S', 'T'] {
            for term in LOG_TERMS {
                match report.value_of(term, domain) {
                    Some(v) => cols.push(format!("{v}")),
                    None => cols.push(String::new()),
                }
            }
        }
        self.rows.push(cols.join(","));
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut body = Self::header();
        body.push('\n');
        for r in &self.rows {
            body.push_str(r);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

fn shuffled(n: usize, key: &[u64]) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(key));
    order
}

fn lr_at(cfg: &RunConfig, step_in_phase: u64, total_steps: u64) -> f64 {
    if cfg.optim.one_cycle {
        OneCycle {
            max_lr: cfg.optim.lr,
            pct_start: cfg.optim.pct_start,
            div_factor: cfg.optim.div_factor,
            final_div: cfg.optim.final_div,
        }
        .lr(step_in_phase, total_steps)
    } else {
        cfg.optim.lr
    }
}

/// One optimization step over a source scene and, during adaptation, a
/// target scene. Returns the loss-term ledger.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ParamStore,
    cfg: &RunConfig,
    anchors: &AnchorSet,
    source: (&[[f64; 3]], &[Box3D]),
    source_terms: &std::collections::BTreeSet<LossTerm>,
    target: Option<(&[[f64; 3]], &[Box3D])>,
    adversarial: bool,
    lr: f64,
    step: u64,
) -> Result<LossReport, PipelineError> {
    let numerical = |reason: String| PipelineError::Numerical { step, reason };
    let mut tape = Tape::new();
    let leaves = params.leaves(&mut tape);
    let mut total = TotalLoss::new();

    let src_grid = pillarize(source.0, &cfg.detector.grid);
    let src_assign = assign_targets(source.1, anchors);
    let src_out = forward(&mut tape, &leaves, &src_grid, &cfg.detector)?;
    let src_terms = detection_terms(
        &mut tape,
        &src_out,
        &src_assign,
        source.1,
        anchors,
        &cfg.loss,
        source_terms,
    )?;
    total.add_detection(&src_terms, 'S', &cfg.loss);

    let tgt_out = match target {
        Some((points, labels)) => {
            let grid = pillarize(points, &cfg.detector.grid);
            let assign = assign_targets(labels, anchors);
            let out = forward(&mut tape, &leaves, &grid, &cfg.detector)?;
            let terms = detection_terms(
                &mut tape,
                &out,
                &assign,
                labels,
                anchors,
                &cfg.loss,
                &cfg.loss.target_terms,
            )?;
            total.add_detection(&terms, 'T', &cfg.loss);
            Some(out)
        }
        None => None,
    };

    if adversarial {
        if let Some(tgt_out) = &tgt_out {
            let lambda5 = cfg.loss.lambda[4];
            for (side, out) in [(DomainSide::Source, &src_out), (DomainSide::Target, tgt_out)] {
                let weights = match cfg.suppression {
                    Suppression::FrsTopK { k } => {
                        let s = frs_map(tape.value(out.cls));
                        region_partition(&s, k).map_err(PipelineError::from)?
                    }
                    Suppression::ChannelAttention { beta } => {
                        ca_map(tape.value(out.features), beta)
                    }
                    Suppression::None => {
                        let shape = tape.shape(out.features);
                        Tensor::full(vec![shape[0], shape[1]], 1.0)
                    }
                };
                let d = discriminator_forward(&mut tape, &leaves, out.features, cfg.grl_lambda)?;
                let adv = adv_loss_map(&mut tape, d, side)?;
                let rs = rs_loss(&mut tape, &weights, adv, cfg.rs_normalized)?;
                let tag = if side == DomainSide::Source { 'S' } else { 'T' };
                total.add("rs", tag, lambda5, rs);
            }
        }
    }

    let (loss, report) = total.finish(&mut tape)?;
    if !report.total.is_finite() {
        return Err(numerical(format!("loss became {}", report.total)));
    }
    tape.backward(loss)?;
    params
        .adam_step(&tape, &leaves, lr, &cfg.optim.adam)
        .map_err(|e| numerical(e.to_string()))?;
    Ok(report)
}

/// Supervised pre-training on the labeled source domain. The returned
/// parameters initialize the adaptation stage.
pub fn pretrain(
    source: &Dataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, TrainLog), PipelineError> {
    cfg.validate()?;
    let mut params = init_run_params(cfg);
    let anchors = cfg.detector.anchor_set();
    let mut log = TrainLog::default();
    let n = source.len();
    let total_steps = (cfg.pretrain_epochs * n) as u64;
    let mut step = 0u64;
    for epoch in 0..cfg.pretrain_epochs {
        let order = shuffled(n, &[cfg.seed, 0x0de7, epoch as u64]);
        for idx in order {
            let labels = source.labels(idx)?.to_vec();
            let points = source.points(idx);
            let (points, labels) = if cfg.ros.enabled {
                let seed = mix_key(&[cfg.seed, 0x526f, epoch as u64, idx as u64]);
                ros_transform(points, &labels, &cfg.ros.range, seed)
            } else {
                (points.to_vec(), labels)
            };
            let lr = lr_at(cfg, step, total_steps);
            let report = train_step(
                &mut params,
                cfg,
                &anchors,
                (&points, &labels),
                &cfg.pretrain_terms,
                None,
                false,
                lr,
                step,
            )?;
            log.push(step, lr, &report);
            step += 1;
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        save_checkpoint(&dir.join("checkpoint.ckpt"), &params, false)?;
        log.save_csv(&dir.join("train_log.csv"))?;
    }
    Ok((params, log))
}

/// What one adaptation round did.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    /// Fraction of target scenes whose pseudo-label set was empty.
    pub empty_fraction: f64,
    /// Mean per-scene bank churn for this round's integration.
    pub churn: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub params: ParamStore,
    pub rounds: Vec<RoundOutcome>,
    pub bank: MemoryBank,
    pub log: TrainLog,
}

/// The adaptation stage: per round, regenerate pseudo labels with the
/// current model, reconcile them into the memory bank, then train on
/// 1:1 interleaved source/target batches with the adversarial term.
/// `target` may (and in production should) be a withheld-label handle;
/// `target_eval` is an eval-only labeled handle used between rounds.
pub fn adapt(
    source: &Dataset,
    target: &Dataset,
    init: ParamStore,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    target_eval: Option<&Dataset>,
) -> Result<AdaptOutcome, PipelineError> {
    cfg.validate()?;
    let mut params = init;
    let anchors = cfg.detector.anchor_set();
    let mut bank = MemoryBank::new(cfg.bank.buffer_capacity);
    let mut log = TrainLog::default();
    let mut rounds = Vec::new();
    let n_s = source.len();
    let n_t = target.len();
    let adversarial = cfg.loss.lambda[4] > 0.0;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }

    for round in 1..=cfg.rounds {
        // Pseudo-label generation with the current parameters.
        let sets = parallel_map(n_t, |i| {
            generate(
                &params,
                target.points(i),
                i,
                &cfg.detector,
                &anchors,
                cfg.eval.nms_iou,
                cfg.phi,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let empties = sets.iter().filter(|s| s.boxes.is_empty()).count();
        let empty_fraction = empties as f64 / n_t.max(1) as f64;
        if round == 1 && empty_fraction > 0.5 {
            eprintln!(
                "warning: round 1 produced empty pseudo-label sets for {empties}/{n_t} scenes; continuing"
            );
        }

        let mut churn_sum = 0.0;
        for set in sets {
            let scene = set.scene;
            let stats = bank.integrate(set);
            let size = bank.entry(scene).map(|e| e.boxes.len()).unwrap_or(0);
            churn_sum += stats.churn(size);
        }
        let churn = churn_sum / n_t.max(1) as f64;
        bank.round = round as u64;
        if let Some(dir) = out_dir {
            bank.save_json(&dir.join(format!("bank_round_{round}.json")))?;
        }
        let snapshots: Vec<Vec<Box3D>> = (0..n_t).map(|i| bank.snapshot(i)).collect();

        // Mixed-domain training, one-cycle schedule restarted per round.
        let steps_per_epoch = n_s.max(n_t);
        let total_round_steps = (cfg.epochs_per_round * steps_per_epoch) as u64;
        let mut step_in_round = 0u64;
        for epoch in 0..cfg.epochs_per_round {
            let src_order = shuffled(n_s, &[cfg.seed, 0xada0, round as u64, epoch as u64]);
            let tgt_order = shuffled(n_t, &[cfg.seed, 0xada1, round as u64, epoch as u64]);
            for j in 0..steps_per_epoch {
                let i_s = src_order[j % n_s];
                let i_t = tgt_order[j % n_t];
                let src_labels = source.labels(i_s)?.to_vec();
                let src_points = source.points(i_s);
                let (src_points, src_labels) = if cfg.ros.enabled && cfg.ros.apply_in_adaptation {
                    let seed = mix_key(&[
                        cfg.seed,
                        0x526f5f,
                        round as u64,
                        epoch as u64,
                        i_s as u64,
                    ]);
                    ros_transform(src_points, &src_labels, &cfg.ros.range, seed)
                } else {
                    (src_points.to_vec(), src_labels)
                };
                let lr = lr_at(cfg, step_in_round, total_round_steps);
                let global_step = params.step;
                let report = train_step(
                    &mut params,
                    cfg,
                    &anchors,
                    (&src_points, &src_labels),
                    &cfg.loss.source_terms,
                    Some((target.points(i_t), &snapshots[i_t])),
                    adversarial,
                    lr,
                    global_step,
                )?;
                debug_assert!(
                    !adversarial || (report.has("rs", 'S') && report.has("rs", 'T')),
                    "adversarial terms must appear for both domains"
                );
                log.push(global_step, lr, &report);
                step_in_round += 1;
            }
        }

        let eval = match target_eval {
            Some(data) => Some(evaluate(&params, data, cfg)?),
            None => None,
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(format!("round_{round}.ckpt")), &params, false)?;
            if let Some(report) = &eval {
                let body = serde_json::to_string_pretty(report).expect("report serializes");
                std::fs::write(dir.join(format!("eval_round_{round}.json")), body).map_err(|e| {
                    PipelineError::Io {
                        path: dir.display().to_string(),
                        source: e,
                    }
                })?;
            }
        }
        rounds.push(RoundOutcome {
            round,
            empty_fraction,
            churn,
            eval,
        });

        if let Some(threshold) = cfg.bank.churn_early_stop {
            if churn < threshold {
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint.ckpt"), &params, false)?;
        log.save_csv(&dir.join("train_log.csv"))?;
    }
    Ok(AdaptOutcome {
        params,
        rounds,
        bank,
        log,
    })
}
