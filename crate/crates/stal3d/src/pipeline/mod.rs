//! End-to-end pipeline: source pre-training with random object scaling,
//! the alternating self-training plus adversarial-alignment loop,
//! evaluation, and report rendering.

mod config;
mod eval;
mod report;
mod train;

pub use config::{BankConfig, EvalConfig, OptimConfig, RosConfig, RunConfig};
pub use eval::{
    ap_r40, closed_gap, evaluate, evaluate_detections, greedy_match, predict_all, ClassEval,
    EvalReport, SceneDetection, RECALL_POSITIONS,
};
pub use report::{
    closed_gap_markdown, eval_csv, eval_markdown, recompute_fixture, write_pr_curves,
    ClosedGapFixture, FixtureMethod, FixtureTask, GapEntry,
};
pub use train::{adapt, init_run_params, pretrain, AdaptOutcome, RoundOutcome, TrainLog};
