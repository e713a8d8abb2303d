//! Run configuration: one JSON file drives generation, training,
//! adaptation, and evaluation; CLI flags override individual fields.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::Suppression;
use crate::augment::ScaleRange;
use crate::autograd::AdamConfig;
use crate::detector::DetectorConfig;
use crate::error::ConfigError;
use crate::losses::{LossConfig, LossTerm};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RosConfig {
    pub enabled: bool,
    pub range: ScaleRange,
    /// Random object scaling belongs to the pre-training stage; this
    /// override also applies it to source scenes during adaptation.
    pub apply_in_adaptation: bool,
}

impl Default for RosConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            range: ScaleRange::default(),
            apply_in_adaptation: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub one_cycle: bool,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            one_cycle: true,
            pct_start: 0.3,
            div_factor: 10.0,
            final_div: 100.0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub buffer_capacity: usize,
    /// Stop the round loop early when the mean bank churn drops below
    /// this fraction.
    pub churn_early_stop: Option<f64>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 64,
            churn_early_stop: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Matching IoU threshold per class.
    pub iou_thresholds: Vec<f64>,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.7, 0.5, 0.5],
            score_thresh: 0.05,
            nms_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub ros: RosConfig,
    /// Pseudo-label generation threshold (inclusive).
    pub phi: f64,
    pub suppression: Suppression,
    pub grl_lambda: f64,
    /// Divide the region-suppressed loss by the retained-position count.
    pub rs_normalized: bool,
    pub loss: LossConfig,
    /// Term routing for the supervised pre-training stage. Sizes are
    /// regressed here: scale filtering only guards the adaptation stage.
    pub pretrain_terms: BTreeSet<LossTerm>,
    pub optim: OptimConfig,
    pub pretrain_epochs: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub bank: BankConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::small(16, 16.0),
            ros: RosConfig::default(),
            phi: 0.2,
            suppression: Suppression::FrsTopK { k: 0.2 },
            grl_lambda: 1.0,
            rs_normalized: true,
            loss: LossConfig::default(),
            pretrain_terms: BTreeSet::from([
                LossTerm::Cls,
                LossTerm::Reg,
                LossTerm::Iou,
                LossTerm::Dir,
            ]),
            optim: OptimConfig::default(),
            pretrain_epochs: 12,
            rounds: 3,
            epochs_per_round: 4,
            bank: BankConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(ConfigError::Invalid(format!(
                "phi must be in [0, 1], got {}",
                self.phi
            )));
        }
        self.suppression.validate()?;
        if self.grl_lambda < 0.0 {
            return Err(ConfigError::Invalid("grl_lambda must be nonnegative".into()));
        }
        self.loss.validate()?;
        self.ros.range.validate()?;
        if self.eval.iou_thresholds.len() != self.detector.num_classes() {
            return Err(ConfigError::Invalid(format!(
                "{} eval thresholds for {} classes",
                self.eval.iou_thresholds.len(),
                self.detector.num_classes()
            )));
        }
        for t in &self.eval.iou_thresholds {
            if !(*t > 0.0 && *t <= 1.0) {
                return Err(ConfigError::Invalid(format!(
                    "eval IoU thresholds must lie in (0, 1], got {t}"
                )));
            }
        }
        if self.optim.lr <= 0.0 {
            return Err(ConfigError::Invalid("learning rate must be positive".into()));
        }
        if self.pretrain_terms.contains(&LossTerm::Reg)
            && self.pretrain_terms.contains(&LossTerm::RegFiltered)
        {
            return Err(ConfigError::Invalid(
                "pretrain routing cannot contain both reg and reg_filtered".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&body).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let body = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, body).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.phi, 0.2);
        assert_eq!(cfg.optim.lr, 1.5e-3);
        assert_eq!(cfg.eval.iou_thresholds, vec![0.7, 0.5, 0.5]);
        assert!(matches!(cfg.suppression, Suppression::FrsTopK { k } if k == 0.2));

        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"phi": 0.5, "rounds": 1}"#).unwrap();
        assert_eq!(cfg.phi, 0.5);
        assert_eq!(cfg.rounds, 1);
        assert_eq!(cfg.epochs_per_round, RunConfig::default().epochs_per_round);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = RunConfig::default();
        cfg.phi = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.suppression = Suppression::FrsTopK { k: 0.0 };
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.eval.iou_thresholds = vec![0.7];
        assert!(cfg.validate().is_err());
    }
}
