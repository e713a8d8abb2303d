//! Background-suppressed adversarial feature alignment.
//!
//! A per-position domain discriminator sits behind a gradient reversal
//! layer on the detector's feature map; its binary cross-entropy map is
//! weighted by a feature-richness score that keeps only the top-k%
//! positions (foreground-dominated regions), or alternatively by a
//! channel-attention map.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamLeaves, ParamStore, Tape, Tensor, TensorId};
use crate::error::{AutogradError, ConfigError};
use crate::rng::{stream, RngSampling};

/// Which weighting the region-suppressed loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Suppression {
    /// Keep feature-richness scores in the top `k` fraction, zero the rest.
    FrsTopK { k: f64 },
    /// `1 + beta * mean(|F|)` channel attention.
    ChannelAttention { beta: f64 },
    /// Uniform weights (plain adversarial loss).
    None,
}

impl Suppression {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            Suppression::FrsTopK { k } => {
                if !(*k > 0.0 && *k <= 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "suppression fraction k must be in (0, 1], got {k}"
                    )));
                }
            }
            Suppression::ChannelAttention { beta } => {
                if *beta < 0.0 {
                    return Err(ConfigError::Invalid(format!(
                        "channel attention beta must be nonnegative, got {beta}"
                    )));
                }
            }
            Suppression::None => {}
        }
        Ok(())
    }
}

/// Feature richness: per position, the maximum sigmoid classification
/// score over all `C * N_dir` anchor channels. Computed on detached
/// logits so the weighting itself carries no gradient.
pub fn frs_map(cls_logits: &Tensor) -> Tensor {
    let shape = cls_logits.shape();
    assert_eq!(shape.len(), 3, "expected an (H, W, K) logits map");
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w);
    for chunk in cls_logits.data().chunks_exact(k) {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(sigmoid(m));
    }
    Tensor::new(vec![h, w], out)
}

/// Zero every position outside the top `ceil(k * H * W)` scores. Ties at
/// the cutoff resolve by row-major position order (lower index wins).
pub fn region_partition(s: &Tensor, k: f64) -> Result<Tensor, ConfigError> {
    Suppression::FrsTopK { k }.validate()?;
    let n = s.numel();
    let keep = (k * n as f64).ceil() as usize;
    let keep = keep.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        s.data()[b]
            .partial_cmp(&s.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in order.iter().take(keep) {
        out[i] = s.data()[i];
    }
    Ok(Tensor::new(s.shape().to_vec(), out))
}

/// Channel attention weights `1 + beta * mean_d |F|` per position.
pub fn ca_map(features: &Tensor, beta: f64) -> Tensor {
    let shape = features.shape();
    assert_eq!(shape.len(), 3, "expected an (H, W, d) feature map");
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(h * w);
    for chunk in features.data().chunks_exact(d) {
        let mean_abs = chunk.iter().map(|v| v.abs()).sum::<f64>() / d as f64;
        out.push(1.0 + beta * mean_abs);
    }
    Tensor::new(vec![h, w], out)
}

/// Side of the domain game a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSide {
    Source,
    Target,
}

pub const DISC_PARAMS: [&str; 4] = [
    "disc.fc1.weight",
    "disc.fc1.bias",
    "disc.fc2.weight",
    "disc.fc2.bias",
];

/// Initialize the two-layer 1x1-conv discriminator mapping a feature
/// vector to the probability it came from the source domain.
pub fn init_discriminator_params(store: &mut ParamStore, channels: usize, seed: u64) {
    let hidden = (channels / 2).max(1);
    let dims = [(channels, hidden), (hidden, 1)];
    for (i, (cin, cout)) in dims.into_iter().enumerate() {
        let mut rng = stream(&[seed, 0xd15c, i as u64]);
        let limit = (6.0 / cin as f64).sqrt();
        let w: Vec<f64> = (0..cin * cout).map(|_| rng.uniform(-limit, limit)).collect();
        store.add(DISC_PARAMS[i * 2], Tensor::new(vec![1, 1, cin, cout], w));
        store.add(DISC_PARAMS[i * 2 + 1], Tensor::new(vec![cout], vec![0.0; cout]));
    }
}

/// Forward the feature map through the gradient reversal layer and the
/// discriminator, returning the `(H, W)` map of source probabilities.
pub fn discriminator_forward(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    features: TensorId,
    grl_lambda: f64,
) -> Result<TensorId, AutogradError> {
    let reversed = tape.grl(features, grl_lambda);
    let w1 = leaves.id(DISC_PARAMS[0]);
    let b1 = leaves.id(DISC_PARAMS[1]);
    let w2 = leaves.id(DISC_PARAMS[2]);
    let b2 = leaves.id(DISC_PARAMS[3]);
    let x = tape.conv2d(reversed, w1, 0)?;
    let x = tape.bias_add(x, b1)?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, w2, 0)?;
    let x = tape.bias_add(x, b2)?;
    let probs = tape.sigmoid(x);
    let shape = tape.shape(probs).to_vec();
    tape.reshape(probs, shape[..2].to_vec())
}

const PROB_CLAMP: f64 = 1e-7;

/// Per-position binary cross-entropy of the domain game: `-log D` for
/// source samples, `-log(1 - D)` for target samples.
pub fn adv_loss_map(
    tape: &mut Tape,
    d_out: TensorId,
    side: DomainSide,
) -> Result<TensorId, AutogradError> {
    let clamped = tape.clamp(d_out, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let p = match side {
        DomainSide::Source => clamped,
        DomainSide::Target => {
            let shape = tape.shape(clamped).to_vec();
            let ones = tape.constant(Tensor::full(shape, 1.0));
            tape.sub(ones, clamped)?
        }
    };
    let logp = tape.log(p);
    Ok(tape.scale(logp, -1.0))
}

/// Region-suppressed scalar loss: the weighted sum of the adversarial map
/// over positions, by default normalized by the number of retained
/// (nonzero-weight) positions.
pub fn rs_loss(
    tape: &mut Tape,
    weights: &Tensor,
    adv_map: TensorId,
    normalize: bool,
) -> Result<TensorId, AutogradError> {
    if weights.shape() != tape.shape(adv_map) {
        return Err(AutogradError::ShapeMismatch {
            op: "rs_loss",
            lhs: weights.shape().to_vec(),
            rhs: tape.shape(adv_map).to_vec(),
        });
    }
    let retained = weights.data().iter().filter(|v| **v != 0.0).count();
    if retained == 0 {
        return Ok(tape.scalar(0.0));
    }
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(w, adv_map)?;
    let total = tape.reduce_sum(weighted);
    if normalize {
        Ok(tape.scale(total, 1.0 / retained as f64))
    } else {
        Ok(total)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
