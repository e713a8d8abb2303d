//! Named parameter storage with Adam updates and an optional one-cycle
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, TensorId};
use super::tensor::Tensor;
use crate::error::AutogradError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Ordered collection of named parameters plus Adam moment estimates.
/// Iteration order is insertion order, which keeps updates and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        let n = value.numel();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].value
    }

    /// Insert every parameter into a fresh tape as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamLeaves {
        let ids = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), tape.leaf(e.value.clone(), true)))
            .collect();
        ParamLeaves { ids }
    }

    /// One Adam step with bias correction. `grads[i]` must align with
    /// entry `i`; entries whose gradient is absent are left untouched.
    pub fn adam_step(
        &mut self,
        tape: &Tape,
        leaves: &ParamLeaves,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<(), AutogradError> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (entry, (name, id)) in self.entries.iter_mut().zip(&leaves.ids) {
            debug_assert_eq!(&entry.name, name);
            let grad = tape.grad(*id);
            if grad.is_empty() {
                continue;
            }
            for gv in grad {
                if !gv.is_finite() {
                    return Err(AutogradError::NonFinite {
                        context: format!("gradient of {}", entry.name),
                    });
                }
            }
            let data = entry.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * g;
                entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Ids of the parameter leaves on a particular tape, in store order.
pub struct ParamLeaves {
    ids: Vec<(String, TensorId)>,
}

impl ParamLeaves {
    pub fn from_pairs(ids: Vec<(String, TensorId)>) -> Self {
        Self { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unknown parameter leaf {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// One-cycle schedule: linear warmup to `max_lr`, cosine anneal down to
/// `max_lr / final_div`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1.5e-3,
            pct_start: 0.3,
            div_factor: 10.0,
            final_div: 100.0,
        }
    }
}

impl OneCycle {
    /// Learning rate at `step` of a run `total_steps` long.
    pub fn lr(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return self.max_lr;
        }
        let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
        let lo = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div;
        if t < self.pct_start {
            let u = t / self.pct_start;
            lo + (self.max_lr - lo) * u
        } else {
            let u = (t - self.pct_start) / (1.0 - self.pct_start);
            end + 0.5 * (self.max_lr - end) * (1.0 + (std::f64::consts::PI * u).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(store: &ParamStore) -> (Tape, ParamLeaves, TensorId) {
        // loss = sum(w^2)
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let w = leaves.id("w");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.reduce_sum(sq);
        (tape, leaves, loss)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let w = leaves.id("w");
        let zero = tape.scale(w, 0.0);
        let loss = tape.reduce_sum(zero);
        tape.backward(loss).unwrap();
        let before = store.get("w").data().to_vec();
        store
            .adam_step(&tape, &leaves, 0.1, &AdamConfig::default())
            .unwrap();
        assert_eq!(store.get("w").data(), &before[..]);
    }

    #[test]
    fn descends_on_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![1], vec![1.0]));
        let (mut tape, leaves, loss) = quadratic_grad(&store);
        tape.backward(loss).unwrap();
        store
            .adam_step(&tape, &leaves, 0.1, &AdamConfig::default())
            .unwrap();
        let w = store.get("w").data()[0];
        assert!(w < 1.0, "w should decrease, got {w}");
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With bias correction the first update is lr * g / (|g| + eps),
        // i.e. about lr regardless of gradient scale.
        for &scale in &[1e-4, 1.0, 1e4] {
            let mut store = ParamStore::new();
            store.add("w", Tensor::new(vec![1], vec![scale]));
            let (mut tape, leaves, loss) = quadratic_grad(&store);
            tape.backward(loss).unwrap();
            let lr = 0.05;
            store
                .adam_step(&tape, &leaves, lr, &AdamConfig::default())
                .unwrap();
            let moved = (store.get("w").data()[0] - scale).abs();
            assert!(
                (moved - lr).abs() < 1e-3 * lr,
                "first Adam step {moved} should be about {lr} at scale {scale}"
            );
        }
    }

    #[test]
    fn one_cycle_profile() {
        let sched = OneCycle {
            max_lr: 1.0,
            pct_start: 0.25,
            div_factor: 10.0,
            final_div: 100.0,
        };
        assert!((sched.lr(0, 100) - 0.1).abs() < 1e-12);
        assert!((sched.lr(25, 100) - 1.0).abs() < 1e-12);
        assert!(sched.lr(99, 100) < 0.05);
        // Monotone up then down.
        assert!(sched.lr(10, 100) > sched.lr(0, 100));
        assert!(sched.lr(80, 100) < sched.lr(30, 100));
    }
}
