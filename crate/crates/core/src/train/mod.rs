//! Joint early-exit objective, optimizer, schedule and the training loop.

mod trainer;

pub use trainer::{
    checkpoint_path, load_prepared, train, utterance_step, validation_losses, Prepared, TrainError,
    TrainOptions, TrainSummary, UtteranceStep, METRICS_FILE, VALIDATION_FILE,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_loss_value, CtcError, LogProbLattice};
use crate::data::Manifest;
use crate::model::{Checkpoint, CheckpointError, OptimizerSnapshot};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` uses the number of batches per epoch.
    pub warmup_steps: Option<usize>,
    /// Multiplier on the schedule.
    pub lr_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub max_transcript_chars: usize,
    pub average_last_k: usize,
    pub seed: u64,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 70,
            warmup_steps: None,
            lr_factor: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            dropout: 0.1,
            max_transcript_chars: 600,
            average_last_k: 20,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.average_last_k == 0 || self.average_last_k > self.epochs {
            bad.push(format!("average_last_k {} must be in 1..=epochs {}", self.average_last_k, self.epochs));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.warmup_steps == Some(0) {
            bad.push("warmup_steps must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join("; "))
        }
    }
}

/// `d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`, `step ≥ 1`.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Sum of per-exit CTC losses of one utterance. Returns the loss node, each
/// exit's value, and whether the target fits the lattice length.
pub fn ee_loss<T: Scalar>(g: &mut Graph<T>, lattices: &[Var], target: &[usize]) -> Result<(Var, Vec<f64>, bool), CtcError> {
    assert!(!lattices.is_empty(), "at least one exit");
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(lattices.len());
    let mut feasible = true;
    for &l in lattices {
        let (loss, ok) = ctc_loss(g, l, target)?;
        feasible &= ok;
        values.push(g.value(loss).item().as_f64());
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    Ok((total.expect("non-empty"), values, feasible))
}

/// Value-only joint loss over finished lattices.
pub fn ee_loss_value<T: Scalar>(lattices: &[LogProbLattice<T>], target: &[usize]) -> Result<f64, CtcError> {
    lattices.iter().map(|l| ctc_loss_value(l, target)).sum()
}

/// Adam moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

impl OptimizerState<f32> {
    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: &OptimizerSnapshot) -> Self {
        Self {
            step: s.step,
            m: s.m.clone(),
            v: s.v.clone(),
        }
    }
}

/// One bias-corrected Adam update, elementwise in 64-bit.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[Vec<T>], state: &mut OptimizerState<T>, lr: f64, cfg: AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        assert_eq!(p.len(), grads[i].len(), "gradient shape mismatch for parameter {i}");
        for j in 0..p.len() {
            let g = grads[i][j].as_f64();
            let m = cfg.beta1 * state.m[i][j].as_f64() + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * state.v[i][j].as_f64() + (1.0 - cfg.beta2) * g * g;
            state.m[i][j] = T::from_f64_lossy(m);
            state.v[i][j] = T::from_f64_lossy(v);
            let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            p[j] = T::from_f64_lossy(p[j].as_f64() - update);
        }
    }
}

/// Drops utterances whose transcript is longer than `max_chars` characters.
/// Returns the kept manifest and the number dropped.
pub fn filter_corpus(manifest: &Manifest, max_chars: usize) -> (Manifest, usize) {
    let mut kept = Manifest::new(manifest.root.clone());
    kept.records = manifest
        .records
        .iter()
        .filter(|r| r.transcript.chars().count() <= max_chars)
        .cloned()
        .collect();
    let dropped = manifest.len() - kept.len();
    (kept, dropped)
}

#[derive(Debug, thiserror::Error)]
pub enum AverageError {
    #[error("no checkpoints to average")]
    Empty,
    #[error("checkpoint {0} has a different model config")]
    ConfigMismatch(usize),
    #[error("checkpoint {index}: parameter {name} does not match")]
    ParamMismatch { index: usize, name: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Elementwise mean of the parameter sets. Values are sorted before a 64-bit
/// summation, so the result does not depend on the order of `checkpoints`.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint, AverageError> {
    let first = checkpoints.first().ok_or(AverageError::Empty)?;
    for (i, c) in checkpoints.iter().enumerate() {
        if c.config != first.config {
            return Err(AverageError::ConfigMismatch(i));
        }
        if c.tensors.len() != first.tensors.len() {
            return Err(AverageError::ParamMismatch {
                index: i,
                name: "<count>".into(),
            });
        }
        for ((n, t), (n0, t0)) in c.tensors.iter().zip(&first.tensors) {
            if n != n0 || t.shape() != t0.shape() {
                return Err(AverageError::ParamMismatch { index: i, name: n.clone() });
            }
        }
    }
    let k = checkpoints.len() as f64;
    let mut out = first.clone();
    out.optimizer = None;
    out.step = checkpoints.iter().map(|c| c.step).max().unwrap_or(0);
    out.epoch = checkpoints.iter().map(|c| c.epoch).max().unwrap_or(0);
    let mut column = Vec::with_capacity(checkpoints.len());
    for (p, (_, tensor)) in out.tensors.iter_mut().enumerate() {
        for (j, slot) in tensor.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(checkpoints.iter().map(|c| c.tensors[p].1.data()[j]));
            column.sort_by(f32::total_cmp);
            *slot = (column.iter().map(|&v| v as f64).sum::<f64>() / k) as f32;
        }
    }
    Ok(out)
}

pub fn average_checkpoint_files(paths: &[&Path]) -> Result<Checkpoint, AverageError> {
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>()?;
    average_checkpoints(&cks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::model::{Model, ModelConfig, Variant};
    use crate::tensor::Tensor;

    #[test]
    fn noam_knee_and_monotone() {
        let w = 17_580;
        let at = noam_lr(w, w, 256);
        assert_eq!(at, (256f64).powf(-0.5) * (w as f64).powf(-0.5));
        assert!((at - 4.71e-4).abs() < 5e-7);
        assert!(noam_lr(w - 1, w, 256) < at && noam_lr(w + 1, w, 256) < at);
        assert!(noam_lr(10, 100, 64) < noam_lr(11, 100, 64));
        assert!(noam_lr(200, 100, 64) > noam_lr(201, 100, 64));
    }

    #[test]
    fn adam_two_hand_steps() {
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        };
        let mut p = [1.0f64];
        let mut s = OptimizerState::<f64>::new([1]);
        adam_step(&mut [&mut p[..]], &[vec![0.5]], &mut s, 0.1, cfg);
        // m = 0.05, v = 0.005; m̂ = 0.5, v̂ = 0.25 -> step 0.1 * 0.5 / (0.5 + 1e-9)
        let p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-9);
        assert_eq!(p[0], p1);
        adam_step(&mut [&mut p[..]], &[vec![-1.0]], &mut s, 0.1, cfg);
        let m1 = (1.0 - 0.9) * 0.5;
        let v1 = (1.0 - 0.98) * 0.25;
        let m2 = 0.9 * m1 + -(1.0 - 0.9);
        let v2 = 0.98 * v1 + (1.0 - 0.98) * 1.0;
        let want = p1 - 0.1 * (m2 / (1.0 - 0.9f64 * 0.9)) / ((v2 / (1.0 - 0.98f64 * 0.98)).sqrt() + 1e-9);
        assert_eq!(p[0], want);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn adam_zero_gradient_and_sign_limit() {
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        };
        let mut p = vec![0.3f64, -0.2];
        let mut s = OptimizerState::<f64>::new([2]);
        adam_step(&mut [&mut p[..]], &[vec![0.0, 0.0]], &mut s, 1.0, cfg);
        assert_eq!(p, vec![0.3, -0.2]);
        for _ in 0..500 {
            let before = p.clone();
            adam_step(&mut [&mut p[..]], &[vec![3.0, -0.01]], &mut s, 1e-3, cfg);
            let d0 = p[0] - before[0];
            let d1 = p[1] - before[1];
            if s.step > 400 {
                assert!((d0 + 1e-3).abs() < 2e-5 && (d1 - 1e-3).abs() < 2e-5, "{d0} {d1}");
            }
        }
    }

    #[test]
    fn filter_boundary() {
        let mut m = Manifest::new(".");
        for (i, n) in [600, 601, 3].iter().enumerate() {
            m.records.push(Record {
                id: format!("u{i}"),
                path: "x".into(),
                transcript: "a".repeat(*n),
            });
        }
        let (kept, dropped) = filter_corpus(&m, 600);
        assert_eq!(dropped, 1);
        assert_eq!(kept.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["u0", "u2"]);
        assert_eq!(filter_corpus(&Manifest::new("."), 600).0.len(), 0);
    }

    fn tiny_ck(fill: f32) -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            conv_kernel: 3,
            ..ModelConfig::toy(Variant::EeBaseline, 4)
        };
        let mut m = Model::<f32>::build(cfg, 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.tensor.data_mut().iter_mut().for_each(|v| *v = fill));
        Checkpoint::from_model(&m, 0, 0)
    }

    #[test]
    fn averaging() {
        let a = tiny_ck(0.0);
        let b = tiny_ck(2.0);
        let avg = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        assert!(avg.tensors.iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
        let real = Checkpoint::from_model(&Model::build(a.config.clone(), 5).unwrap(), 3, 3);
        let same = average_checkpoints(&[real.clone(), real.clone(), real.clone()]).unwrap();
        assert_eq!(same.tensors, real.tensors);
        let mut other = tiny_ck(0.0);
        other.config.conv_kernel = 5;
        assert!(matches!(average_checkpoints(&[a, other]), Err(AverageError::ConfigMismatch(1))));
    }

    #[test]
    fn joint_loss_is_sum_of_exit_losses() {
        let lattice = Tensor::from_fn(&[6, 4], |i| ((i * 37) % 11) as f64 * 0.1);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(lattice, true);
        let lp = g.log_softmax(x).unwrap();
        let (single, v1, _) = ee_loss(&mut g, &[lp], &[1, 2]).unwrap();
        let (triple, v3, ok) = ee_loss(&mut g, &[lp, lp, lp], &[1, 2]).unwrap();
        assert!(ok);
        assert_eq!(v3, vec![v1[0]; 3]);
        let s = g.value(single).item();
        let t = g.value(triple).item();
        assert!((t - 3.0 * s).abs() <= 1e-12 * t.abs());
    }
}
