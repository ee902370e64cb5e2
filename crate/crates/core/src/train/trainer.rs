use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::{adam_step, ee_loss, filter_corpus, noam_lr, AdamConfig, OptimizerState, TrainConfig};
use crate::ctc::{ctc_loss_value, CtcError};
use crate::data::{make_batches, DataError, Manifest, Vocabulary};
use crate::layers::Forward;
use crate::model::{Checkpoint, CheckpointError, ForwardOptions, Model, ModelError};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}, utterances {utterances:?}")]
    NonFinite { step: u64, utterances: Vec<String> },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A tokenized corpus held in memory.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub features: Vec<Tensor<f32>>,
    pub targets: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn frame_lengths(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.shape()[0]).collect()
    }
}

/// Filters by transcript length, tokenizes and loads every feature file.
/// Returns the corpus and the number of filtered utterances.
pub fn load_prepared(manifest: &Manifest, vocab: &Vocabulary, max_chars: usize) -> Result<(Prepared, usize), DataError> {
    let (kept, dropped) = filter_corpus(manifest, max_chars);
    let mut out = Prepared::default();
    for r in &kept.records {
        out.targets.push(vocab.tokenize(&r.transcript)?);
        out.features.push(manifest.load_features(r)?.frames);
        out.ids.push(r.id.clone());
    }
    Ok((out, dropped))
}

/// Loss and dense gradients of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceStep<T> {
    pub per_exit: Vec<f64>,
    pub feasible: bool,
    /// One entry per parameter; `None` when the parameter never entered the graph.
    pub grads: Vec<Option<Vec<T>>>,
}

/// Forward, joint loss and backward for a single utterance.
pub fn utterance_step<T: Scalar>(
    model: &Model<T>,
    features: &Tensor<T>,
    target: &[usize],
    dropout: f64,
    seed: u64,
) -> Result<UtteranceStep<T>, TrainError> {
    let mut graph = Graph::new();
    let mut f = Forward::new(&mut graph, model.params()).train_mode(dropout, seed);
    let x = f.graph.constant(features.clone());
    let lattices = model.forward(&mut f, x, &ForwardOptions::default())?;
    let (loss, per_exit, feasible) = ee_loss(f.graph, &lattices, target)?;
    let mut grads = vec![None; model.params().len()];
    if feasible {
        let g = f.graph.backward(loss)?;
        for (id, grad) in f.param_grads(&g) {
            grads[id.index()] = Some(grad.to_vec());
        }
    }
    Ok(UtteranceStep {
        per_exit,
        feasible,
        grads,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (counted from the start of
    /// training), as if the process had been interrupted.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_completed: usize,
    /// Mean joint loss of each epoch run by this call.
    pub epoch_means: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keeps the header and every row whose first column is `≤ keep`.
fn truncate_csv(path: &Path, keep: u64) -> Result<(), TrainError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let first = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if i == 0 || first.is_some_and(|v| v <= keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_at(path))
}

fn open_log(path: &Path, header: &str, resume_at: Option<u64>) -> Result<BufWriter<File>, TrainError> {
    match resume_at {
        Some(keep) if path.exists() => {
            truncate_csv(path, keep)?;
            let f = OpenOptions::new().append(true).open(path).map_err(io_at(path))?;
            Ok(BufWriter::new(f))
        }
        _ => {
            let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
            writeln!(w, "{header}").map_err(io_at(path))?;
            Ok(w)
        }
    }
}

/// Per-exit mean CTC loss over the feasible utterances, without dropout.
pub fn validation_losses(model: &Model<f32>, data: &Prepared) -> Result<Vec<f64>, TrainError> {
    let exits = model.exits();
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Option<Vec<f64>>, TrainError> {
            let out = model.infer(&data.features[i], &ForwardOptions::default())?;
            let losses = out
                .lattices
                .iter()
                .map(|l| ctc_loss_value(l, &data.targets[i]))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(losses.iter().all(|v| v.is_finite()).then_some(losses))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = vec![0.0; exits];
    let mut n = 0usize;
    for r in rows.into_iter().flatten() {
        sum.iter_mut().zip(&r).for_each(|(s, v)| *s += v);
        n += 1;
    }
    Ok(sum.into_iter().map(|s| s / n.max(1) as f64).collect())
}

/// Runs the training recipe, writing per-epoch checkpoints and the metrics
/// logs under `opts.out_dir`.
pub fn train(
    model: &mut Model<f32>,
    data: &Prepared,
    dev: Option<&Prepared>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainSummary, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if data.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let out = &opts.out_dir;
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(io_at(&ck_dir))?;

    let exits = model.exits();
    let lengths = data.frame_lengths();
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let warmup = cfg.warmup_steps.map_or(per_epoch, |w| w as u64);
    let adam = AdamConfig::from(cfg);
    let d_model = model.config().d_model;

    let mut state = OptimizerState::<f32>::new(model.params().iter().map(|(_, p)| p.tensor.numel()));
    let mut step = 0u64;
    let mut start_epoch = 0usize;
    if let Some(ck) = &opts.resume {
        if ck.config != *model.config() {
            return Err(TrainError::Config("resume checkpoint has a different model config".into()));
        }
        model.load_tensors(ck.tensors.clone())?;
        if let Some(o) = &ck.optimizer {
            state = OptimizerState::from_snapshot(o);
        }
        step = ck.step;
        start_epoch = ck.epoch as usize;
        info!("resuming after epoch {start_epoch}, step {step}");
    }
    let resume_at = opts.resume.as_ref().map(|c| (c.step, c.epoch));

    let exit_cols: String = (1..=exits).map(|m| format!(",per_exit_loss_{m}")).collect();
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = open_log(&metrics_path, &format!("step,epoch,lr,joint_loss{exit_cols}"), resume_at.map(|r| r.0))?;
    let val_path = out.join(VALIDATION_FILE);
    let val_cols: String = (1..=exits).map(|m| format!(",val_loss_{m}")).collect();
    let mut validation = dev
        .map(|_| open_log(&val_path, &format!("epoch,step{val_cols}"), resume_at.map(|r| r.1)))
        .transpose()?;

    let mut summary = TrainSummary {
        steps: step,
        epochs_completed: start_epoch,
        ..Default::default()
    };
    let last_epoch = opts.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start_epoch + 1..=last_epoch {
        let batches = make_batches(&lengths, cfg.batch_size, cfg.seed, epoch as u64);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for batch in batches {
            let next = step + 1;
            let model_ref: &Model<f32> = model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let seed = mix(cfg.seed, next, i as u64);
                    utterance_step(model_ref, &data.features[i], &data.targets[i], cfg.dropout, seed)
                })
                .collect::<Result<Vec<_>, _>>()?;

            let mut bad = Vec::new();
            let mut feasible = 0usize;
            for (&i, r) in batch.iter().zip(&results) {
                if !r.feasible {
                    warn!("utterance {} is shorter than its target; skipped", data.ids[i]);
                    continue;
                }
                feasible += 1;
                let grads_finite = r.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
                if !grads_finite || r.per_exit.iter().any(|v| !v.is_finite()) {
                    bad.push(data.ids[i].clone());
                }
            }
            if !bad.is_empty() {
                metrics.flush().map_err(io_at(&metrics_path))?;
                return Err(TrainError::NonFinite { step: next, utterances: bad });
            }
            if feasible == 0 {
                warn!("batch without feasible utterances skipped");
                continue;
            }

            let scale = 1.0 / feasible as f64;
            let mut grads: Vec<Vec<f32>> = state.m.iter().map(|m| vec![0.0; m.len()]).collect();
            let mut per_exit = vec![0.0; exits];
            let mut acc: Vec<Vec<f64>> = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            for r in results.iter().filter(|r| r.feasible) {
                per_exit.iter_mut().zip(&r.per_exit).for_each(|(s, v)| *s += v * scale);
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        a.iter_mut().zip(g).for_each(|(a, &v)| *a += v as f64);
                    }
                }
            }
            let mut norm2 = 0.0;
            for (g, a) in grads.iter_mut().zip(&acc) {
                for (g, &a) in g.iter_mut().zip(a) {
                    let v = a * scale;
                    norm2 += v * v;
                    *g = v as f32;
                }
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = norm2.sqrt();
                if norm > clip {
                    let c = (clip / norm) as f32;
                    grads.iter_mut().flatten().for_each(|g| *g *= c);
                }
            }

            step = next;
            let lr = cfg.lr_factor * noam_lr(step, warmup, d_model);
            {
                let mut slices: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
                adam_step(&mut slices, &grads, &mut state, lr, adam);
            }
            let joint: f64 = per_exit.iter().sum();
            let cols: String = per_exit.iter().map(|v| format!(",{v}")).collect();
            writeln!(metrics, "{step},{epoch},{lr},{joint}{cols}").map_err(io_at(&metrics_path))?;
            epoch_sum += joint;
            epoch_steps += 1;
        }
        metrics.flush().map_err(io_at(&metrics_path))?;
        let mean = epoch_sum / epoch_steps.max(1) as f64;
        summary.epoch_means.push(mean);
        info!("epoch {epoch}: step {step}, mean joint loss {mean:.4}");

        if let (Some(dev), Some(w)) = (dev, validation.as_mut()) {
            let losses = validation_losses(model, dev)?;
            let cols: String = losses.iter().map(|v| format!(",{v}")).collect();
            writeln!(w, "{epoch},{step}{cols}").map_err(io_at(&val_path))?;
            w.flush().map_err(io_at(&val_path))?;
            info!("epoch {epoch}: validation {losses:.4?}");
        }

        let mut ck = Checkpoint::from_model(model, step, epoch as u64);
        ck.optimizer = Some(state.snapshot());
        let path = ck_dir.join(format!("epoch_{epoch:04}.ckpt"));
        ck.save(&path)?;
        summary.checkpoints.push(path);
        summary.epochs_completed = epoch;
        summary.steps = step;
    }
    Ok(summary)
}

/// Checkpoint path of a completed epoch.
pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}
