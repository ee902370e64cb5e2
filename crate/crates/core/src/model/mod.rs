//! The four encoder variants and their per-exit forward passes.
//!
//! * `conformer_baseline`: frontend, positions, a stack of conformer layers,
//!   one decoder.
//! * `unet_modified`: a two-layer stem followed by residual blocks that run
//!   their layers between a downsample and an upsample.
//! * `ee_baseline`: the stack cut into blocks with an exit decoder after each.
//! * `splitformer`: `ee_baseline` where selected blocks also run a parallel
//!   layer on a downsampled copy of the block input; the upsampled result is
//!   summed into the block output before the exit decoder and the next block.
//!
//! Every parameter carries the index of the first exit that reads it, so the
//! size of the exit-`m` sub-network is a prefix sum over the store.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigError, ModelConfig, Variant};

use thiserror::Error;

use crate::ctc::LogProbLattice;
use crate::layers::{
    add_positions, downsample, frontend_frames, upsample, ConformerLayer, ExitDecoder, Forward,
    Frontend, ParamStore, Registry,
};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Frame rate after the frontend.
pub const EXIT_FRAME_RATE_HZ: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op} needs a {expected} model, this one is {got}")]
    VariantMismatch {
        op: &'static str,
        expected: &'static str,
        got: &'static str,
    },
    #[error("exit {exit} out of range 1..={exits}")]
    ExitOutOfRange { exit: usize, exits: usize },
    #[error("parameter set mismatch: {0}")]
    Parameters(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip the Splitformer parallel branches entirely.
    pub bypass_parallel: bool,
    /// Stop after this exit (1-based); later blocks are never evaluated.
    pub max_exit: Option<usize>,
}

/// Per-exit log-probability lattices of one utterance, all at 50 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs<T> {
    pub lattices: Vec<LogProbLattice<T>>,
    pub frame_rate_hz: f64,
}

struct ExitBlock {
    layers: Vec<ConformerLayer>,
    parallel: Option<ConformerLayer>,
    decoder: ExitDecoder,
}

struct UnetBlock {
    factor: usize,
    layers: Vec<ConformerLayer>,
}

enum Body {
    Exits(Vec<ExitBlock>),
    Single {
        layers: Vec<ConformerLayer>,
        decoder: ExitDecoder,
    },
    Unet {
        stem: Vec<ConformerLayer>,
        blocks: Vec<UnetBlock>,
        decoder: ExitDecoder,
    },
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    frontend: Frontend,
    body: Body,
}

fn run_layers<T: Scalar>(f: &mut Forward<T>, layers: &[ConformerLayer], mut x: Var) -> Result<Var, TensorError> {
    for layer in layers {
        x = layer.forward(f, x)?;
    }
    Ok(x)
}

/// Exact parameter count of the exit-`exit` sub-network (decoders at or
/// below that exit included), from the configuration alone.
pub fn analytic_param_count(config: &ModelConfig, exit: usize) -> usize {
    let layer = config.layer_params().param_count();
    let decoder = ExitDecoder::param_count(config.d_model, config.vocab_size);
    let frontend = Frontend::param_count(config.d_model);
    match config.variant {
        Variant::ConformerBaseline | Variant::UnetModified => frontend + config.n_layers * layer + decoder,
        Variant::EeBaseline | Variant::Splitformer => {
            let exit = exit.min(config.n_exits);
            let parallel = (1..=exit).filter(|&m| config.is_split_exit(m)).count();
            frontend + exit * (config.exit_every * layer + decoder) + parallel * layer
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Initial values depend only on the
    /// seed and parameter names, so shared trunk parameters of EE-baseline
    /// and Splitformer start identical.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let lp = config.layer_params();
        let mut params = ParamStore::new();
        let mut reg = Registry::new(&mut params, seed);
        let frontend = Frontend::new(&mut reg, "frontend.conv", config.d_model);
        let layer = |reg: &mut Registry<T>, i: usize| ConformerLayer::new(reg, &format!("layers.{i}"), &lp);
        let body = match config.variant {
            Variant::EeBaseline | Variant::Splitformer => {
                let mut blocks = Vec::with_capacity(config.n_exits);
                for m in 0..config.n_exits {
                    reg.exit = m + 1;
                    let layers = (0..config.exit_every)
                        .map(|j| layer(&mut reg, m * config.exit_every + j))
                        .collect();
                    let parallel = config
                        .is_split_exit(m + 1)
                        .then(|| ConformerLayer::new(&mut reg, &format!("parallel.{m}"), &lp));
                    let decoder = ExitDecoder::new(&mut reg, &format!("exits.{m}"), config.d_model, config.vocab_size);
                    blocks.push(ExitBlock {
                        layers,
                        parallel,
                        decoder,
                    });
                }
                Body::Exits(blocks)
            }
            Variant::ConformerBaseline => Body::Single {
                layers: (0..config.n_layers).map(|i| layer(&mut reg, i)).collect(),
                decoder: ExitDecoder::new(&mut reg, "exits.0", config.d_model, config.vocab_size),
            },
            Variant::UnetModified => {
                let stem = (0..config.unet_stem_layers).map(|i| layer(&mut reg, i)).collect();
                let mut next = config.unet_stem_layers;
                let mut blocks = Vec::new();
                for &factor in &config.unet_factors {
                    let layers = (0..config.unet_block_layers)
                        .map(|j| layer(&mut reg, next + j))
                        .collect();
                    next += config.unet_block_layers;
                    blocks.push(UnetBlock { factor, layers });
                }
                Body::Unet {
                    stem,
                    blocks,
                    decoder: ExitDecoder::new(&mut reg, "exits.0", config.d_model, config.vocab_size),
                }
            }
        };
        Ok(Self {
            config,
            params,
            frontend,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn exits(&self) -> usize {
        self.config.exits()
    }

    /// `|Θ_m|` by walking the registered tensors; `None` means the whole model.
    pub fn param_count(&self, exit: Option<usize>) -> usize {
        match exit {
            Some(m) => self.params.count_up_to(m),
            None => self.params.total(),
        }
    }

    /// Same architecture in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::build(self.config.clone(), 0).expect("config already validated");
        out.params = self.params.cast();
        out
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<(), ModelError> {
        if tensors.len() != self.params.len() {
            return Err(ModelError::Parameters(format!(
                "{} tensors supplied, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in tensors {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| ModelError::Parameters(format!("unknown parameter {name}")))?;
            let slot = &mut self.params.get_mut(id).tensor;
            if slot.shape() != tensor.shape() {
                return Err(ModelError::Parameters(format!(
                    "{name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }

    fn embed(&self, f: &mut Forward<T>, features: Var) -> Result<Var, TensorError> {
        let x = self.frontend.forward(f, features)?;
        add_positions(f, x)
    }

    /// Runs the encoder, calling `on_exit(m, lattice)` as each exit's lattice
    /// becomes available.
    pub fn forward_with(
        &self,
        f: &mut Forward<T>,
        features: Var,
        opts: &ForwardOptions,
        mut on_exit: impl FnMut(usize, Var),
    ) -> Result<(), ModelError> {
        let exits = self.exits();
        let last = opts.max_exit.unwrap_or(exits);
        if last == 0 || last > exits {
            return Err(ModelError::ExitOutOfRange { exit: last, exits });
        }
        let x = self.embed(f, features)?;
        match &self.body {
            Body::Exits(blocks) => {
                let mut x = x;
                for (m, block) in blocks.iter().enumerate().take(last) {
                    let input = x;
                    x = run_layers(f, &block.layers, input)?;
                    if let (Some(par), false) = (&block.parallel, opts.bypass_parallel) {
                        let frames = f.graph.shape(input)[0];
                        let k = self.config.split_factor;
                        let low = downsample(f, input, k)?;
                        let low = par.forward(f, low)?;
                        let up = upsample(f, low, k, frames)?;
                        x = f.graph.add(x, up)?;
                    }
                    on_exit(m + 1, block.decoder.forward(f, x)?);
                }
            }
            Body::Single { layers, decoder } => {
                let h = run_layers(f, layers, x)?;
                on_exit(1, decoder.forward(f, h)?);
            }
            Body::Unet { stem, blocks, decoder } => {
                let mut x = run_layers(f, stem, x)?;
                for block in blocks {
                    let frames = f.graph.shape(x)[0];
                    let low = downsample(f, x, block.factor)?;
                    let low = run_layers(f, &block.layers, low)?;
                    let up = upsample(f, low, block.factor, frames)?;
                    x = f.graph.add(x, up)?;
                }
                on_exit(1, decoder.forward(f, x)?);
            }
        }
        Ok(())
    }

    /// Lattice nodes for every evaluated exit, in exit order.
    pub fn forward(&self, f: &mut Forward<T>, features: Var, opts: &ForwardOptions) -> Result<Vec<Var>, ModelError> {
        let mut out = Vec::with_capacity(self.exits());
        self.forward_with(f, features, opts, |_, v| out.push(v))?;
        Ok(out)
    }

    /// Early-exit forward pass: one lattice per exit.
    pub fn forward_ee(&self, f: &mut Forward<T>, features: Var, opts: &ForwardOptions) -> Result<Vec<Var>, ModelError> {
        if !self.config.variant.is_early_exit() {
            return Err(ModelError::VariantMismatch {
                op: "forward_ee",
                expected: "ee_baseline or splitformer",
                got: self.config.variant.name(),
            });
        }
        self.forward(f, features, opts)
    }

    /// Single-exit forward pass.
    pub fn forward_single(&self, f: &mut Forward<T>, features: Var, opts: &ForwardOptions) -> Result<Var, ModelError> {
        if self.config.variant.is_early_exit() {
            return Err(ModelError::VariantMismatch {
                op: "forward_single",
                expected: "conformer_baseline or unet_modified",
                got: self.config.variant.name(),
            });
        }
        Ok(self.forward(f, features, opts)?[0])
    }

    /// Evaluation-mode pass over a `[T × 80]` feature matrix.
    pub fn infer(&self, features: &Tensor<T>, opts: &ForwardOptions) -> Result<ExitOutputs<T>, ModelError> {
        let mut graph = Graph::inference();
        let mut f = Forward::new(&mut graph, &self.params);
        let x = f.graph.constant(features.clone());
        let vars = self.forward(&mut f, x, opts)?;
        let lattices = vars
            .into_iter()
            .map(|v| LogProbLattice::new(graph.take_value(v)).map_err(|e| ModelError::Parameters(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(ExitOutputs {
            lattices,
            frame_rate_hz: EXIT_FRAME_RATE_HZ,
        })
    }

    /// Lattice length for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frontend_frames(frames)
    }
}
