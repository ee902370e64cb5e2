//! Encoder building blocks: convolutional frontend, sinusoidal positions,
//! the macaron conformer layer, parameter-free temporal down/upsampling and
//! the linear-softmax exit decoders.

mod params;

pub use params::{Forward, Init, Param, ParamId, ParamStore, Registry};

use serde::{Deserialize, Serialize};

use crate::tensor::{sinusoidal_table, Scalar, TensorError, Var};

/// Acoustic feature dimension accepted by the frontend.
pub const FEATURE_DIM: usize = 80;

const NORM_EPS: f64 = 1e-5;

/// Normalization inside the conformer convolution module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformerLayerParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub conv_norm: NormKind,
}

impl ConformerLayerParams {
    /// Exact learned-parameter count of one layer.
    pub fn param_count(&self) -> usize {
        let (d, f, k) = (self.d_model, self.d_ff, self.conv_kernel);
        let norm = 2 * d;
        let feed_forward = norm + (d * f + f) + (f * d + d);
        let attention = norm + 4 * (d * d + d);
        let conv = norm + (d * 2 * d + 2 * d) + (d * k + d) + norm + (d * d + d);
        2 * feed_forward + attention + conv + norm
    }
}

pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: reg.register(&format!("{name}.weight"), &[d_in, d_out], Init::Uniform { fan_in: d_in }),
            b: reg.register(&format!("{name}.bias"), &[d_out], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.graph.matmul(x, w)?;
        f.graph.add(y, b)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

pub struct Norm {
    kind: NormKind,
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, d: usize, kind: NormKind) -> Self {
        Self {
            kind,
            gain: reg.register(&format!("{name}.gain"), &[d], Init::Ones),
            bias: reg.register(&format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (f.p(self.gain), f.p(self.bias));
        let eps = T::from_f64_lossy(NORM_EPS);
        match self.kind {
            NormKind::LayerNorm => f.graph.layer_norm(x, g, b, eps),
            NormKind::BatchNorm => f.graph.batch_norm_1d(x, g, b, eps),
        }
    }
}

struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, p: &ConformerLayerParams) -> Self {
        Self {
            norm: Norm::new(reg, &format!("{name}.norm"), p.d_model, NormKind::LayerNorm),
            up: Linear::new(reg, &format!("{name}.up"), p.d_model, p.d_ff),
            down: Linear::new(reg, &format!("{name}.down"), p.d_ff, p.d_model),
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.norm.forward(f, x)?;
        let h = self.up.forward(f, h)?;
        let h = f.graph.swish(h);
        self.down.forward(f, h)
    }
}

struct SelfAttention {
    norm: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, p: &ConformerLayerParams) -> Self {
        let d = p.d_model;
        Self {
            norm: Norm::new(reg, &format!("{name}.norm"), d, NormKind::LayerNorm),
            query: Linear::new(reg, &format!("{name}.query"), d, d),
            key: Linear::new(reg, &format!("{name}.key"), d, d),
            value: Linear::new(reg, &format!("{name}.value"), d, d),
            out: Linear::new(reg, &format!("{name}.out"), d, d),
            heads: p.n_heads,
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let (t, d) = (f.graph.shape(x)[0], f.graph.shape(x)[1]);
        let dk = d / self.heads;
        let h = self.norm.forward(f, x)?;
        let split = |f: &mut Forward<T>, lin: &Linear, axes: &[usize]| -> Result<Var, TensorError> {
            let y = lin.forward(f, h)?;
            let y = f.graph.reshape(y, &[t, self.heads, dk])?;
            f.graph.permute(y, axes)
        };
        let q = split(f, &self.query, &[1, 0, 2])?;
        let k = split(f, &self.key, &[1, 2, 0])?;
        let v = split(f, &self.value, &[1, 0, 2])?;
        let scores = f.graph.matmul(q, k)?;
        let scores = f.graph.scale(scores, T::from_f64_lossy(1.0 / (dk as f64).sqrt()));
        let weights = f.graph.softmax(scores)?;
        let ctx = f.graph.matmul(weights, v)?;
        let ctx = f.graph.permute(ctx, &[1, 0, 2])?;
        let ctx = f.graph.reshape(ctx, &[t, d])?;
        self.out.forward(f, ctx)
    }
}

struct ConvModule {
    norm: Norm,
    pointwise_in: Linear,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    inner_norm: Norm,
    pointwise_out: Linear,
    kernel: usize,
}

impl ConvModule {
    fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, p: &ConformerLayerParams) -> Self {
        let d = p.d_model;
        Self {
            norm: Norm::new(reg, &format!("{name}.norm"), d, NormKind::LayerNorm),
            pointwise_in: Linear::new(reg, &format!("{name}.pointwise_in"), d, 2 * d),
            depthwise_w: reg.register(
                &format!("{name}.depthwise.weight"),
                &[d, p.conv_kernel],
                Init::Uniform { fan_in: p.conv_kernel },
            ),
            depthwise_b: reg.register(&format!("{name}.depthwise.bias"), &[d], Init::Zeros),
            inner_norm: Norm::new(reg, &format!("{name}.inner_norm"), d, p.conv_norm),
            pointwise_out: Linear::new(reg, &format!("{name}.pointwise_out"), d, d),
            kernel: p.conv_kernel,
        }
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.norm.forward(f, x)?;
        let h = self.pointwise_in.forward(f, h)?;
        let h = f.graph.glu(h)?;
        let (w, b) = (f.p(self.depthwise_w), f.p(self.depthwise_b));
        let h = f.graph.depthwise_conv1d(h, w, b, (self.kernel - 1) / 2)?;
        let h = self.inner_norm.forward(f, h)?;
        let h = f.graph.swish(h);
        self.pointwise_out.forward(f, h)
    }
}

/// Macaron conformer layer: half-step feed-forward, self-attention,
/// convolution module, half-step feed-forward, final layer norm.
pub struct ConformerLayer {
    ff1: FeedForward,
    attention: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: Norm,
}

impl ConformerLayer {
    pub fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, p: &ConformerLayerParams) -> Self {
        Self {
            ff1: FeedForward::new(reg, &format!("{name}.ff1"), p),
            attention: SelfAttention::new(reg, &format!("{name}.attn"), p),
            conv: ConvModule::new(reg, &format!("{name}.conv"), p),
            ff2: FeedForward::new(reg, &format!("{name}.ff2"), p),
            final_norm: Norm::new(reg, &format!("{name}.final_norm"), p.d_model, NormKind::LayerNorm),
        }
    }

    fn residual<T: Scalar>(f: &mut Forward<T>, x: Var, branch: Var, weight: f64) -> Result<Var, TensorError> {
        let h = f.dropout(branch);
        let h = if weight == 1.0 {
            h
        } else {
            f.graph.scale(h, T::from_f64_lossy(weight))
        };
        f.graph.add(x, h)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.ff1.forward(f, x)?;
        let x = Self::residual(f, x, h, 0.5)?;
        let h = self.attention.forward(f, x)?;
        let x = Self::residual(f, x, h, 1.0)?;
        let h = self.conv.forward(f, x)?;
        let x = Self::residual(f, x, h, 1.0)?;
        let h = self.ff2.forward(f, x)?;
        let x = Self::residual(f, x, h, 0.5)?;
        self.final_norm.forward(f, x)
    }

    /// Output projections of the four residual branches.
    pub fn branch_outputs(&self) -> [&Linear; 4] {
        [&self.ff1.down, &self.attention.out, &self.conv.pointwise_out, &self.ff2.down]
    }
}

/// Stride-2 convolution (kernel 3, padding 1) from 80 features to the model
/// width, followed by swish: `[T × 80] → [ceil(T/2) × d]`.
pub struct Frontend {
    w: ParamId,
    b: ParamId,
}

impl Frontend {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;

    pub fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, d_model: usize) -> Self {
        Self {
            w: reg.register(
                &format!("{name}.weight"),
                &[d_model, FEATURE_DIM, Self::KERNEL],
                Init::Uniform {
                    fan_in: FEATURE_DIM * Self::KERNEL,
                },
            ),
            b: reg.register(&format!("{name}.bias"), &[d_model], Init::Zeros),
        }
    }

    pub fn param_count(d_model: usize) -> usize {
        d_model * FEATURE_DIM * Self::KERNEL + d_model
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
        match f.graph.shape(x) {
            [t, FEATURE_DIM] if *t > 0 => {}
            s => {
                return Err(TensorError::Shape {
                    op: "conv_frontend",
                    detail: format!("expected [T x {FEATURE_DIM}] with T >= 1, got {s:?}"),
                })
            }
        }
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.graph.conv1d(x, w, b, Self::STRIDE, 1)?;
        Ok(f.graph.swish(y))
    }
}

/// Frontend output length for `frames` input frames.
pub fn frontend_frames(frames: usize) -> usize {
    frames.div_ceil(Frontend::STRIDE)
}

/// Adds the sinusoidal position table to a `[T × d]` sequence.
pub fn add_positions<T: Scalar>(f: &mut Forward<T>, x: Var) -> Result<Var, TensorError> {
    let (t, d) = (f.graph.shape(x)[0], f.graph.shape(x)[1]);
    let pe = f.graph.constant(sinusoidal_table(t, d));
    f.graph.add(x, pe)
}

/// Linear map to `V+1` classes followed by a per-frame log-softmax.
pub struct ExitDecoder {
    proj: Linear,
}

impl ExitDecoder {
    pub fn new<T: Scalar>(reg: &mut Registry<T>, name: &str, d_model: usize, classes: usize) -> Self {
        Self {
            proj: Linear::new(reg, &format!("{name}.proj"), d_model, classes),
        }
    }

    pub fn param_count(d_model: usize, classes: usize) -> usize {
        d_model * classes + classes
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, h: Var) -> Result<Var, TensorError> {
        let logits = self.proj.forward(f, h)?;
        f.graph.log_softmax(logits)
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }
}

/// Non-overlapping mean over `factor` frames; a partial final group repeats
/// the last frame. `factor == 1` is the identity.
pub fn downsample<T: Scalar>(f: &mut Forward<T>, x: Var, factor: usize) -> Result<Var, TensorError> {
    if factor == 1 {
        return Ok(x);
    }
    f.graph.mean_pool_frames(x, factor)
}

/// Repeats every frame `factor` times and truncates to `target` frames.
pub fn upsample<T: Scalar>(f: &mut Forward<T>, x: Var, factor: usize, target: usize) -> Result<Var, TensorError> {
    if factor == 1 && f.graph.shape(x).first() == Some(&target) {
        return Ok(x);
    }
    f.graph.repeat_frames(x, factor, target)
}
