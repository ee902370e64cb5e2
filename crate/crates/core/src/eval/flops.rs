//! Analytic FLOP accounting.
//!
//! Convention: a multiply-add is 2 FLOPs, so an `[m × k]·[k × n]` product
//! costs `2mnk`; bias adds, residual adds, scalings and the copies of the
//! sampling operators cost 1 per element; softmax, log-softmax, layer/batch
//! norm and the swish/GLU nonlinearities cost 5 per element. `frames` is the
//! number of 100 Hz input frames; the encoder runs on `ceil(frames / 2)`.

use serde::Serialize;

use crate::layers::{frontend_frames, ConformerLayerParams, FEATURE_DIM};
use crate::model::{ModelConfig, Variant};

const NONLINEAR: u128 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsComponent {
    /// Exit whose sub-network first includes this component.
    pub exit: usize,
    pub name: String,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub frames: usize,
    pub components: Vec<FlopsComponent>,
    /// FLOPs needed to produce exit `m`'s lattice: the encoder up to block
    /// `m` plus decoder `m` (earlier decoders are not evaluated).
    pub per_exit: Vec<u128>,
}

impl FlopsReport {
    pub fn total(&self) -> u128 {
        self.components.iter().map(|c| c.flops).sum()
    }
}

fn affine(rows: usize, d_in: usize, d_out: usize) -> u128 {
    let (m, k, n) = (rows as u128, d_in as u128, d_out as u128);
    2 * m * k * n + m * n
}

fn elementwise(rows: usize, width: usize, cost: u128) -> u128 {
    rows as u128 * width as u128 * cost
}

/// Named primitive costs of one conformer layer over `len` frames.
pub fn layer_components(p: &ConformerLayerParams, len: usize) -> Vec<(&'static str, u128)> {
    let (d, ff, h, k) = (p.d_model, p.d_ff, p.n_heads, p.conv_kernel);
    let l = len as u128;
    let ffn = |tag| -> Vec<(&'static str, u128)> {
        vec![
            (tag, elementwise(len, d, NONLINEAR)),
            (tag, affine(len, d, ff)),
            (tag, elementwise(len, ff, NONLINEAR)),
            (tag, affine(len, ff, d)),
            (tag, elementwise(len, d, 1)),
            (tag, elementwise(len, d, 1)),
        ]
    };
    let mut out = ffn("ff1");
    let dk = (d / h) as u128;
    out.extend([
        ("attn", elementwise(len, d, NONLINEAR)),
        ("attn", 4 * affine(len, d, d)),
        ("attn", h as u128 * 2 * l * l * dk),
        ("attn", h as u128 * l * l),
        ("attn", h as u128 * l * l * NONLINEAR),
        ("attn", h as u128 * 2 * l * l * dk),
        ("attn", elementwise(len, d, 1)),
    ]);
    out.extend([
        ("conv", elementwise(len, d, NONLINEAR)),
        ("conv", affine(len, d, 2 * d)),
        ("conv", elementwise(len, d, NONLINEAR)),
        ("conv", 2 * l * d as u128 * k as u128 + l * d as u128),
        ("conv", elementwise(len, d, NONLINEAR)),
        ("conv", elementwise(len, d, NONLINEAR)),
        ("conv", affine(len, d, d)),
        ("conv", elementwise(len, d, 1)),
    ]);
    out.extend(ffn("ff2"));
    out.push(("final_norm", elementwise(len, d, NONLINEAR)));
    out
}

pub fn layer_flops(p: &ConformerLayerParams, len: usize) -> u128 {
    layer_components(p, len).iter().map(|c| c.1).sum()
}

fn frontend_flops(d: usize, frames: usize) -> u128 {
    let t = frontend_frames(frames);
    let conv = 2 * (t * d * FEATURE_DIM * 3) as u128 + (t * d) as u128;
    conv + elementwise(t, d, NONLINEAR) + elementwise(t, d, 1)
}

fn decoder_flops(d: usize, classes: usize, len: usize) -> u128 {
    affine(len, d, classes) + elementwise(len, classes, NONLINEAR)
}

/// Downsample by `k`, `layers` at the reduced rate, upsample, residual add.
fn sampled_block(p: &ConformerLayerParams, len: usize, k: usize, layers: usize) -> u128 {
    let sampling = if k == 1 { 0 } else { 2 * elementwise(len, p.d_model, 1) };
    sampling + layers as u128 * layer_flops(p, len.div_ceil(k)) + elementwise(len, p.d_model, 1)
}

/// Component walk: every named piece of the encoder with its cost.
pub fn flops_per_exit(config: &ModelConfig, frames: usize) -> FlopsReport {
    let p = config.layer_params();
    let d = config.d_model;
    let len = frontend_frames(frames);
    let mut components = vec![FlopsComponent {
        exit: 1,
        name: "frontend".into(),
        flops: frontend_flops(d, frames),
    }];
    let mut push = |exit: usize, name: String, flops: u128| components.push(FlopsComponent { exit, name, flops });
    let decoder = decoder_flops(d, config.vocab_size, len);
    match config.variant {
        Variant::EeBaseline | Variant::Splitformer => {
            for m in 1..=config.n_exits {
                for j in 0..config.exit_every {
                    let i = (m - 1) * config.exit_every + j;
                    for (part, f) in layer_components(&p, len) {
                        push(m, format!("layers.{i}.{part}"), f);
                    }
                }
                if config.is_split_exit(m) {
                    let k = config.split_factor;
                    push(m, format!("parallel.{}.sampling", m - 1), 3 * elementwise(len, d, 1));
                    for (part, f) in layer_components(&p, len.div_ceil(k)) {
                        push(m, format!("parallel.{}.{part}", m - 1), f);
                    }
                }
                push(m, format!("exits.{}", m - 1), decoder);
            }
        }
        Variant::ConformerBaseline => {
            for i in 0..config.n_layers {
                for (part, f) in layer_components(&p, len) {
                    push(1, format!("layers.{i}.{part}"), f);
                }
            }
            push(1, "exits.0".into(), decoder);
        }
        Variant::UnetModified => {
            for i in 0..config.unet_stem_layers {
                for (part, f) in layer_components(&p, len) {
                    push(1, format!("layers.{i}.{part}"), f);
                }
            }
            let mut next = config.unet_stem_layers;
            for (b, &k) in config.unet_factors.iter().enumerate() {
                let sampling = if k == 1 { 1 } else { 3 };
                push(1, format!("unet.{b}.sampling"), sampling * elementwise(len, d, 1));
                for j in 0..config.unet_block_layers {
                    for (part, f) in layer_components(&p, len.div_ceil(k)) {
                        push(1, format!("layers.{}.{part}", next + j), f);
                    }
                }
                next += config.unet_block_layers;
            }
            push(1, "exits.0".into(), decoder);
        }
    }
    let exits = config.exits();
    let per_exit = (1..=exits)
        .map(|m| {
            components
                .iter()
                .filter(|c| c.exit <= m && !(c.name.starts_with("exits.") && c.exit != m))
                .map(|c| c.flops)
                .sum()
        })
        .collect();
    FlopsReport {
        frames,
        components,
        per_exit,
    }
}

/// Whole-model symbolic sum: each conformer layer over `L` frames costs
/// `αL + βL²` with
/// `α = 8d·ff + 12ff + 14d² + 2dK + 56d` and `β = 4d + 6h`.
pub fn flops_closed_form(config: &ModelConfig, frames: usize) -> Vec<u128> {
    let (d, ff, h, k) = (
        config.d_model as u128,
        config.d_ff as u128,
        config.n_heads as u128,
        config.conv_kernel as u128,
    );
    let alpha = 8 * d * ff + 12 * ff + 14 * d * d + 2 * d * k + 56 * d;
    let beta = 4 * d + 6 * h;
    let layer = |l: u128| alpha * l + beta * l * l;
    let l = frontend_frames(frames) as u128;
    let v = config.vocab_size as u128;
    let front = l * d * (6 * FEATURE_DIM as u128 + 7);
    let dec = l * v * (2 * d + 6);
    match config.variant {
        Variant::EeBaseline | Variant::Splitformer => {
            let block = config.exit_every as u128 * layer(l);
            let s = config.split_factor as u128;
            let surcharge = 3 * l * d + layer(l.div_ceil(s));
            (1..=config.n_exits)
                .map(|m| {
                    let splits = (1..=m).filter(|&e| config.is_split_exit(e)).count() as u128;
                    front + m as u128 * block + splits * surcharge + dec
                })
                .collect()
        }
        Variant::ConformerBaseline => vec![front + config.n_layers as u128 * layer(l) + dec],
        Variant::UnetModified => {
            let stem = config.unet_stem_layers as u128 * layer(l);
            let blocks: u128 = config
                .unet_factors
                .iter()
                .map(|&f| {
                    let f = f as u128;
                    let sampling = if f == 1 { l * d } else { 3 * l * d };
                    sampling + config.unet_block_layers as u128 * layer(l.div_ceil(f))
                })
                .sum();
            vec![front + stem + blocks + dec]
        }
    }
}

/// One-layer cost used by the U-net residual blocks.
pub fn unet_block_flops(config: &ModelConfig, frames: usize, factor: usize) -> u128 {
    sampled_block(&config.layer_params(), frontend_frames(frames), factor, config.unet_block_layers)
}
