use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{ConformerLayerParams, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ConformerBaseline,
    UnetModified,
    EeBaseline,
    Splitformer,
}

impl Variant {
    pub fn is_early_exit(self) -> bool {
        matches!(self, Variant::EeBaseline | Variant::Splitformer)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConformerBaseline => "conformer_baseline",
            Variant::UnetModified => "unet_modified",
            Variant::EeBaseline => "ee_baseline",
            Variant::Splitformer => "splitformer",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conformer_baseline" => Ok(Variant::ConformerBaseline),
            "unet_modified" => Ok(Variant::UnetModified),
            "ee_baseline" => Ok(Variant::EeBaseline),
            "splitformer" => Ok(Variant::Splitformer),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

/// Architecture description. Field defaults reproduce the 12-layer,
/// 256-wide encoders with 257 output classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub conv_norm: NormKind,
    /// Conformer layers in the main trunk.
    pub n_layers: usize,
    /// Trunk layers per exit block (early-exit variants).
    pub exit_every: usize,
    pub n_exits: usize,
    /// Output classes including blank.
    pub vocab_size: usize,
    /// Layers before the first U-net block.
    pub unet_stem_layers: usize,
    pub unet_block_layers: usize,
    /// Downsampling factor of each U-net block, relative to the 50 Hz stream.
    pub unet_factors: Vec<usize>,
    /// 1-based exits whose block carries a parallel downsampled layer.
    pub split_exits: Vec<usize>,
    pub split_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::ee_baseline()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid model config: {}", .0.join("; "))]
pub struct ConfigError(pub Vec<String>);

impl ModelConfig {
    pub fn ee_baseline() -> Self {
        Self {
            variant: Variant::EeBaseline,
            d_model: 256,
            n_heads: 8,
            d_ff: 2048,
            conv_kernel: 31,
            conv_norm: NormKind::LayerNorm,
            n_layers: 12,
            exit_every: 2,
            n_exits: 6,
            vocab_size: 257,
            unet_stem_layers: 2,
            unet_block_layers: 2,
            unet_factors: vec![1, 2, 4, 8, 2],
            split_exits: vec![1, 6],
            split_factor: 2,
        }
    }

    pub fn splitformer() -> Self {
        Self {
            variant: Variant::Splitformer,
            ..Self::ee_baseline()
        }
    }

    pub fn conformer_baseline() -> Self {
        Self {
            variant: Variant::ConformerBaseline,
            n_exits: 1,
            exit_every: 12,
            ..Self::ee_baseline()
        }
    }

    pub fn unet_modified() -> Self {
        Self {
            variant: Variant::UnetModified,
            n_exits: 1,
            exit_every: 12,
            ..Self::ee_baseline()
        }
    }

    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::ConformerBaseline => Self::conformer_baseline(),
            Variant::UnetModified => Self::unet_modified(),
            Variant::EeBaseline => Self::ee_baseline(),
            Variant::Splitformer => Self::splitformer(),
        }
    }

    /// Reduced early-exit model used for desk-scale training: 4 exits of one
    /// layer each, width 64, 2 heads.
    pub fn toy(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            conv_kernel: 7,
            n_layers: 4,
            exit_every: 1,
            n_exits: 4,
            vocab_size,
            split_exits: vec![1, 4],
            ..Self::ee_baseline()
        }
    }

    pub fn layer_params(&self) -> ConformerLayerParams {
        ConformerLayerParams {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            conv_kernel: self.conv_kernel,
            conv_norm: self.conv_norm,
        }
    }

    pub fn exits(&self) -> usize {
        if self.variant.is_early_exit() {
            self.n_exits
        } else {
            1
        }
    }

    /// Total conformer layers, parallel branches included.
    pub fn total_layers(&self) -> usize {
        match self.variant {
            Variant::Splitformer => self.n_layers + self.split_exits.len(),
            _ => self.n_layers,
        }
    }

    pub fn is_split_exit(&self, exit: usize) -> bool {
        self.variant == Variant::Splitformer && self.split_exits.contains(&exit)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bad.push(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(2) {
            bad.push(format!("d_model {} must be even for positional encoding", self.d_model));
        }
        if self.d_ff == 0 {
            bad.push("d_ff must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            bad.push(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.vocab_size < 2 {
            bad.push(format!("vocab_size {} must include blank and one token", self.vocab_size));
        }
        if self.n_layers == 0 {
            bad.push("n_layers must be positive".into());
        }
        match self.variant {
            Variant::EeBaseline | Variant::Splitformer => {
                if self.n_exits == 0 || self.exit_every * self.n_exits != self.n_layers {
                    bad.push(format!(
                        "n_layers {} must equal exit_every {} x n_exits {}",
                        self.n_layers, self.exit_every, self.n_exits
                    ));
                }
            }
            Variant::ConformerBaseline => {
                if self.n_exits != 1 {
                    bad.push("single-exit variant needs n_exits = 1".into());
                }
            }
            Variant::UnetModified => {
                if self.n_exits != 1 {
                    bad.push("single-exit variant needs n_exits = 1".into());
                }
                let want = self.unet_stem_layers + self.unet_factors.len() * self.unet_block_layers;
                if want != self.n_layers {
                    bad.push(format!(
                        "n_layers {} must equal unet_stem_layers + blocks x unet_block_layers = {want}",
                        self.n_layers
                    ));
                }
                if self.unet_factors.contains(&0) {
                    bad.push("unet_factors must be positive".into());
                }
            }
        }
        if self.variant == Variant::Splitformer {
            if self.split_factor == 0 {
                bad.push("split_factor must be positive".into());
            }
            let mut seen = self.split_exits.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != self.split_exits.len()
                || self.split_exits.iter().any(|&e| e == 0 || e > self.n_exits)
            {
                bad.push(format!("split_exits {:?} must be distinct exits in 1..={}", self.split_exits, self.n_exits));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(bad))
        }
    }
}
