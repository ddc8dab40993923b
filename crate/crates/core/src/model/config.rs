use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::VocabSizes;
use crate::error::ModelError;

/// Number of modalities fused by each fusion unit (image, text).
pub const MODALITIES: usize = 2;

/// Side features per behavior event besides the age/gender embeddings:
/// click/order one-hot, `ln(1 + frequency)`, `exp(-recency / 30)`.
pub const EVENT_SCALAR_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Feed-forward width as a multiple of the model width.
    pub ffn_mult: usize,
}

impl EncoderConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width; also the image embedding width.
    pub dim: usize,
    pub din_hidden: usize,
    pub mlp_width: usize,
    /// Width of the price and sales fields.
    pub field_width: usize,
    pub price_buckets: usize,
    pub cafu_reduction: usize,
    pub encoder: EncoderConfig,
    pub vocab: VocabSizes,
}

impl ModelConfig {
    /// Embedding width 32, two encoder layers of 6 heads × 32.
    pub fn standard(vocab: VocabSizes) -> Self {
        ModelConfig {
            dim: 32,
            din_hidden: 32,
            mlp_width: 64,
            field_width: 16,
            price_buckets: 16,
            cafu_reduction: 2,
            encoder: EncoderConfig {
                layers: 2,
                heads: 6,
                head_dim: 32,
                ffn_mult: 2,
            },
            vocab,
        }
    }

    /// Smaller network used for the multi-seed ablation benchmark.
    pub fn compact(vocab: VocabSizes) -> Self {
        ModelConfig {
            dim: 32,
            din_hidden: 16,
            mlp_width: 32,
            field_width: 8,
            price_buckets: 16,
            cafu_reduction: 2,
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                head_dim: 8,
                ffn_mult: 2,
            },
            vocab,
        }
    }

    /// Embedding width 8, one layer of 2 heads; for gradient checks.
    pub fn tiny(vocab: VocabSizes) -> Self {
        ModelConfig {
            dim: 8,
            din_hidden: 8,
            mlp_width: 8,
            field_width: 4,
            price_buckets: 4,
            cafu_reduction: 2,
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                head_dim: 4,
                ffn_mult: 2,
            },
            vocab,
        }
    }

    /// Context width: query, age and gender embeddings.
    pub fn context_dim(&self) -> usize {
        3 * self.dim
    }

    pub fn cafu_hidden(&self) -> usize {
        (MODALITIES + self.context_dim()) / self.cafu_reduction
    }

    pub fn event_side_dim(&self) -> usize {
        EVENT_SCALAR_FEATURES + 2 * self.dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.din_hidden == 0 || self.mlp_width == 0 || self.field_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.price_buckets == 0 {
            return bad("price_buckets must be positive".into());
        }
        let fused = MODALITIES + self.context_dim();
        if self.cafu_reduction == 0 || fused % self.cafu_reduction != 0 {
            return bad(format!(
                "M + J = {fused} is not divisible by reduction ratio {}",
                self.cafu_reduction
            ));
        }
        let e = &self.encoder;
        if e.layers == 0 || e.heads == 0 || e.head_dim == 0 || e.ffn_mult == 0 {
            return bad("encoder sizes must be positive".into());
        }
        Ok(())
    }
}

/// Model configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fusion units plus the auxiliary click objective.
    Full,
    /// Same network, trained without the click objective.
    NoAux,
    /// Fusion units replaced by concatenation and a linear projection; no click objective.
    NoCafuNoAux,
    /// Text and ID features only; no image inputs and no click objective.
    NoImage,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoImage,
        Variant::NoCafuNoAux,
        Variant::NoAux,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAux => "no_aux",
            Variant::NoCafuNoAux => "no_cafu_no_aux",
            Variant::NoImage => "no_image",
        }
    }

    pub fn uses_cafu(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAux)
    }

    pub fn uses_image(self) -> bool {
        !matches!(self, Variant::NoImage)
    }

    /// Whether the auxiliary click loss contributes during training.
    pub fn trains_aux(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_aux" => Ok(Variant::NoAux),
            "no_cafu_no_aux" => Ok(Variant::NoCafuNoAux),
            "no_image" => Ok(Variant::NoImage),
            _ => Err(format!(
                "unknown variant {s:?} (expected full, no_aux, no_cafu_no_aux or no_image)"
            )),
        }
    }
}
