use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEmbedding {
    /// Learned additive tables, one spatial and one temporal.
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttention {
    /// Optical tokens query radar tokens.
    S2QueriesS1,
    S1QueriesS2,
    /// Both directions with separate decoders; the two streams are averaged.
    Bidirectional,
}

/// Architecture of the multi-modal temporal-spatial transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_t: usize,
    pub patch_hw: usize,
    pub embed_dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Radar channels: VV/VH for both passes plus incidence angle.
    pub s1_channels: usize,
    /// Optical channels.
    pub s2_channels: usize,
    pub seasons: usize,
    /// Side of the square input window in pixels.
    pub image_size: usize,
    /// One spatial and one temporal encoder for both modalities.
    pub share_encoders: bool,
    pub positional: PositionalEmbedding,
    pub cross_attention: CrossAttention,
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_t: 1,
            patch_hw: 8,
            embed_dim: 192,
            spatial_layers: 2,
            temporal_layers: 2,
            decoder_layers: 2,
            heads: 6,
            mlp_ratio: 4,
            num_classes: 8,
            s1_channels: 5,
            s2_channels: 10,
            seasons: 4,
            image_size: 128,
            share_encoders: true,
            positional: PositionalEmbedding::Learned,
            cross_attention: CrossAttention::S2QueriesS1,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.patch_t == 0 || self.seasons == 0 || self.seasons % self.patch_t != 0 {
            return fail(format!("patch_t {} must divide seasons {}", self.patch_t, self.seasons));
        }
        if self.patch_hw == 0 || self.image_size == 0 || self.image_size % self.patch_hw != 0 {
            return fail(format!("patch_hw {} must divide image_size {}", self.patch_hw, self.image_size));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 || self.s1_channels == 0 || self.s2_channels == 0 {
            return fail("mlp_ratio, num_classes and channel counts must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn time_tokens(&self) -> usize {
        self.seasons / self.patch_t
    }

    pub fn grid_tokens(&self) -> usize {
        self.image_size / self.patch_hw
    }

    pub fn tokens(&self) -> usize {
        self.time_tokens() * self.grid_tokens() * self.grid_tokens()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ModelError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
