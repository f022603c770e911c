//! Vision transformer feature extractor.
//!
//! One prepared `H×W×C` slice is cut into `P×P` patches, linearly embedded,
//! prefixed with a class token, offset by learned positional embeddings and
//! passed through `L` pre-norm encoder blocks. The final-normalized class
//! token goes through the pooler projection to give the slice's feature
//! vector.

mod encoder;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use encoder::{
    add_positional, embed_tokens, encoder_block, extract_slice_features, forward_graph, msa,
    patchify, pooler_features, slice_features, unpatchify, EncoderVars,
};
pub use weights::{
    layer_name, ViTWeights, CLS_TOKEN, FINAL_LN_BIAS, FINAL_LN_WEIGHT, LAYER_TENSORS, PATCH_BIAS,
    PATCH_WEIGHT, POOLER_BIAS, POOLER_WEIGHT, POSITIONS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub feature_dim: usize,
    /// Apply `tanh` after the pooler projection.
    pub pooler_tanh: bool,
    pub layer_norm_eps: f32,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            layers: 12,
            hidden_size: 768,
            mlp_size: 3072,
            heads: 12,
            feature_dim: 768,
            pooler_tanh: true,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ViTConfig {
    /// Small configuration for tests and demos.
    pub fn toy(
        image_size: usize,
        patch_size: usize,
        layers: usize,
        hidden: usize,
        heads: usize,
    ) -> Self {
        Self {
            image_size,
            patch_size,
            channels: 3,
            layers,
            hidden_size: hidden,
            mlp_size: 4 * hidden,
            heads,
            feature_dim: hidden,
            pooler_tanh: true,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("mlp_size", self.mlp_size),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps must be > 0"));
        }
        Ok(())
    }

    /// `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// `N + 1`, counting the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch width `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Token matrix `(N+1)×D`; row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

/// Pooled feature vector of one slice, length `D_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeatures {
    pub vector: Tensor,
}

/// `T×D_f` per-slice features in inferior→superior order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    pub features: Tensor,
}

impl SliceSequence {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(format!(
                "slice sequence must be T×D_f, got {:?}",
                features.shape()
            )));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_vit_base_geometry() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 196);
        assert_eq!(c.tokens(), 197);
        assert_eq!(c.patch_dim(), 768);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        for c in [
            ViTConfig {
                patch_size: 15,
                ..ViTConfig::default()
            },
            ViTConfig {
                heads: 7,
                ..ViTConfig::default()
            },
            ViTConfig {
                layers: 0,
                ..ViTConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
