use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const PATCH_WEIGHT: &str = "embeddings.patch_embeddings.weight";
pub const PATCH_BIAS: &str = "embeddings.patch_embeddings.bias";
pub const CLS_TOKEN: &str = "embeddings.cls_token";
pub const POSITIONS: &str = "embeddings.position_embeddings";
pub const FINAL_LN_WEIGHT: &str = "layernorm.weight";
pub const FINAL_LN_BIAS: &str = "layernorm.bias";
pub const POOLER_WEIGHT: &str = "pooler.dense.weight";
pub const POOLER_BIAS: &str = "pooler.dense.bias";

/// Per-layer tensor suffixes, in manifest order.
pub const LAYER_TENSORS: [&str; 16] = [
    "layernorm_before.weight",
    "layernorm_before.bias",
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "layernorm_after.weight",
    "layernorm_after.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

pub fn layer_name(layer: usize, suffix: &str) -> String {
    format!("encoder.layer.{layer}.{suffix}")
}

fn layer_shape(cfg: &ViTConfig, suffix: &str) -> Vec<usize> {
    let (d, m) = (cfg.hidden_size, cfg.mlp_size);
    match suffix {
        "mlp.fc1.weight" => vec![d, m],
        "mlp.fc1.bias" => vec![m],
        "mlp.fc2.weight" => vec![m, d],
        s if s.ends_with(".weight") && s.starts_with("attention") => vec![d, d],
        _ => vec![d],
    }
}

/// Encoder parameters, held by contract name.
///
/// Projection matrices are stored `in×out` so that a row vector times the
/// matrix gives the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    config: ViTConfig,
    params: ParamStore,
}

impl ViTWeights {
    /// Every tensor name with its shape, in canonical order.
    pub fn contract(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.hidden_size;
        let mut out = vec![
            (PATCH_WEIGHT.to_string(), vec![cfg.patch_dim(), d]),
            (PATCH_BIAS.to_string(), vec![d]),
            (CLS_TOKEN.to_string(), vec![d]),
            (POSITIONS.to_string(), vec![cfg.tokens(), d]),
        ];
        for l in 0..cfg.layers {
            for suffix in LAYER_TENSORS {
                out.push((layer_name(l, suffix), layer_shape(cfg, suffix)));
            }
        }
        out.extend([
            (FINAL_LN_WEIGHT.to_string(), vec![d]),
            (FINAL_LN_BIAS.to_string(), vec![d]),
            (POOLER_WEIGHT.to_string(), vec![d, cfg.feature_dim]),
            (POOLER_BIAS.to_string(), vec![cfg.feature_dim]),
        ]);
        out
    }

    pub fn parameter_count(cfg: &ViTConfig) -> usize {
        Self::contract(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Validates names and shapes against the contract for `config`.
    pub fn from_params(config: ViTConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.audit(&Self::contract(&config))?;
        Ok(Self { config, params })
    }

    /// Random initialization: normal(0, 0.02) matrices and embeddings, unit
    /// layer-norm scales, zero biases.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(&[seed, 0x71_7E]);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let params = Self::contract(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("norm_before.weight")
                    || name.ends_with("norm_after.weight")
                    || name == FINAL_LN_WEIGHT
                {
                    Tensor::full(shape, 1.0)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Zero attention and MLP weights, unit layer norms.
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::contract(&config)
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with("norm_before.weight")
                    || name.ends_with("norm_after.weight")
                    || name == FINAL_LN_WEIGHT
                {
                    1.0
                } else {
                    0.0
                };
                (name, Tensor::full(shape, fill))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Perturbs every tensor with uniform noise in `±scale`; used to move
    /// away from symmetric initializations in tests.
    pub fn jitter(&mut self, scale: f32, seed: u64) {
        let mut rng = rng_for(&[seed, 0x71_7EE2]);
        for (_, t) in self.params.iter_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-scale..scale);
            }
        }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// Replaces one tensor, keeping the shape contract.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name)?;
        t.expect_shape(slot.shape())?;
        *slot = t;
        Ok(())
    }

    /// In-place access for optimizer updates, which never change shapes.
    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }
}
